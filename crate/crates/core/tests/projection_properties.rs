use std::sync::OnceLock;

use affmap::linops::{
    closed_form_pseudoinverse, default_sigma_blur, fit_pseudoinverse, least_squares_right_inverse, AffineProjector,
    DownsampleOperator, FitConfig,
};
use affmap::Tensor;
use proptest::prelude::*;

fn matrix_case() -> impl Strategy<Value = (usize, usize, Vec<f64>)> {
    (1usize..4, 1usize..4).prop_flat_map(|(rows, extra)| {
        let cols = rows + extra;
        (Just(rows), Just(cols), prop::collection::vec(-2.0f64..2.0, rows * cols))
    })
}

fn batch(shape: &[usize], values: &[f64]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, values.iter().cycle().take(n).copied().collect()).unwrap()
}

fn well_conditioned(rows: usize, cols: usize, w: &[f64]) -> Option<DownsampleOperator> {
    let a = DownsampleOperator::matrix(rows, cols, w.to_vec()).ok()?;
    closed_form_pseudoinverse(&a).ok().filter(|b| b.weights().iter().all(|v| v.abs() < 1e3))?;
    Some(a)
}

fn gaussian_4x() -> &'static AffineProjector {
    static P: OnceLock<AffineProjector> = OnceLock::new();
    P.get_or_init(|| {
        let down = DownsampleOperator::gaussian(9, default_sigma_blur(4), 4, [32, 32], 1).unwrap();
        let up = fit_pseudoinverse(&down, &FitConfig { iterations: 200, ..Default::default() }).unwrap();
        AffineProjector::new(down, up).unwrap()
    })
}

proptest! {
    #[test]
    fn projection_lands_on_the_observation((rows, cols, w) in matrix_case(),
                                           f in prop::collection::vec(-5.0f64..5.0, 1..12),
                                           x in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        let Some(a) = well_conditioned(rows, cols, &w) else { return Ok(()) };
        let proj = AffineProjector::new(a.clone(), closed_form_pseudoinverse(&a).unwrap()).unwrap();
        let (f, x) = (batch(&[3, cols], &f), batch(&[3, rows], &x));
        let y = proj.project(&f, &x).unwrap();
        prop_assert!(a.apply(&y).unwrap().sub(&x).unwrap().max_abs() <= 1e-8 * (1.0 + x.max_abs()));
    }

    #[test]
    fn projection_is_idempotent((rows, cols, w) in matrix_case(),
                                f in prop::collection::vec(-5.0f64..5.0, 1..12),
                                x in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        let Some(a) = well_conditioned(rows, cols, &w) else { return Ok(()) };
        let proj = AffineProjector::new(a.clone(), closed_form_pseudoinverse(&a).unwrap()).unwrap();
        let (f, x) = (batch(&[2, cols], &f), batch(&[2, rows], &x));
        let once = proj.project(&f, &x).unwrap();
        let twice = proj.project(&once, &x).unwrap();
        prop_assert!(once.sub(&twice).unwrap().max_abs() <= 1e-8 * (1.0 + once.max_abs()));
    }

    #[test]
    fn projection_matches_explicit_formula((rows, cols, w) in matrix_case(),
                                           f in prop::collection::vec(-5.0f64..5.0, 1..12),
                                           x in prop::collection::vec(-5.0f64..5.0, 1..12)) {
        let Some(a) = well_conditioned(rows, cols, &w) else { return Ok(()) };
        let b = closed_form_pseudoinverse(&a).unwrap();
        let proj = AffineProjector::new(a.clone(), b.clone()).unwrap();
        let (f, x) = (batch(&[2, cols], &f), batch(&[2, rows], &x));
        let explicit = f.add(&b.apply(&x.sub(&a.apply(&f).unwrap()).unwrap()).unwrap()).unwrap();
        prop_assert!(proj.project(&f, &x).unwrap().sub(&explicit).unwrap().max_abs() <= 1e-10 * (1.0 + explicit.max_abs()));
    }

    #[test]
    fn least_squares_start_equals_closed_form((rows, cols, w) in matrix_case()) {
        let Some(a) = well_conditioned(rows, cols, &w) else { return Ok(()) };
        let ls = least_squares_right_inverse(&a, 0).unwrap();
        let cf = closed_form_pseudoinverse(&a).unwrap();
        for (u, v) in ls.weights().iter().zip(cf.weights()) {
            prop_assert!((u - v).abs() <= 1e-8 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn projection_gradient_is_the_adjoint(u in prop::collection::vec(-1.0f64..1.0, 1024),
                                          v in prop::collection::vec(-1.0f64..1.0, 1024)) {
        let p = gaussian_4x();
        let (u, v) = (batch(&[1, 1, 32, 32], &u), batch(&[1, 1, 32, 32], &v));
        let zero = Tensor::zeros(&[1, 1, 8, 8]);
        let lhs = p.project_unchecked(&u, &zero).unwrap().dot(&v);
        let rhs = u.dot(&p.project_gradient(&v).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn fitted_convolutional_projection_is_consistent(f in prop::collection::vec(0.0f64..1.0, 1024),
                                                     x in prop::collection::vec(0.0f64..1.0, 64)) {
        let p = gaussian_4x();
        let (f, x) = (batch(&[1, 1, 32, 32], &f), batch(&[1, 1, 8, 8], &x));
        prop_assert!(p.consistency_residual(&p.project(&f, &x).unwrap(), &x).unwrap() <= p.tolerance);
    }
}
