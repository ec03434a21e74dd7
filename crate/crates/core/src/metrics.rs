//! Image and toy-space quality metrics.

use serde::{Deserialize, Serialize};

use crate::linops::DownsampleOperator;
use crate::{Error, Result, Tensor};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 8;

/// One logged evaluation of a run. Column order is the CSV header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub iteration: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub lr_consistency: f64,
    pub hr_mse: f64,
}

fn same_shape(a: &Tensor, b: &Tensor, context: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { context, expected: a.shape().to_vec(), actual: b.shape().to_vec() });
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b, "mse")?;
    Ok(a.sub(b)?.sum_sq() / a.len().max(1) as f64)
}

pub fn psnr(pred: &Tensor, target: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(pred, target)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

/// Mean SSIM over every `k×k` window (stride 1) of every trailing 2-D
/// plane, with `k = min(8, h, w)`.
pub fn ssim(pred: &Tensor, target: &Tensor, peak: f64) -> Result<f64> {
    same_shape(pred, target, "ssim")?;
    let shape = pred.shape();
    if shape.len() < 2 {
        return Err(Error::ShapeMismatch { context: "ssim needs a 2-D image", expected: vec![0, 0], actual: shape.to_vec() });
    }
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    let k = SSIM_WINDOW.min(h).min(w);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let plane = h * w;
    let planes = pred.len() / plane;
    let n = (k * k) as f64;
    let (mut total, mut count) = (0.0, 0usize);
    for p in 0..planes {
        let a = &pred.data()[p * plane..(p + 1) * plane];
        let b = &target.data()[p * plane..(p + 1) * plane];
        for i in 0..=h - k {
            for j in 0..=w - k {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for di in 0..k {
                    for dj in 0..k {
                        let (u, v) = (a[(i + di) * w + j + dj], b[(i + di) * w + j + dj]);
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Mean squared difference between `x` and `A ŷ`.
pub fn lr_consistency(x: &Tensor, y_hat: &Tensor, op: &DownsampleOperator) -> Result<f64> {
    mse(x, &op.apply(y_hat)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::{fit_pseudoinverse, AffineProjector, FitConfig};
    use crate::rng::{seeded, Rng};
    use proptest::prelude::*;
    use rand::Rng as _;

    fn random_image(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    #[test]
    fn psnr_examples() {
        let a = Tensor::full(&[4, 4], 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
        let b = Tensor::full(&[4, 4], 0.6);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_matches_direct_formula() {
        let mut rng = seeded(3);
        let a = random_image(&mut rng, &[2, 9, 7]);
        let b = random_image(&mut rng, &[2, 9, 7]);
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += (a.data()[i] - b.data()[i]).powi(2);
        }
        let direct = 10.0 * (1.0 / (acc / a.len() as f64)).log10();
        assert!((psnr(&a, &b, 1.0).unwrap() - direct).abs() < 1e-9);
    }

    #[test]
    fn ssim_examples() {
        let mut rng = seeded(4);
        let a = random_image(&mut rng, &[12, 12]);
        assert!((ssim(&a, &a, 1.0).unwrap() - 1.0).abs() < 1e-12);
        let y = Tensor::full(&[10, 10], 0.4);
        let yh = Tensor::full(&[10, 10], 0.5);
        let c1 = 1e-4;
        let expect = (2.0 * 0.4 * 0.5 + c1) / (0.16 + 0.25 + c1);
        assert!((ssim(&yh, &y, 1.0).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn lr_consistency_examples() {
        let down = crate::linops::DownsampleOperator::toy_average();
        let up = fit_pseudoinverse(&down, &FitConfig { iterations: 10, ..Default::default() }).unwrap();
        let proj = AffineProjector::new(down.clone(), up.clone()).unwrap();
        let x = Tensor::from_vec(&[3, 1], vec![0.3, -1.0, 2.0]).unwrap();
        let exact = up.apply(&x).unwrap();
        assert!(lr_consistency(&x, &exact, &down).unwrap() <= proj.tolerance.powi(2));
        let f = Tensor::from_vec(&[3, 2], vec![5.0, 1.0, 0.0, 0.0, -3.0, 2.0]).unwrap();
        assert!(lr_consistency(&x, &f, &down).unwrap() > 0.0);
        let y = proj.project(&f, &x).unwrap();
        assert!(lr_consistency(&x, &y, &down).unwrap() <= 1e-12);
    }

    proptest! {
        #[test]
        fn ssim_and_psnr_are_symmetric(seed in 0u64..1000, h in 3usize..12, w in 3usize..12) {
            let mut rng = seeded(seed);
            let a = random_image(&mut rng, &[2, h, w]);
            let b = random_image(&mut rng, &[2, h, w]);
            let (s1, s2) = (ssim(&a, &b, 1.0).unwrap(), ssim(&b, &a, 1.0).unwrap());
            prop_assert!((s1 - s2).abs() < 1e-12);
            prop_assert!(s1 <= 1.0 + 1e-12);
            prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
            prop_assert!(psnr(&a, &b, 1.0).unwrap() >= 0.0);
        }
    }
}
