//! Swiss-roll data distribution, its Gaussian KDE surrogate and the
//! brute-force oracles built on top of it.
//!
//! Observations are `x = (y1 + y2) / 2`. Every oracle parametrises the
//! affine line of valid reconstructions as `y = (x + s, x - s)` and searches
//! over the offset `s`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Lowest log-density reported; values below are clamped and flagged.
pub const LOG_DENSITY_FLOOR: f64 = -745.0;

/// Half-width of the line search in `y1`: `y1 ∈ [2x - 20, 20]`.
pub const LINE_HALF_RANGE: f64 = 20.0;
pub const LINE_GRID_POINTS: usize = 20_001;
pub const REFINE_ROUNDS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwissRollParams {
    pub mu1: f64,
    pub sigma1: f64,
    pub mu2: f64,
    pub sigma2: f64,
}

impl Default for SwissRollParams {
    fn default() -> Self {
        SwissRollParams {
            mu1: 10.0,
            sigma1: 3.0,
            mu2: 0.0,
            sigma2: 0.2,
        }
    }
}

impl SwissRollParams {
    pub fn noiseless(self) -> Self {
        SwissRollParams { sigma2: 0.0, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.mu1, self.sigma1, self.mu2, self.sigma2]
            .iter()
            .all(|v| v.is_finite())
            && self.sigma1 >= 0.0
            && self.sigma2 >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid swiss-roll parameters {self:?}")))
        }
    }
}

/// Draws `n` i.i.d. points from the roll.
pub fn sample_swiss_roll(params: &SwissRollParams, n: usize, rng: &mut Rng) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            let nu1 = params.mu1 + params.sigma1 * rng::normal(rng);
            let nu2 = params.mu2 + params.sigma2 * rng::normal(rng);
            let r = 0.4 * nu1 + nu2;
            [nu1.cos() * r, nu1.sin() * r]
        })
        .collect()
}

/// Downsampled observation of a 2D point.
pub fn observe(y: [f64; 2]) -> f64 {
    0.5 * (y[0] + y[1])
}

/// Point on the line of reconstructions of `x` at offset `s`.
pub fn line_point(x: f64, s: f64) -> [f64; 2] {
    [x + s, x - s]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogDensity {
    pub value: f64,
    pub floored: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossEntropy {
    /// Mean negative log-density in nats.
    pub nats: f64,
    /// Number of samples whose log-density hit the floor.
    pub floored: usize,
}

/// Uniform bucket grid over the reference points for radius queries.
#[derive(Debug, Clone)]
struct CellIndex {
    origin: [f64; 2],
    cell: f64,
    dims: [usize; 2],
    starts: Vec<usize>,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl CellIndex {
    fn new(points: &[[f64; 2]], cell: f64) -> Self {
        let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
        for p in points {
            for a in 0..2 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let dims = [0, 1].map(|a| (((hi[a] - lo[a]) / cell).floor() as usize) + 1);
        let cell_of = |p: &[f64; 2]| {
            let cx = (((p[0] - lo[0]) / cell) as usize).min(dims[0] - 1);
            let cy = (((p[1] - lo[1]) / cell) as usize).min(dims[1] - 1);
            cy * dims[0] + cx
        };
        let mut counts = vec![0usize; dims[0] * dims[1] + 1];
        for p in points {
            counts[cell_of(p) + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut xs = vec![0.0; points.len()];
        let mut ys = vec![0.0; points.len()];
        for p in points {
            let c = cell_of(p);
            xs[fill[c]] = p[0];
            ys[fill[c]] = p[1];
            fill[c] += 1;
        }
        CellIndex {
            origin: lo,
            cell,
            dims,
            starts,
            xs,
            ys,
        }
    }

    /// Calls `visit` with every point slice of cells intersecting the disc.
    fn for_each_near(&self, y: [f64; 2], radius: f64, mut visit: impl FnMut(&[f64], &[f64])) {
        let lo = [0, 1].map(|a| ((y[a] - radius - self.origin[a]) / self.cell).floor());
        let hi = [0, 1].map(|a| ((y[a] + radius - self.origin[a]) / self.cell).floor());
        if hi[0] < 0.0 || hi[1] < 0.0 || lo[0] >= self.dims[0] as f64 || lo[1] >= self.dims[1] as f64 {
            return;
        }
        let cx0 = lo[0].max(0.0) as usize;
        let cy0 = lo[1].max(0.0) as usize;
        let cx1 = (hi[0] as usize).min(self.dims[0] - 1);
        let cy1 = (hi[1] as usize).min(self.dims[1] - 1);
        let r2 = radius * radius;
        for cy in cy0..=cy1 {
            let by0 = self.origin[1] + cy as f64 * self.cell;
            let dy = (by0 - y[1]).max(y[1] - by0 - self.cell).max(0.0);
            if dy * dy > r2 {
                continue;
            }
            let row = cy * self.dims[0];
            let a = self.starts[row + cx0];
            let b = self.starts[row + cx1 + 1];
            if a < b {
                visit(&self.xs[a..b], &self.ys[a..b]);
            }
        }
    }

    /// Squared distance to the nearest reference point.
    fn nearest_sq(&self, y: [f64; 2]) -> f64 {
        let mut radius = self.cell;
        loop {
            let mut best = f64::INFINITY;
            self.for_each_near(y, radius, |xs, ys| {
                for (px, py) in xs.iter().zip(ys) {
                    let d = (px - y[0]).powi(2) + (py - y[1]).powi(2);
                    best = best.min(d);
                }
            });
            if best <= radius * radius {
                return best;
            }
            radius *= 2.0;
        }
    }
}

/// Isotropic Gaussian kernel density estimate in two dimensions.
#[derive(Debug, Clone)]
pub struct KdeModel {
    points: Vec<[f64; 2]>,
    bandwidth: f64,
    log_norm: f64,
    index: CellIndex,
    /// `(observation, line offset, index)` of every reference, by observation.
    by_observation: Vec<(f64, f64, usize)>,
}

impl KdeModel {
    pub fn new(points: Vec<[f64; 2]>, bandwidth: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Config("KDE needs at least one reference point".into()));
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::Config(format!("KDE bandwidth must be positive, got {bandwidth}")));
        }
        if let Some(i) = points.iter().position(|p| !(p[0].is_finite() && p[1].is_finite())) {
            return Err(Error::NonFinite {
                context: "KDE reference points".into(),
                index: i,
            });
        }
        let log_norm = -(points.len() as f64).ln() - (2.0 * std::f64::consts::PI * bandwidth * bandwidth).ln();
        let index = CellIndex::new(&points, 2.0 * bandwidth);
        let mut by_observation: Vec<(f64, f64, usize)> = points
            .iter()
            .enumerate()
            .map(|(i, p)| (observe(*p), 0.5 * (p[0] - p[1]), i))
            .collect();
        by_observation.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(KdeModel {
            points,
            bandwidth,
            log_norm,
            index,
            by_observation,
        })
    }

    /// The reference KDE: `n` samples of the noiseless roll, bandwidth `σ2`.
    pub fn swiss_roll(params: &SwissRollParams, n: usize, seed: u64) -> Result<Self> {
        params.validate()?;
        let mut rng = rng::seeded(seed);
        let points = sample_swiss_roll(&params.noiseless(), n, &mut rng);
        KdeModel::new(points, params.sigma2)
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    fn inv_two_h2(&self) -> f64 {
        0.5 / (self.bandwidth * self.bandwidth)
    }

    /// Squared radius beyond which the dropped kernels sum to less than
    /// `exp(-40)` times the nearest one, given the nearest squared distance.
    fn cutoff_sq(&self, nearest_sq: f64) -> f64 {
        nearest_sq + ((self.points.len() as f64).ln() + 40.0) / self.inv_two_h2()
    }

    /// Kernels within the cutoff, each scaled by `exp(c·dmin)`; returns
    /// `(nearest_sq, scaled weight sum, scaled weighted offset sum)`.
    fn local_moments(&self, y: [f64; 2]) -> (f64, f64, [f64; 2]) {
        let c = self.inv_two_h2();
        let dmin = self.index.nearest_sq(y);
        let r2 = self.cutoff_sq(dmin);
        let (mut w, mut g) = (0.0, [0.0; 2]);
        self.index.for_each_near(y, r2.sqrt(), |xs, ys| {
            for (px, py) in xs.iter().zip(ys) {
                let (dx, dy) = (px - y[0], py - y[1]);
                let d = dx * dx + dy * dy;
                if d <= r2 {
                    let k = (-c * (d - dmin)).exp();
                    w += k;
                    g[0] += k * dx;
                    g[1] += k * dy;
                }
            }
        });
        (dmin, w, g)
    }

    /// Log of the unnormalised kernel sum.
    fn log_kernel_sum(&self, y: [f64; 2]) -> f64 {
        let (dmin, w, _) = self.local_moments(y);
        -self.inv_two_h2() * dmin + w.ln()
    }

    pub fn log_density_flagged(&self, y: [f64; 2]) -> LogDensity {
        let v = self.log_kernel_sum(y) + self.log_norm;
        if v < LOG_DENSITY_FLOOR || v.is_nan() {
            LogDensity {
                value: LOG_DENSITY_FLOOR,
                floored: true,
            }
        } else {
            LogDensity { value: v, floored: false }
        }
    }

    pub fn log_density(&self, y: [f64; 2]) -> f64 {
        self.log_density_flagged(y).value
    }

    /// Gradient of the (unclamped) log-density.
    pub fn grad_log_density(&self, y: [f64; 2]) -> [f64; 2] {
        let (_, w, g) = self.local_moments(y);
        let s = 2.0 * self.inv_two_h2() / w;
        [g[0] * s, g[1] * s]
    }

    pub fn cross_entropy(&self, samples: &[[f64; 2]]) -> CrossEntropy {
        let mut total = 0.0;
        let mut floored = 0;
        for y in samples {
            let ld = self.log_density_flagged(*y);
            total -= ld.value;
            floored += ld.floored as usize;
        }
        CrossEntropy {
            nats: total / samples.len().max(1) as f64,
            floored,
        }
    }

    /// Log kernel sums along the line of `x` at the evenly spaced offsets
    /// `lo + k·step`, `k < count`. Entries carrying less than `exp(-40)` of
    /// the line maximum may come back as `-inf`.
    fn line_profile(&self, x: f64, lo: f64, step: f64, count: usize) -> Result<Vec<f64>> {
        let c = self.inv_two_h2();
        // References sorted by their own observation value: the squared
        // distance from (x + s, x - s) to p is 2(o_p - x)² + 2(s - s_p)².
        let order = &self.by_observation;
        let start = order.partition_point(|&(o, _, _)| o < x);
        let mut perp_min = f64::INFINITY;
        for i in [start.wrapping_sub(1), start] {
            if let Some(&(o, _, _)) = order.get(i) {
                perp_min = perp_min.min(2.0 * (o - x) * (o - x));
            }
        }
        let r2 = self.cutoff_sq(perp_min);
        let half = (0.5 * r2).sqrt();
        let a = order.partition_point(|&(o, _, _)| o < x - half);
        let b = order.partition_point(|&(o, _, _)| o <= x + half);
        let mut sums = vec![0.0; count];
        let ratio_step = (-4.0 * c * step * step).exp();
        for &(o, sp, _) in &order[a..b] {
            let perp = 2.0 * (o - x) * (o - x);
            if perp > r2 {
                continue;
            }
            let w = (0.5 * (r2 - perp)).sqrt();
            let k0 = (((sp - w - lo) / step).ceil().max(0.0)) as usize;
            let k1f = ((sp + w - lo) / step).floor();
            if k1f < 0.0 {
                continue;
            }
            let k1 = (k1f as usize).min(count - 1);
            let base = -c * (perp - perp_min);
            let mut k = k0;
            while k <= k1 {
                // exact restart every 256 steps bounds recurrence drift
                let u = lo + step * k as f64 - sp;
                let mut e = (base - 2.0 * c * u * u).exp();
                let mut q = (-2.0 * c * (2.0 * u * step + step * step)).exp();
                let stop = (k + 256).min(k1 + 1);
                while k < stop {
                    sums[k] += e;
                    e *= q;
                    q *= ratio_step;
                    k += 1;
                }
            }
        }
        let shift = -c * perp_min;
        let profile: Vec<f64> = sums
            .into_iter()
            .map(|v| if v > 0.0 { shift + v.ln() } else { f64::NEG_INFINITY })
            .collect();
        let top = profile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if top + self.log_norm < LOG_DENSITY_FLOOR {
            return Err(Error::OutsideSupport { x });
        }
        Ok(profile)
    }

    /// Brute-force MAP reconstruction of observation `x`.
    pub fn map_oracle(&self, x: f64) -> Result<[f64; 2]> {
        Ok(self.line_oracles(x)?.map)
    }

    /// Posterior mean or median of the density restricted to the line of `x`.
    pub fn posterior_moment_oracle(&self, x: f64, which: Moment) -> Result<[f64; 2]> {
        let o = self.line_oracles(x)?;
        Ok(match which {
            Moment::Mean => o.mean,
            Moment::Median => o.median,
        })
    }

    /// MAP, posterior mean and posterior median for `x` from one line scan.
    ///
    /// The line `y1 ∈ [2x - 20, 20]` is scanned on a uniform grid; the MAP
    /// incumbent is then refined three times on a 10× finer local grid.
    /// Mean and median integrate the grid weights along the line offset.
    pub fn line_oracles(&self, x: f64) -> Result<LineOracles> {
        if !x.is_finite() {
            return Err(Error::OutsideSupport { x });
        }
        let lo = x - LINE_HALF_RANGE;
        let hi = LINE_HALF_RANGE - x;
        let step = (hi - lo) / (LINE_GRID_POINTS - 1) as f64;
        let profile = self.line_profile(x, lo, step, LINE_GRID_POINTS)?;
        let grid = |k: usize| lo + step * k as f64;

        let mut s_best = grid(argmax(&profile));
        let mut best_val = self.log_kernel_sum(line_point(x, s_best));
        let mut fine = step;
        for _ in 0..REFINE_ROUNDS {
            fine /= 10.0;
            let centre = s_best;
            for k in -10i32..=10 {
                let s = centre + fine * k as f64;
                let v = self.log_kernel_sum(line_point(x, s));
                if v > best_val {
                    best_val = v;
                    s_best = s;
                }
            }
        }

        let top = profile.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = profile.iter().map(|v| (v - top).exp()).collect();
        let total: f64 = weights.iter().sum();
        let mean = weights.iter().enumerate().map(|(k, w)| grid(k) * w).sum::<f64>() / total;
        let median = weighted_median(lo, step, &weights, total);
        Ok(LineOracles {
            x,
            map: line_point(x, s_best),
            mean: line_point(x, mean),
            median: line_point(x, median),
        })
    }
}

/// Oracle reconstructions of one observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineOracles {
    pub x: f64,
    pub map: [f64; 2],
    pub mean: [f64; 2],
    pub median: [f64; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Moment {
    Mean,
    Median,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Median of the offset under (unnormalised) grid weights, linearly
/// interpolated inside the crossing cell.
fn weighted_median(lo: f64, step: f64, weights: &[f64], total: f64) -> f64 {
    let half = 0.5 * total;
    let mut acc = 0.0;
    for (k, w) in weights.iter().enumerate() {
        if acc + w >= half {
            let frac = if *w > 0.0 { (half - acc) / w } else { 1.0 };
            return lo + step * (k as f64 - 1.0 + frac);
        }
        acc += w;
    }
    lo + step * (weights.len() - 1) as f64
}

/// Bayes-optimal denoiser for `N(mu, s²I)` data under `N(0, σ²I)` noise.
pub fn analytic_denoiser_gaussian(mu: &[f64], s: f64, sigma: f64, noisy: &[f64]) -> Vec<f64> {
    let s2 = s * s;
    let v2 = sigma * sigma;
    noisy
        .iter()
        .zip(mu)
        .map(|(y, m)| (s2 * y + v2 * m) / (s2 + v2))
        .collect()
}

/// Isotropic Gaussian mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub std: f64,
}

/// Bayes-optimal denoiser for an isotropic Gaussian mixture: the
/// responsibility-weighted average of the per-component posterior means.
pub fn analytic_denoiser_mixture(components: &[MixtureComponent], sigma: f64, noisy: &[f64]) -> Vec<f64> {
    let d = noisy.len() as f64;
    let log_resp: Vec<f64> = components
        .iter()
        .map(|c| {
            let var = c.std * c.std + sigma * sigma;
            let dist: f64 = noisy.iter().zip(&c.mean).map(|(y, m)| (y - m).powi(2)).sum();
            c.weight.ln() - 0.5 * d * var.ln() - 0.5 * dist / var
        })
        .collect();
    let top = log_resp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let resp: Vec<f64> = log_resp.iter().map(|l| (l - top).exp()).collect();
    let z: f64 = resp.iter().sum();
    let mut out = vec![0.0; noisy.len()];
    for (c, r) in components.iter().zip(&resp) {
        let post = analytic_denoiser_gaussian(&c.mean, c.std, sigma, noisy);
        for (o, p) in out.iter_mut().zip(post) {
            *o += r / z * p;
        }
    }
    out
}

/// `KL[N(mu0, s0²) ‖ N(mu1, s1²)]`.
pub fn analytic_kl_gaussians(mu0: f64, s0: f64, mu1: f64, s1: f64) -> f64 {
    (s1 / s0).ln() + (s0 * s0 + (mu0 - mu1).powi(2)) / (2.0 * s1 * s1) - 0.5
}
