//! The downsampling operator `A`, its numerically fitted pseudoinverse `A⁺`
//! and the affine projection `ŷ = (I - A⁺A) f + A⁺x` built from the pair.
//!
//! Two representations are supported. In conv mode `A` is a channelwise
//! strided correlation with reflect padding and `A⁺` is a bank of
//! `stride²` small kernels over the (reflect padded) LR image followed by a
//! pixel reordering, i.e. a sub-pixel up-convolution. In matrix mode both
//! operators are explicit dense matrices, which covers the 2D toy problem.
//!
//! Tensors are `[N, C, H, W]` in conv mode and `[N, d]` in matrix mode.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorMode {
    Matrix,
    Conv,
}

/// Index into `0..n` under whole-sample symmetric reflection (`-1 → 1`).
pub fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let i = i.rem_euclid(period);
    if i >= n as isize {
        (period - i) as usize
    } else {
        i as usize
    }
}

/// Unit-sum `size × size` Gaussian kernel.
pub fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut k: Vec<f64> = g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Default blur width for a Gaussian downsampler of the given stride.
pub fn default_sigma_blur(stride: usize) -> f64 {
    stride as f64 / 2.0 * 0.75
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownsampleOperator {
    mode: OperatorMode,
    /// Conv: `kh × kw` weights. Matrix: `d_lr × d_hr` row-major.
    kernel: Vec<f64>,
    kernel_shape: [usize; 2],
    stride: [usize; 2],
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    channels: usize,
    sigma_blur: Option<f64>,
}

impl DownsampleOperator {
    /// Strided correlation with an explicit kernel.
    pub fn conv(kernel: Vec<f64>, kernel_shape: [usize; 2], stride: [usize; 2], in_shape: [usize; 2], channels: usize) -> Result<Self> {
        if stride.contains(&0) || channels == 0 || kernel_shape.contains(&0) {
            return Err(Error::Config("stride, channels and kernel size must be positive".into()));
        }
        if in_shape[0] % stride[0] != 0 || in_shape[1] % stride[1] != 0 {
            return Err(Error::Config(format!(
                "input {in_shape:?} is not an exact multiple of stride {stride:?}; pre-pad the input"
            )));
        }
        if kernel.len() != kernel_shape[0] * kernel_shape[1] {
            return Err(Error::ShapeMismatch {
                context: "downsample kernel",
                expected: kernel_shape.to_vec(),
                actual: vec![kernel.len()],
            });
        }
        let op = DownsampleOperator {
            mode: OperatorMode::Conv,
            kernel,
            kernel_shape,
            stride,
            in_shape: in_shape.to_vec(),
            out_shape: vec![in_shape[0] / stride[0], in_shape[1] / stride[1]],
            channels,
            sigma_blur: None,
        };
        op.validate()?;
        Ok(op)
    }

    /// Square Gaussian blur followed by decimation.
    pub fn gaussian(size: usize, sigma: f64, stride: usize, in_shape: [usize; 2], channels: usize) -> Result<Self> {
        if !(sigma > 0.0) {
            return Err(Error::Config(format!("blur sigma must be positive, got {sigma}")));
        }
        let mut op = Self::conv(gaussian_kernel(size, sigma), [size, size], [stride, stride], in_shape, channels)?;
        op.sigma_blur = Some(sigma);
        Ok(op)
    }

    /// Explicit `rows × cols` matrix (LR × HR).
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(Error::ShapeMismatch {
                context: "downsample matrix",
                expected: vec![rows, cols],
                actual: vec![data.len()],
            });
        }
        let op = DownsampleOperator {
            mode: OperatorMode::Matrix,
            kernel: data,
            kernel_shape: [rows, cols],
            stride: [1, 1],
            in_shape: vec![cols],
            out_shape: vec![rows],
            channels: 1,
            sigma_blur: None,
        };
        op.validate()?;
        Ok(op)
    }

    /// The 2D toy observation `x = (y1 + y2) / 2`.
    pub fn toy_average() -> Self {
        Self::matrix(1, 2, vec![0.5, 0.5]).expect("valid toy operator")
    }

    fn validate(&self) -> Result<()> {
        if let Some(i) = self.kernel.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: "downsample kernel".into(),
                index: i,
            });
        }
        let row_len = match self.mode {
            OperatorMode::Conv => self.kernel.len(),
            OperatorMode::Matrix => self.kernel_shape[1],
        };
        for row in self.kernel.chunks(row_len) {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-12 {
                return Err(Error::Config(format!("downsample weights must sum to 1, got {s}")));
            }
        }
        if self.mode == OperatorMode::Conv {
            for a in 0..2 {
                if self.kernel_shape[a] / 2 >= self.in_shape[a] {
                    return Err(Error::Config(format!(
                        "kernel {:?} too large for reflect padding of {:?}",
                        self.kernel_shape, self.in_shape
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn mode(&self) -> OperatorMode {
        self.mode
    }
    pub fn kernel(&self) -> &[f64] {
        &self.kernel
    }
    pub fn kernel_shape(&self) -> [usize; 2] {
        self.kernel_shape
    }
    pub fn stride(&self) -> [usize; 2] {
        self.stride
    }
    pub fn in_shape(&self) -> &[usize] {
        &self.in_shape
    }
    pub fn out_shape(&self) -> &[usize] {
        &self.out_shape
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn sigma_blur(&self) -> Option<f64> {
        self.sigma_blur
    }

    /// Same operator on a different (stride-divisible) image size.
    pub fn with_in_shape(&self, in_shape: [usize; 2], channels: usize) -> Result<Self> {
        if self.mode == OperatorMode::Matrix {
            return Err(Error::Config("matrix operators have a fixed shape".into()));
        }
        let mut op = Self::conv(self.kernel.clone(), self.kernel_shape, self.stride, in_shape, channels)?;
        op.sigma_blur = self.sigma_blur;
        Ok(op)
    }

    pub fn hr_shape(&self, batch: usize) -> Vec<usize> {
        self.batched(batch, &self.in_shape)
    }

    pub fn lr_shape(&self, batch: usize) -> Vec<usize> {
        self.batched(batch, &self.out_shape)
    }

    fn batched(&self, batch: usize, spatial: &[usize]) -> Vec<usize> {
        let mut s = vec![batch];
        if self.mode == OperatorMode::Conv {
            s.push(self.channels);
        }
        s.extend_from_slice(spatial);
        s
    }

    /// `x = A y`.
    pub fn apply(&self, y: &Tensor) -> Result<Tensor> {
        y.expect_shape("apply_downsample", &self.hr_shape(y.batch()))?;
        let mut out = Tensor::zeros(&self.lr_shape(y.batch()));
        match self.mode {
            OperatorMode::Matrix => {
                let [rows, cols] = self.kernel_shape;
                for (yi, xo) in y.data().chunks(cols).zip(out.data_mut().chunks_mut(rows)) {
                    for (r, o) in xo.iter_mut().enumerate() {
                        *o = dot(&self.kernel[r * cols..(r + 1) * cols], yi);
                    }
                }
            }
            OperatorMode::Conv => {
                let (hh, hw) = (self.in_shape[0], self.in_shape[1]);
                let (lh, lw) = (self.out_shape[0], self.out_shape[1]);
                for (img, o) in y.data().chunks(hh * hw).zip(out.data_mut().chunks_mut(lh * lw)) {
                    self.for_each_tap(|li, hi, w| o[li] += w * img[hi]);
                }
            }
        }
        Ok(out)
    }

    /// `Aᵀ x`.
    pub fn adjoint(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_shape("downsample adjoint", &self.lr_shape(x.batch()))?;
        let mut out = Tensor::zeros(&self.hr_shape(x.batch()));
        match self.mode {
            OperatorMode::Matrix => {
                let [rows, cols] = self.kernel_shape;
                for (xi, yo) in x.data().chunks(rows).zip(out.data_mut().chunks_mut(cols)) {
                    for (r, xv) in xi.iter().enumerate() {
                        for (o, a) in yo.iter_mut().zip(&self.kernel[r * cols..(r + 1) * cols]) {
                            *o += a * xv;
                        }
                    }
                }
            }
            OperatorMode::Conv => {
                let (hh, hw) = (self.in_shape[0], self.in_shape[1]);
                let (lh, lw) = (self.out_shape[0], self.out_shape[1]);
                for (img, o) in x.data().chunks(lh * lw).zip(out.data_mut().chunks_mut(hh * hw)) {
                    self.for_each_tap(|li, hi, w| o[hi] += w * img[li]);
                }
            }
        }
        Ok(out)
    }

    /// Visits `(lr index, hr index, weight)` for one channel plane.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, f64)) {
        let [kh, kw] = self.kernel_shape;
        let [sh, sw] = self.stride;
        let (hh, hw) = (self.in_shape[0], self.in_shape[1]);
        let (lh, lw) = (self.out_shape[0], self.out_shape[1]);
        for i in 0..lh {
            let ci = (sh * i + sh / 2) as isize - (kh / 2) as isize;
            for j in 0..lw {
                let cj = (sw * j + sw / 2) as isize - (kw / 2) as isize;
                let li = i * lw + j;
                for a in 0..kh {
                    let r = reflect(ci + a as isize, hh) * hw;
                    for b in 0..kw {
                        f(li, r + reflect(cj + b as isize, hw), self.kernel[a * kw + b]);
                    }
                }
            }
        }
    }

    /// Dense `d_lr × d_hr` matrix of one channel plane.
    pub fn to_dense(&self) -> Vec<f64> {
        match self.mode {
            OperatorMode::Matrix => self.kernel.clone(),
            OperatorMode::Conv => {
                let d_hr = self.in_shape[0] * self.in_shape[1];
                let d_lr = self.out_shape[0] * self.out_shape[1];
                let mut m = vec![0.0; d_lr * d_hr];
                self.for_each_tap(|li, hi, w| m[li * d_hr + hi] += w);
                m
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Config-file description of a downsampling operator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum OperatorSpec {
    /// Explicit `rows × cols` matrix, row-major.
    Matrix { rows: usize, cols: usize, weights: Vec<f64> },
    /// Square Gaussian blur with stride; `sigma` defaults to `stride/2 · 0.75`.
    Gaussian {
        size: usize,
        #[serde(default)]
        sigma: Option<f64>,
        stride: usize,
        hr_shape: [usize; 2],
        #[serde(default = "one")]
        channels: usize,
    },
}

fn one() -> usize {
    1
}

impl OperatorSpec {
    pub fn build(&self) -> Result<DownsampleOperator> {
        match self {
            OperatorSpec::Matrix { rows, cols, weights } => DownsampleOperator::matrix(*rows, *cols, weights.clone()),
            OperatorSpec::Gaussian { size, sigma, stride, hr_shape, channels } => DownsampleOperator::gaussian(
                *size,
                sigma.unwrap_or_else(|| default_sigma_blur(*stride)),
                *stride,
                *hr_shape,
                *channels,
            ),
        }
    }
}

/// Settings for the stochastic pseudoinverse fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Side length of each sub-pixel kernel of `A⁺` (conv mode).
    pub kernel_size: usize,
    /// LR image size the fit runs on (conv mode).
    pub fit_lr_shape: [usize; 2],
    /// Monte Carlo samples drawn per SGD step for each of the two losses.
    pub samples_per_step: usize,
    pub iterations: usize,
    /// Initial step size.
    pub step_size: f64,
    /// Step size at the last iteration; the schedule is geometric.
    pub final_step_size: f64,
    pub optimizer: FitOptimizer,
    /// Starting point of the stochastic descent.
    pub init: FitInit,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitInit {
    Zero,
    ScaledAdjoint,
    /// Minimum-norm solution of `AB = I` on the fit plane.
    LeastSquares,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FitOptimizer {
    Sgd,
    Adam,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            kernel_size: 5,
            fit_lr_shape: [8, 8],
            samples_per_step: 1,
            iterations: 200_000,
            step_size: 1e-4,
            final_step_size: 1e-4,
            optimizer: FitOptimizer::Sgd,
            init: FitInit::LeastSquares,
            seed: 0,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_step == 0 || self.kernel_size == 0 {
            return Err(Error::Config("fit needs at least one sample per step and a kernel".into()));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite())
            || !(self.final_step_size > 0.0 && self.final_step_size <= self.step_size)
        {
            return Err(Error::Config(format!(
                "fit step sizes must satisfy 0 < final ≤ initial, got {} → {}",
                self.step_size, self.final_step_size
            )));
        }
        Ok(())
    }
}

/// The up-sampling operator `A⁺` (or any candidate `B`).
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoInverseOperator {
    mode: OperatorMode,
    /// Conv: `[stride_h·stride_w, k, k]`, phase-major. Matrix: `d_hr × d_lr`.
    weights: Vec<f64>,
    kernel_size: usize,
    stride: [usize; 2],
    lr_shape: Vec<usize>,
    hr_shape: Vec<usize>,
    channels: usize,
    pub fit_loss: Option<f64>,
    pub fit_config: Option<FitConfig>,
}

impl PseudoInverseOperator {
    /// Zero operator shaped to invert `down` with `k × k` sub-pixel kernels.
    pub fn zeros_for(down: &DownsampleOperator, kernel_size: usize) -> Self {
        let weights = match down.mode {
            OperatorMode::Matrix => vec![0.0; down.kernel.len()],
            OperatorMode::Conv => vec![0.0; down.stride[0] * down.stride[1] * kernel_size * kernel_size],
        };
        PseudoInverseOperator {
            mode: down.mode,
            weights,
            kernel_size,
            stride: down.stride,
            lr_shape: down.out_shape.clone(),
            hr_shape: down.in_shape.clone(),
            channels: down.channels,
            fit_loss: None,
            fit_config: None,
        }
    }

    /// Uniform random weights in `[-scale, scale]`.
    pub fn random_for(down: &DownsampleOperator, kernel_size: usize, scale: f64, seed: u64) -> Self {
        use rand::Rng as _;
        let mut op = Self::zeros_for(down, kernel_size);
        let mut rng = rng::seeded(seed);
        op.weights.iter_mut().for_each(|w| *w = rng.gen_range(-scale..=scale));
        op
    }

    pub fn from_weights(down: &DownsampleOperator, kernel_size: usize, weights: Vec<f64>) -> Result<Self> {
        let mut op = Self::zeros_for(down, kernel_size);
        if weights.len() != op.weights.len() {
            return Err(Error::ShapeMismatch {
                context: "pseudoinverse weights",
                expected: vec![op.weights.len()],
                actual: vec![weights.len()],
            });
        }
        op.weights = weights;
        Ok(op)
    }

    /// Same kernels on another image size.
    pub fn resized_for(&self, down: &DownsampleOperator) -> Result<Self> {
        if down.mode != self.mode || down.stride != self.stride {
            return Err(Error::Config("pseudoinverse does not match the downsampling geometry".into()));
        }
        let mut op = Self::from_weights(down, self.kernel_size, self.weights.clone())?;
        if self.mode == OperatorMode::Conv {
            for a in 0..2 {
                if self.kernel_size / 2 >= down.out_shape[a] {
                    return Err(Error::Config("LR image too small for the A⁺ kernels".into()));
                }
            }
        } else if down.kernel_shape != [self.lr_shape[0], self.hr_shape[0]] {
            return Err(Error::Config("matrix pseudoinverse shape mismatch".into()));
        }
        op.fit_loss = self.fit_loss;
        op.fit_config = self.fit_config.clone();
        Ok(op)
    }

    pub fn mode(&self) -> OperatorMode {
        self.mode
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }
    pub fn kernel_size(&self) -> usize {
        self.kernel_size
    }
    pub fn stride(&self) -> [usize; 2] {
        self.stride
    }

    fn shape_of(&self, batch: usize, spatial: &[usize]) -> Vec<usize> {
        let mut s = vec![batch];
        if self.mode == OperatorMode::Conv {
            s.push(self.channels);
        }
        s.extend_from_slice(spatial);
        s
    }

    /// Visits `(hr index, lr index, weight index)` for one channel plane.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let k = self.kernel_size;
        let [sh, sw] = self.stride;
        let (lh, lw) = (self.lr_shape[0], self.lr_shape[1]);
        let hw = self.hr_shape[1];
        let half = (k / 2) as isize;
        for i in 0..lh {
            for j in 0..lw {
                for a in 0..k {
                    let r = reflect(i as isize + a as isize - half, lh) * lw;
                    for b in 0..k {
                        let li = r + reflect(j as isize + b as isize - half, lw);
                        for pi in 0..sh {
                            for pj in 0..sw {
                                let hi = (sh * i + pi) * hw + sw * j + pj;
                                let wi = ((pi * sw + pj) * k + a) * k + b;
                                f(hi, li, wi);
                            }
                        }
                    }
                }
            }
        }
    }

    /// `A⁺ x`.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        x.expect_shape("pseudoinverse apply", &self.shape_of(x.batch(), &self.lr_shape))?;
        let mut out = Tensor::zeros(&self.shape_of(x.batch(), &self.hr_shape));
        let (dl, dh) = (self.plane(&self.lr_shape), self.plane(&self.hr_shape));
        for (xi, yo) in x.data().chunks(dl).zip(out.data_mut().chunks_mut(dh)) {
            match self.mode {
                OperatorMode::Matrix => {
                    for (r, o) in yo.iter_mut().enumerate() {
                        *o = dot(&self.weights[r * dl..(r + 1) * dl], xi);
                    }
                }
                OperatorMode::Conv => self.for_each_tap(|hi, li, wi| yo[hi] += self.weights[wi] * xi[li]),
            }
        }
        Ok(out)
    }

    /// `(A⁺)ᵀ y`.
    pub fn adjoint(&self, y: &Tensor) -> Result<Tensor> {
        y.expect_shape("pseudoinverse adjoint", &self.shape_of(y.batch(), &self.hr_shape))?;
        let mut out = Tensor::zeros(&self.shape_of(y.batch(), &self.lr_shape));
        let (dl, dh) = (self.plane(&self.lr_shape), self.plane(&self.hr_shape));
        for (yi, xo) in y.data().chunks(dh).zip(out.data_mut().chunks_mut(dl)) {
            match self.mode {
                OperatorMode::Matrix => {
                    for (r, yv) in yi.iter().enumerate() {
                        for (o, w) in xo.iter_mut().zip(&self.weights[r * dl..(r + 1) * dl]) {
                            *o += w * yv;
                        }
                    }
                }
                OperatorMode::Conv => self.for_each_tap(|hi, li, wi| xo[li] += self.weights[wi] * yi[hi]),
            }
        }
        Ok(out)
    }

    /// Gradient of `⟨upstream, A⁺ input⟩` with respect to the weights.
    pub fn weight_grad(&self, input: &Tensor, upstream: &Tensor) -> Result<Vec<f64>> {
        input.expect_shape("pseudoinverse weight grad", &self.shape_of(input.batch(), &self.lr_shape))?;
        upstream.expect_shape("pseudoinverse weight grad", &self.shape_of(input.batch(), &self.hr_shape))?;
        let mut g = vec![0.0; self.weights.len()];
        let (dl, dh) = (self.plane(&self.lr_shape), self.plane(&self.hr_shape));
        for (xi, ui) in input.data().chunks(dl).zip(upstream.data().chunks(dh)) {
            match self.mode {
                OperatorMode::Matrix => {
                    for (r, u) in ui.iter().enumerate() {
                        for (gv, xv) in g[r * dl..(r + 1) * dl].iter_mut().zip(xi) {
                            *gv += u * xv;
                        }
                    }
                }
                OperatorMode::Conv => self.for_each_tap(|hi, li, wi| g[wi] += ui[hi] * xi[li]),
            }
        }
        Ok(g)
    }

    fn plane(&self, spatial: &[usize]) -> usize {
        spatial.iter().product()
    }

    /// Dense `d_hr × d_lr` matrix of one channel plane.
    pub fn to_dense(&self) -> Vec<f64> {
        match self.mode {
            OperatorMode::Matrix => self.weights.clone(),
            OperatorMode::Conv => {
                let (dl, dh) = (self.plane(&self.lr_shape), self.plane(&self.hr_shape));
                let mut m = vec![0.0; dh * dl];
                self.for_each_tap(|hi, li, wi| m[hi * dl + li] += self.weights[wi]);
                m
            }
        }
    }
}

/// Exact `‖A - ABA‖²_F + ‖B - BAB‖²_F` on one channel plane: the expected
/// value of the two Monte Carlo losses minimised by [`fit_pseudoinverse`].
pub fn pseudoinverse_loss(down: &DownsampleOperator, up: &PseudoInverseOperator) -> Result<(f64, f64)> {
    let plane = single_channel(down)?;
    let up = up.resized_for(&plane)?;
    let d_hr: usize = plane.in_shape.iter().product();
    let d_lr: usize = plane.out_shape.iter().product();
    let mut l1 = 0.0;
    for j in 0..d_hr {
        let mut e = Tensor::zeros(&plane.hr_shape(1));
        e.data_mut()[j] = 1.0;
        let u = plane.apply(&e)?;
        let w = plane.apply(&up.apply(&u)?)?;
        l1 += u.sub(&w)?.sum_sq();
    }
    let mut l2 = 0.0;
    for j in 0..d_lr {
        let mut e = Tensor::zeros(&plane.lr_shape(1));
        e.data_mut()[j] = 1.0;
        let p = up.apply(&e)?;
        let t = up.apply(&plane.apply(&p)?)?;
        l2 += p.sub(&t)?.sum_sq();
    }
    Ok((l1, l2))
}

fn single_channel(down: &DownsampleOperator) -> Result<DownsampleOperator> {
    match down.mode {
        OperatorMode::Matrix => Ok(down.clone()),
        OperatorMode::Conv => down.with_in_shape([down.in_shape[0], down.in_shape[1]], 1),
    }
}

/// Fits `A⁺` by plain SGD on
/// `ℓ1(B) = E_y ‖Ay - ABAy‖²` (y standard normal in HR space) plus
/// `ℓ2(B) = E_x ‖Bx - BABx‖²` (x standard normal in LR space),
/// starting from `cfg.init`.
///
/// The returned operator is shaped for `down` and records the exact value
/// of `ℓ1 + ℓ2` on the fit geometry.
pub fn fit_pseudoinverse(down: &DownsampleOperator, cfg: &FitConfig) -> Result<PseudoInverseOperator> {
    cfg.validate()?;
    let plane = match down.mode {
        OperatorMode::Matrix => down.clone(),
        OperatorMode::Conv => down.with_in_shape(
            [cfg.fit_lr_shape[0] * down.stride[0], cfg.fit_lr_shape[1] * down.stride[1]],
            1,
        )?,
    };
    if plane.mode == OperatorMode::Conv {
        for a in 0..2 {
            if cfg.kernel_size / 2 >= plane.out_shape[a] {
                return Err(Error::Config("fit LR shape too small for the kernel size".into()));
            }
        }
    }
    let mut b = match cfg.init {
        FitInit::Zero => PseudoInverseOperator::zeros_for(&plane, cfg.kernel_size),
        FitInit::ScaledAdjoint => scaled_adjoint(&plane, cfg.kernel_size)?,
        FitInit::LeastSquares => least_squares_right_inverse(&plane, cfg.kernel_size)?,
    };
    let mut rng = rng::seeded(cfg.seed);
    let n = cfg.samples_per_step;
    let hr_shape = plane.hr_shape(n);
    let lr_shape = plane.lr_shape(n);
    let decay = (cfg.final_step_size / cfg.step_size).powf(1.0 / (cfg.iterations.max(2) - 1) as f64);
    let mut step = cfg.step_size;
    let mut m = vec![0.0; b.weights.len()];
    let mut v = vec![0.0; b.weights.len()];
    let (beta1, beta2) = (0.9f64, 0.999f64);
    for it in 0..cfg.iterations {
        let y = Tensor::from_vec(&hr_shape, rng::normal_vec(&mut rng, hr_shape.iter().product()))?;
        let x = Tensor::from_vec(&lr_shape, rng::normal_vec(&mut rng, lr_shape.iter().product()))?;

        let (loss, grad) = sample_loss_grad(&plane, &b, &y, &x)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Diverged(format!("pseudoinverse fit: non-finite loss at iteration {it}")));
        }
        match cfg.optimizer {
            FitOptimizer::Sgd => {
                for (w, g) in b.weights.iter_mut().zip(&grad) {
                    *w -= step * g / n as f64;
                }
            }
            FitOptimizer::Adam => {
                let t = (it + 1) as i32;
                let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
                for ((w, g), (mi, vi)) in b.weights.iter_mut().zip(&grad).zip(m.iter_mut().zip(v.iter_mut())) {
                    let g = g / n as f64;
                    *mi = beta1 * *mi + (1.0 - beta1) * g;
                    *vi = beta2 * *vi + (1.0 - beta2) * g * g;
                    *w -= step * (*mi / c1) / ((*vi / c2).sqrt() + 1e-30);
                }
            }
        }
        step *= decay;
    }
    let (l1, l2) = pseudoinverse_loss(&plane, &b)?;
    let mut fitted = b.resized_for(down)?;
    fitted.fit_loss = Some(l1 + l2);
    fitted.fit_config = Some(cfg.clone());
    Ok(fitted)
}

/// `c·Aᵀ` in the sub-pixel parametrisation, with `c = tr(G²)/tr(G³)`,
/// `G = AAᵀ`, the minimiser of `‖A - cAAᵀA‖²_F`.
///
/// Starting the fit from zero does not work for blurring operators: near
/// `B = 0` the second loss acts as a strong norm penalty and traps the
/// descent in a minimum with `AB ≈ 0`.
pub fn scaled_adjoint(a: &DownsampleOperator, kernel_size: usize) -> Result<PseudoInverseOperator> {
    let mut b = PseudoInverseOperator::zeros_for(a, kernel_size);
    let d_lr: usize = a.out_shape.iter().product();
    let d_hr: usize = a.in_shape.iter().product();
    match a.mode {
        OperatorMode::Matrix => {
            let [rows, cols] = a.kernel_shape;
            for h in 0..cols {
                for l in 0..rows {
                    b.weights[h * rows + l] = a.kernel[l * cols + h];
                }
            }
        }
        OperatorMode::Conv => {
            // Aᵀ restricted to one LR pixel far from the border gives the
            // sub-pixel kernels directly.
            let k = kernel_size as isize;
            let (lh, lw) = (a.out_shape[0], a.out_shape[1]);
            let (ci, cj) = (lh / 2, lw / 2);
            let mut e = Tensor::zeros(&a.lr_shape(1));
            e.data_mut()[ci * lw + cj] = 1.0;
            let col = a.adjoint(&e)?;
            let [sh, sw] = a.stride;
            let hw = a.in_shape[1];
            for pi in 0..sh {
                for pj in 0..sw {
                    for ai in 0..k {
                        for bj in 0..k {
                            // HR pixel in block (i, j) reading LR (ci, cj) at tap (ai, bj).
                            let i = ci as isize - (ai - k / 2);
                            let j = cj as isize - (bj - k / 2);
                            if i < 0 || j < 0 || i as usize >= lh || j as usize >= lw {
                                continue;
                            }
                            let hi = (sh * i as usize + pi) * hw + sw * j as usize + pj;
                            let wi = ((pi * sw + pj) * kernel_size + ai as usize) * kernel_size + bj as usize;
                            b.weights[wi] = col.data()[hi];
                        }
                    }
                }
            }
            let _ = d_hr;
        }
    }
    // Traces of powers of G = A Aᵀ over the LR basis.
    let (mut t2, mut t3) = (0.0, 0.0);
    for j in 0..d_lr {
        let mut e = Tensor::zeros(&a.lr_shape(1));
        e.data_mut()[j] = 1.0;
        let g1 = a.apply(&a.adjoint(&e)?)?;
        let g2 = a.apply(&a.adjoint(&g1)?)?;
        t2 += g1.dot(&g1);
        t3 += g1.dot(&g2);
    }
    if !(t3 > 0.0) {
        return Err(Error::Singular("AAᵀ vanishes".into()));
    }
    let c = t2 / t3;
    b.weights.iter_mut().for_each(|w| *w *= c);
    Ok(b)
}

/// Minimum-norm `B` with `AB = I` on `a`'s geometry, by iterated Tikhonov
/// on the normal equations.
///
/// Any right inverse has `ℓ1 = ℓ2 = 0`. The map from weights to `AB` is
/// rank deficient and badly conditioned, which stalls first-order descent
/// long before the losses reach 1e-8.
pub fn least_squares_right_inverse(a: &DownsampleOperator, kernel_size: usize) -> Result<PseudoInverseOperator> {
    let zero = PseudoInverseOperator::zeros_for(a, kernel_size);
    let nw = zero.weights.len();
    let d = a.out_shape.iter().product::<usize>();
    // Column w holds vec(A·B_w) for the unit weight w.
    let mut cols = vec![0.0; nw * d * d];
    let mut basis = Vec::with_capacity(d);
    for j in 0..d {
        let mut e = Tensor::zeros(&a.lr_shape(1));
        e.data_mut()[j] = 1.0;
        basis.push(e);
    }
    let mut unit = zero.clone();
    for w in 0..nw {
        unit.weights[w] = 1.0;
        let col = &mut cols[w * d * d..(w + 1) * d * d];
        for (j, e) in basis.iter().enumerate() {
            let r = a.apply(&unit.apply(e)?)?;
            for (i, v) in r.data().iter().enumerate() {
                col[i * d + j] = *v;
            }
        }
        unit.weights[w] = 0.0;
    }
    let col = |w: usize| &cols[w * d * d..(w + 1) * d * d];
    let mut gram = vec![0.0; nw * nw];
    for p in 0..nw {
        for q in 0..=p {
            let v = dot(col(p), col(q));
            gram[p * nw + q] = v;
            gram[q * nw + p] = v;
        }
    }
    let scale = (0..nw).map(|p| gram[p * nw + p]).fold(0.0, f64::max);
    if !(scale > 0.0) {
        return Err(Error::Singular("A·B vanishes for every weight".into()));
    }
    let lambda = 1e-9 * scale;
    for p in 0..nw {
        gram[p * nw + p] += lambda;
    }
    let chol = cholesky(&gram, nw)?;

    let mut weights = vec![0.0; nw];
    for _ in 0..200 {
        // Residual I - AB projected onto the weights.
        let mut res = vec![0.0; d * d];
        for i in 0..d {
            res[i * d + i] = 1.0;
        }
        for (w, &x) in weights.iter().enumerate() {
            if x != 0.0 {
                for (r, c) in res.iter_mut().zip(col(w)) {
                    *r -= x * c;
                }
            }
        }
        let rhs: Vec<f64> = (0..nw).map(|w| dot(col(w), &res)).collect();
        let step = cholesky_solve(&chol, nw, &rhs);
        for (x, dx) in weights.iter_mut().zip(&step) {
            *x += dx;
        }
        if dot(&step, &step) <= 1e-30 * dot(&weights, &weights) {
            break;
        }
    }
    let mut b = zero;
    b.weights = weights;
    Ok(b)
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
fn cholesky(m: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s = m[i * n + j] - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            if i == j {
                if !(s > 0.0) {
                    return Err(Error::Singular(format!("Cholesky pivot {i} is {s:e}")));
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(l)
}

fn cholesky_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for i in 0..n {
        y[i] = (y[i] - dot(&l[i * n..i * n + i], &y[..i])) / l[i * n + i];
    }
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * y[k]).sum();
        y[i] = (y[i] - s) / l[i * n + i];
    }
    y
}

/// Monte Carlo `ℓ1 + ℓ2` on the sample batches `y` (HR) and `x` (LR) and
/// its gradient with respect to the weights of `b`.
pub fn sample_loss_grad(a: &DownsampleOperator, b: &PseudoInverseOperator, y: &Tensor, x: &Tensor) -> Result<(f64, Vec<f64>)> {
    // ℓ1: r = u - A B u with u = A y.
    let u = a.apply(y)?;
    let r = u.sub(&a.apply(&b.apply(&u)?)?)?;
    let mut grad = b.weight_grad(&u, &a.adjoint(&r)?.scale(-2.0))?;

    // ℓ2: r2 = p - B q with p = B x, q = A p.
    let p = b.apply(x)?;
    let q = a.apply(&p)?;
    let r2 = p.sub(&b.apply(&q)?)?;
    let back = a.adjoint(&b.adjoint(&r2)?)?;
    let g_p = r2.sub(&back)?.scale(2.0);
    for (g, v) in grad.iter_mut().zip(b.weight_grad(x, &g_p)?) {
        *g += v;
    }
    for (g, v) in grad.iter_mut().zip(b.weight_grad(&q, &r2.scale(-2.0))?) {
        *g += v;
    }
    Ok((r.sum_sq() + r2.sum_sq(), grad))
}

/// `Aᵀ(AAᵀ)⁻¹` for a matrix-mode operator.
pub fn closed_form_pseudoinverse(down: &DownsampleOperator) -> Result<PseudoInverseOperator> {
    if down.mode != OperatorMode::Matrix {
        return Err(Error::Config("closed-form pseudoinverse needs a matrix operator".into()));
    }
    let [rows, cols] = down.kernel_shape;
    let a = &down.kernel;
    let mut gram = vec![0.0; rows * rows];
    for i in 0..rows {
        for j in 0..rows {
            gram[i * rows + j] = dot(&a[i * cols..(i + 1) * cols], &a[j * cols..(j + 1) * cols]);
        }
    }
    let inv = invert(&gram, rows)?;
    let mut b = vec![0.0; cols * rows];
    for h in 0..cols {
        for l in 0..rows {
            b[h * rows + l] = (0..rows).map(|k| a[k * cols + h] * inv[k * rows + l]).sum();
        }
    }
    PseudoInverseOperator::from_weights(down, 0, b)
}

/// Gauss-Jordan inverse with partial pivoting.
fn invert(m: &[f64], n: usize) -> Result<Vec<f64>> {
    let mut a = m.to_vec();
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        inv[i * n + i] = 1.0;
    }
    let scale = m.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&r, &s| a[r * n + col].abs().total_cmp(&a[s * n + col].abs()))
            .unwrap_or(col);
        if a[piv * n + col].abs() <= 1e-14 * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::Singular("AAᵀ has no inverse".into()));
        }
        for k in 0..n {
            a.swap(col * n + k, piv * n + k);
            inv.swap(col * n + k, piv * n + k);
        }
        let d = a[col * n + col];
        for k in 0..n {
            a[col * n + k] /= d;
            inv[col * n + k] /= d;
        }
        for r in 0..n {
            if r != col {
                let f = a[r * n + col];
                if f != 0.0 {
                    for k in 0..n {
                        a[r * n + k] -= f * a[col * n + k];
                        inv[r * n + k] -= f * inv[col * n + k];
                    }
                }
            }
        }
    }
    Ok(inv)
}

/// Paired `(A, A⁺)` realising the projection onto `{y : Ay = x}`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineProjector {
    pub down: DownsampleOperator,
    pub up: PseudoInverseOperator,
    pub tolerance: f64,
}

impl AffineProjector {
    pub fn new(down: DownsampleOperator, up: PseudoInverseOperator) -> Result<Self> {
        let up = up.resized_for(&down)?;
        let tolerance = match down.mode {
            OperatorMode::Matrix => 1e-10,
            OperatorMode::Conv => 1e-6,
        };
        Ok(AffineProjector { down, up, tolerance })
    }

    pub fn with_tolerance(mut self, tolerance: f64) -> Self {
        self.tolerance = tolerance;
        self
    }

    /// `f + A⁺(x - A f)` without the consistency post-check.
    pub fn project_unchecked(&self, f_out: &Tensor, x: &Tensor) -> Result<Tensor> {
        f_out.check_finite("projection input")?;
        x.check_finite("projection observation")?;
        let resid = x.sub(&self.down.apply(f_out)?)?;
        f_out.add(&self.up.apply(&resid)?)
    }

    /// `ŷ = (I - A⁺A) f + A⁺x`, verified to satisfy `‖Aŷ - x‖∞ ≤ tolerance`.
    pub fn project(&self, f_out: &Tensor, x: &Tensor) -> Result<Tensor> {
        let y = self.project_unchecked(f_out, x)?;
        let residual = self.consistency_residual(&y, x)?;
        if !(residual <= self.tolerance) {
            return Err(Error::Inconsistent {
                residual,
                tolerance: self.tolerance,
            });
        }
        Ok(y)
    }

    /// `‖A y - x‖∞`.
    pub fn consistency_residual(&self, y: &Tensor, x: &Tensor) -> Result<f64> {
        Ok(self.down.apply(y)?.sub(x)?.max_abs())
    }

    /// Backward pass of [`project`](Self::project) with respect to `f`:
    /// `(I - A⁺A)ᵀ g = g - Aᵀ (A⁺)ᵀ g`.
    pub fn project_gradient(&self, upstream: &Tensor) -> Result<Tensor> {
        upstream.check_finite("projection upstream")?;
        upstream.sub(&self.down.adjoint(&self.up.adjoint(upstream)?)?)
    }

    /// Gradient of the projection with respect to the weights of `A⁺`,
    /// for a trainable up-sampler.
    pub fn up_weight_gradient(&self, f_out: &Tensor, x: &Tensor, upstream: &Tensor) -> Result<Vec<f64>> {
        let resid = x.sub(&self.down.apply(f_out)?)?;
        self.up.weight_grad(&resid, upstream)
    }
}
