//! Training criteria: pixel losses, affine/soft GAN updates with instance
//! noise, denoiser-guided updates and the stochastic generator.

use serde::{Deserialize, Serialize};

use crate::linops::{AffineProjector, DownsampleOperator};
use crate::nn::{self, Algorithm, Grads, Mode, NetSpec, NetState, OptimConfig, Tape};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Clamp applied to discriminator outputs before taking logs.
pub const D_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelLoss {
    Mse,
    Mae,
}

/// Mean over batch and pixels, with its exact gradient.
pub fn pixel_loss(pred: &Tensor, target: &Tensor, kind: PixelLoss) -> Result<(f64, Tensor)> {
    let diff = pred.sub(target)?;
    let n = diff.len().max(1) as f64;
    Ok(match kind {
        PixelLoss::Mse => (diff.sum_sq() / n, diff.scale(2.0 / n)),
        PixelLoss::Mae => (
            diff.data().iter().map(|d| d.abs()).sum::<f64>() / n,
            diff.map(|d| d.signum() / n),
        ),
    })
}

/// How generator outputs are tied to the observation.
#[derive(Debug, Clone, PartialEq)]
pub enum Constraint {
    None,
    /// `ŷ = Π f(x)`. A trainable `A⁺` receives gradients too; `checked`
    /// runs the projector's consistency post-check on every pass.
    Affine { proj: AffineProjector, trainable: bool, checked: bool },
    /// Raw `ŷ = f(x)` plus `λ·MAE(x, Aŷ)` in the generator loss.
    Soft { down: DownsampleOperator, lambda: f64 },
}

/// A generator network together with its output constraint.
#[derive(Debug, Clone)]
pub struct Generator {
    pub net: NetState,
    pub constraint: Constraint,
    /// Standard normal values appended to each input sample.
    pub noise_len: usize,
    up_moments: (Vec<f64>, Vec<f64>),
    up_steps: u64,
}

/// One recorded generator pass.
pub struct GenPass {
    tape: Tape,
    x: Tensor,
    pub f: Tensor,
    pub y: Tensor,
}

#[derive(Debug, Clone)]
pub struct GenGrads {
    pub net: Grads,
    pub up: Option<Vec<f64>>,
}

impl Generator {
    pub fn new(net: NetState, constraint: Constraint) -> Generator {
        let n_up = match &constraint {
            Constraint::Affine { proj, .. } => proj.up.weights().len(),
            _ => 0,
        };
        Generator { net, constraint, noise_len: 0, up_moments: (vec![0.0; n_up], vec![0.0; n_up]), up_steps: 0 }
    }

    pub fn with_noise(mut self, noise_len: usize) -> Generator {
        self.noise_len = noise_len;
        self
    }

    fn net_input(&self, x: &Tensor, rng: Option<&mut Rng>) -> Result<Tensor> {
        if self.noise_len == 0 {
            return Ok(x.clone());
        }
        let rng = rng.ok_or_else(|| Error::Config("stochastic generator needs a noise source".into()))?;
        let n = x.batch();
        let len = x.sample_len();
        let mut data = Vec::with_capacity(n * (len + self.noise_len));
        for s in 0..n {
            data.extend_from_slice(x.sample(s));
            data.extend(rng::normal_vec(rng, self.noise_len));
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.net.spec.input_shape);
        Tensor::from_vec(&shape, data)
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode, rng: Option<&mut Rng>) -> Result<GenPass> {
        let input = self.net_input(x, rng)?;
        let tape = nn::forward(&mut self.net, &input, mode)?;
        let f = tape.output().clone();
        let y = match &self.constraint {
            Constraint::Affine { proj, checked: true, .. } => proj.project(&f, x)?,
            Constraint::Affine { proj, .. } => proj.project_unchecked(&f, x)?,
            _ => f.clone(),
        };
        Ok(GenPass { tape, x: x.clone(), f, y })
    }

    /// Eval-mode outputs.
    pub fn predict(&mut self, x: &Tensor, rng: Option<&mut Rng>) -> Result<Tensor> {
        Ok(self.forward(x, Mode::Eval, rng)?.y)
    }

    /// `λ·MAE(x, Aŷ)` for soft constraints, zero otherwise.
    pub fn soft_penalty(&self, pass: &GenPass) -> Result<f64> {
        match &self.constraint {
            Constraint::Soft { down, lambda } => {
                let r = down.apply(&pass.y)?.sub(&pass.x)?;
                Ok(lambda * r.data().iter().map(|v| v.abs()).sum::<f64>() / r.len() as f64)
            }
            _ => Ok(0.0),
        }
    }

    /// Gradients of `⟨upstream, ŷ⟩` plus the soft penalty.
    pub fn backward(&self, pass: &GenPass, upstream: &Tensor) -> Result<GenGrads> {
        let mut up = None;
        let g_f = match &self.constraint {
            Constraint::None => upstream.clone(),
            Constraint::Affine { proj, trainable, .. } => {
                if *trainable {
                    up = Some(proj.up_weight_gradient(&pass.f, &pass.x, upstream)?);
                }
                proj.project_gradient(upstream)?
            }
            Constraint::Soft { down, lambda } => {
                let r = down.apply(&pass.y)?.sub(&pass.x)?;
                let scale = lambda / r.len() as f64;
                upstream.add(&down.adjoint(&r.map(|v| scale * v.signum()))?)?
            }
        };
        let (net, _) = nn::backward(&self.net, &pass.tape, &g_f)?;
        Ok(GenGrads { net, up })
    }

    pub fn step(&mut self, grads: &GenGrads, cfg: &OptimConfig) -> Result<()> {
        if let (Some(g), Constraint::Affine { proj, trainable: true, .. }) = (&grads.up, &mut self.constraint) {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite { context: "up-sampler gradient".into(), index: i });
            }
            nn::optimizer_step(&mut self.net, &grads.net, cfg)?;
            self.up_steps += 1;
            let t = self.up_steps as i32;
            let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
            let lr = cfg.lr_at(self.up_steps);
            let (m, v) = &mut self.up_moments;
            for (i, w) in proj.up.weights_mut().iter_mut().enumerate() {
                match cfg.algorithm {
                    Algorithm::Sgd => *w -= lr * g[i],
                    Algorithm::Adam => {
                        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                        *w -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
                    }
                }
            }
            return Ok(());
        }
        nn::optimizer_step(&mut self.net, &grads.net, cfg)
    }
}

/// One supervised step; returns the pixel loss before the update.
pub fn pixel_step(
    gen: &mut Generator,
    x: &Tensor,
    target: &Tensor,
    kind: PixelLoss,
    cfg: &OptimConfig,
    rng: Option<&mut Rng>,
) -> Result<f64> {
    let pass = gen.forward(x, Mode::Train, rng)?;
    let (loss, g) = pixel_loss(&pass.y, target, kind)?;
    let grads = gen.backward(&pass, &g)?;
    gen.step(&grads, cfg)?;
    Ok(loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GanLosses {
    pub d_loss: f64,
    pub g_loss: f64,
    /// Whether more than half of a discriminator batch hit the clamp.
    pub saturated: bool,
}

fn clamp_d(d: f64) -> (f64, bool) {
    if d < D_EPS {
        (D_EPS, true)
    } else if d > 1.0 - D_EPS {
        (1.0 - D_EPS, true)
    } else {
        (d, false)
    }
}

/// `−E log D(y) − E log(1 − D(ŷ))` on discriminator outputs.
pub fn d_loss(d_real: &[f64], d_fake: &[f64]) -> f64 {
    let real: f64 = d_real.iter().map(|&d| -clamp_d(d).0.ln()).sum::<f64>() / d_real.len() as f64;
    let fake: f64 = d_fake.iter().map(|&d| -(1.0 - clamp_d(d).0).ln()).sum::<f64>() / d_fake.len() as f64;
    real + fake
}

/// `−E log[D(ŷ) / (1 − D(ŷ))]`.
pub fn g_loss(d_fake: &[f64]) -> f64 {
    d_fake
        .iter()
        .map(|&d| {
            let d = clamp_d(d).0;
            -(d / (1.0 - d)).ln()
        })
        .sum::<f64>()
        / d_fake.len() as f64
}

fn add_noise(y: &Tensor, sigma: f64, rng: &mut Rng) -> Tensor {
    if sigma == 0.0 {
        return y.clone();
    }
    let mut out = y.clone();
    for v in out.data_mut() {
        *v += sigma * rng::normal(rng);
    }
    out
}

fn sigmoid_head(disc: &NetState) -> bool {
    matches!(disc.spec.layers.last(), Some(nn::LayerSpec::Sigmoid))
}

/// Backpropagates a per-sample loss through the discriminator. With a
/// sigmoid head the derivative is taken from the logit `z`, where
/// `dz_grad(D)` is the exact derivative with respect to `z`; otherwise
/// `d_grad` is applied to the output and clamped entries get none.
fn disc_backward(
    disc: &NetState,
    tape: &Tape,
    dz_grad: impl Fn(f64) -> f64,
    d_grad: impl Fn(f64) -> f64,
) -> Result<(Grads, Tensor, usize)> {
    let d = tape.output().data();
    let clamped = d.iter().filter(|&&v| clamp_d(v).1).count();
    if sigmoid_head(disc) {
        let last = disc.spec.layers.len() - 1;
        let z = tape.activation(last);
        let up = Tensor::from_vec(z.shape(), d.iter().map(|&v| dz_grad(v)).collect())?;
        let (g, gx) = nn::backward_from(disc, tape, last, &up)?;
        return Ok((g, gx, clamped));
    }
    let up: Vec<f64> = d.iter().map(|&v| if clamp_d(v).1 { 0.0 } else { d_grad(v) }).collect();
    let (g, gx) = nn::backward(disc, tape, &Tensor::from_vec(tape.output().shape(), up)?)?;
    Ok((g, gx, clamped))
}

/// One discriminator update on instance-noised batches; returns the loss
/// before the update and whether the clamp saturated.
pub fn discriminator_step(
    disc: &mut NetState,
    real: &Tensor,
    fake: &Tensor,
    sigma: f64,
    cfg: &OptimConfig,
    rng: &mut Rng,
) -> Result<(f64, bool)> {
    let real = add_noise(real, sigma, rng);
    let fake = add_noise(fake, sigma, rng);
    let tr = nn::forward(disc, &real, Mode::Train)?;
    let tf = nn::forward(disc, &fake, Mode::Train)?;
    let loss = d_loss(tr.output().data(), tf.output().data());
    let (nr, nf) = (tr.output().len() as f64, tf.output().len() as f64);
    let (mut grads, _, cr) = disc_backward(disc, &tr, |d| -(1.0 - d) / nr, |d| -1.0 / (nr * d))?;
    let (gfake, _, cf) = disc_backward(disc, &tf, |d| d / nf, |d| 1.0 / (nf * (1.0 - d)))?;
    grads.add_assign(&gfake);
    nn::optimizer_step(disc, &grads, cfg)?;
    Ok((loss, 2 * (cr + cf) > (nr + nf) as usize))
}

/// `g_loss` and its gradient with respect to `ŷ`, discriminator frozen.
/// With a sigmoid head `log[D/(1 − D)]` is the logit itself, so the
/// gradient does not vanish where `D` saturates.
pub fn generator_signal(disc: &mut NetState, y: &Tensor, sigma: f64, rng: &mut Rng) -> Result<(f64, Tensor)> {
    let noisy = add_noise(y, sigma, rng);
    let tape = nn::forward(disc, &noisy, Mode::Train)?;
    let n = tape.output().len() as f64;
    let (_, gy, _) = disc_backward(disc, &tape, |_| -1.0 / n, |d| -(1.0 / d + 1.0 / (1.0 - d)) / n)?;
    Ok((g_loss(tape.output().data()), gy))
}

/// Optimiser settings for the two players of a GAN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GanOptim {
    pub generator: OptimConfig,
    pub discriminator: OptimConfig,
    /// Discriminator updates per generator update.
    pub k_d: usize,
}

/// `k_d` discriminator updates followed by one generator update.
pub fn gan_step(
    gen: &mut Generator,
    disc: &mut NetState,
    real: &Tensor,
    lr_batch: &Tensor,
    sigma: f64,
    opt: &GanOptim,
    rng: &mut Rng,
) -> Result<GanLosses> {
    if opt.k_d == 0 {
        return Err(Error::Config("k_d must be at least 1".into()));
    }
    let mut noise = rng::derive(rng::normal(rng).to_bits(), 1);
    let fake = gen.forward(lr_batch, Mode::Train, Some(&mut noise))?.y;
    let mut d_loss = 0.0;
    let mut saturated = false;
    for _ in 0..opt.k_d {
        let (l, s) = discriminator_step(disc, real, &fake, sigma, &opt.discriminator, rng)?;
        d_loss = l;
        saturated |= s;
    }
    let pass = gen.forward(lr_batch, Mode::Train, Some(&mut noise))?;
    let (g_loss, gy) = generator_signal(disc, &pass.y, sigma, rng)?;
    let grads = gen.backward(&pass, &gy)?;
    gen.step(&grads, &opt.generator)?;
    Ok(GanLosses { d_loss, g_loss: g_loss + gen.soft_penalty(&pass)?, saturated })
}

/// `−E_q log[D/(1 − D)]` from discriminator outputs on samples of `q`,
/// where `D` estimates the probability of coming from `p`.
pub fn kl_from_probs(d_on_q: &[f64]) -> f64 {
    g_loss(d_on_q)
}

/// KL[q‖p] estimate from a discriminator trained to separate `p` (label 1)
/// from `q` (label 0).
pub fn discriminator_as_kl_estimator(disc: &mut NetState, samples_q: &Tensor) -> Result<f64> {
    let d = nn::predict(disc, samples_q)?;
    Ok(kl_from_probs(d.data()))
}

/// Trains a fresh discriminator on minibatches of `q` (fake) and `p` (real).
pub fn fit_discriminator(spec: &NetSpec, q: &Tensor, p: &Tensor, cfg: &OptimConfig) -> Result<NetState> {
    cfg.validate()?;
    let mut disc = NetState::init(spec)?;
    let mut rng = rng::derive(cfg.seed, 7);
    let pick = |t: &Tensor, rng: &mut Rng| -> Result<Tensor> {
        use rand::Rng as _;
        let rows: Vec<Vec<f64>> =
            (0..cfg.batch_size).map(|_| t.sample(rng.gen_range(0..t.batch())).to_vec()).collect();
        Tensor::stack(&t.shape()[1..], &rows)
    };
    for _ in 0..cfg.iterations {
        let (bp, bq) = (pick(p, &mut rng)?, pick(q, &mut rng)?);
        discriminator_step(&mut disc, &bp, &bq, 0.0, cfg, &mut rng)?;
    }
    Ok(disc)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseFamily {
    Linear,
    Adaptive,
}

/// Instance-noise level over training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceNoiseSchedule {
    pub family: NoiseFamily,
    pub sigma_start: f64,
    pub sigma_end: f64,
    /// Iterations over which the linear family decays.
    pub horizon: usize,
    /// Discriminator loss the adaptive family tries to hold.
    #[serde(default = "default_target")]
    pub target_d_loss: f64,
    #[serde(skip)]
    current: Option<f64>,
}

fn default_target() -> f64 {
    2.0 * std::f64::consts::LN_2
}

impl InstanceNoiseSchedule {
    pub fn off() -> Self {
        Self::linear(0.0, 0.0, 1)
    }

    pub fn linear(sigma_start: f64, sigma_end: f64, horizon: usize) -> Self {
        InstanceNoiseSchedule {
            family: NoiseFamily::Linear,
            sigma_start,
            sigma_end,
            horizon,
            target_d_loss: default_target(),
            current: None,
        }
    }

    pub fn adaptive(sigma_start: f64, sigma_end: f64, target_d_loss: f64) -> Self {
        InstanceNoiseSchedule {
            family: NoiseFamily::Adaptive,
            sigma_start,
            sigma_end,
            horizon: 1,
            target_d_loss,
            current: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_start >= self.sigma_end && self.sigma_end >= 0.0) || self.horizon == 0 {
            return Err(Error::Config(format!(
                "instance noise needs σ_start ≥ σ_end ≥ 0 and a positive horizon, got {} → {}",
                self.sigma_start, self.sigma_end
            )));
        }
        Ok(())
    }

    /// Noise level for iteration `t`.
    pub fn sigma(&self, t: usize) -> f64 {
        match self.family {
            NoiseFamily::Linear => {
                let frac = (t as f64 / self.horizon as f64).min(1.0);
                self.sigma_start + (self.sigma_end - self.sigma_start) * frac
            }
            NoiseFamily::Adaptive => self.current.unwrap_or(self.sigma_start),
        }
    }

    /// Feeds back the latest discriminator loss (adaptive family only).
    pub fn observe(&mut self, d_loss: f64) {
        if self.family != NoiseFamily::Adaptive || !d_loss.is_finite() {
            return;
        }
        let s = self.current.unwrap_or(self.sigma_start);
        let s = if d_loss < self.target_d_loss - 0.1 {
            s * 1.05
        } else if d_loss > self.target_d_loss + 0.1 {
            s * 0.95
        } else {
            s
        };
        self.current = Some(s.clamp(self.sigma_end, self.sigma_start));
    }
}

/// Denoiser noise levels, strictly decreasing, each trained for the same
/// number of iterations and swapped in at evenly spaced points of the
/// generator's budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserSchedule {
    pub sigmas: Vec<f64>,
    pub iterations_per_level: usize,
}

impl DenoiserSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.sigmas.is_empty() || self.sigmas.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Config("denoiser schedule needs positive noise levels".into()));
        }
        if self.sigmas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config(format!("denoiser noise levels must decrease strictly: {:?}", self.sigmas)));
        }
        Ok(())
    }

    /// Generator iteration at which level `i` becomes active.
    pub fn swap_iteration(&self, level: usize, total: usize) -> usize {
        level * total / self.sigmas.len()
    }

    /// Active level at generator iteration `it`.
    pub fn level_at(&self, it: usize, total: usize) -> usize {
        (0..self.sigmas.len()).rev().find(|&l| it >= self.swap_iteration(l, total)).unwrap_or(0)
    }
}

#[derive(Debug, Clone)]
pub struct DenoiserCheckpoint {
    pub sigma: f64,
    pub state: NetState,
}

/// Trains `f` on pairs `(y + σε, y)` for each level of the schedule, warm
/// starting every level from the previous one.
pub fn dae_pretrain(
    spec: &NetSpec,
    mut sample: impl FnMut(&mut Rng, usize) -> Tensor,
    schedule: &DenoiserSchedule,
    cfg: &OptimConfig,
) -> Result<Vec<DenoiserCheckpoint>> {
    schedule.validate()?;
    cfg.validate()?;
    let mut state = NetState::init(spec)?;
    let mut rng = rng::derive(cfg.seed, 11);
    let mut out = Vec::with_capacity(schedule.sigmas.len());
    for &sigma in &schedule.sigmas {
        for it in 0..schedule.iterations_per_level {
            let y = sample(&mut rng, cfg.batch_size);
            let noisy = add_noise(&y, sigma, &mut rng);
            let tape = nn::forward(&mut state, &noisy, Mode::Train)?;
            let diff = tape.output().sub(&y)?;
            let loss = diff.sum_sq() / cfg.batch_size as f64;
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("denoiser at σ={sigma}, iteration {it}")));
            }
            let (grads, _) = nn::backward(&state, &tape, &diff.scale(2.0 / cfg.batch_size as f64))?;
            nn::optimizer_step(&mut state, &grads, cfg)
                .map_err(|e| Error::Diverged(format!("denoiser at σ={sigma}, iteration {it}: {e}")))?;
        }
        out.push(DenoiserCheckpoint { sigma, state: state.clone() });
    }
    Ok(out)
}

/// `(f(y) − y)/σ²`, the denoiser's estimate of `∇ log p(y)`.
pub fn denoiser_gradient(den: &mut DenoiserCheckpoint, y: &Tensor) -> Result<Tensor> {
    let f = nn::predict(&mut den.state, y)?;
    Ok(f.sub(y)?.scale(1.0 / (den.sigma * den.sigma)))
}

/// Generator gradients for ascending `E log p(ŷ)` given a score function,
/// plus the soft penalty. Returns `None` when the score is not finite.
pub fn guided_gradients(
    gen: &mut Generator,
    x: &Tensor,
    score: impl FnOnce(&Tensor) -> Result<Tensor>,
    rng: Option<&mut Rng>,
) -> Result<Option<(GenGrads, GenPass)>> {
    let pass = gen.forward(x, Mode::Train, rng)?;
    let s = score(&pass.y)?;
    if s.data().iter().any(|v| !v.is_finite()) {
        return Ok(None);
    }
    let up = s.scale(-1.0 / x.batch() as f64);
    let grads = gen.backward(&pass, &up)?;
    Ok(Some((grads, pass)))
}

/// One denoiser-guided update. Returns `false` when the batch was skipped
/// because the denoiser produced non-finite values.
pub fn denoiser_guided_step(
    gen: &mut Generator,
    den: &mut DenoiserCheckpoint,
    lr_batch: &Tensor,
    cfg: &OptimConfig,
    rng: Option<&mut Rng>,
) -> Result<bool> {
    let Some((grads, _)) = guided_gradients(gen, lr_batch, |y| denoiser_gradient(den, y), rng)? else {
        return Ok(false);
    };
    gen.step(&grads, cfg)?;
    Ok(true)
}

/// `n` draws of `Π f(x, z)` per observation, stacked observation-major.
pub fn stochastic_generator_sample(gen: &mut Generator, x: &Tensor, n: usize, rng: &mut Rng) -> Result<Tensor> {
    if gen.noise_len == 0 {
        return Err(Error::Config("generator has no noise input".into()));
    }
    let rows: Vec<Vec<f64>> = (0..x.batch()).flat_map(|s| std::iter::repeat(x.sample(s).to_vec()).take(n)).collect();
    let xs = Tensor::stack(&x.shape()[1..], &rows)?;
    gen.predict(&xs, Some(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::densities::{analytic_denoiser_gaussian, KdeModel};
    use crate::linops::PseudoInverseOperator;
    use crate::nn::LayerSpec;

    fn toy_projector() -> AffineProjector {
        let a = DownsampleOperator::toy_average();
        let b = PseudoInverseOperator::from_weights(&a, 0, vec![1.0, 1.0]).unwrap();
        AffineProjector::new(a, b).unwrap()
    }

    fn column(v: &[f64]) -> Tensor {
        Tensor::from_vec(&[v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn pixel_losses_on_scalars() {
        let (a, b) = (column(&[0.6]), column(&[0.4]));
        assert!((pixel_loss(&a, &b, PixelLoss::Mse).unwrap().0 - 0.04).abs() < 1e-15);
        assert!((pixel_loss(&a, &b, PixelLoss::Mae).unwrap().0 - 0.2).abs() < 1e-15);
        assert_eq!(pixel_loss(&a, &a, PixelLoss::Mse).unwrap().0, 0.0);
    }

    #[test]
    fn pixel_loss_gradients_match_finite_differences() {
        let mut r = rng::seeded(1);
        let p = Tensor::from_vec(&[3, 4], rng::normal_vec(&mut r, 12)).unwrap();
        let t = Tensor::from_vec(&[3, 4], rng::normal_vec(&mut r, 12)).unwrap();
        for kind in [PixelLoss::Mse, PixelLoss::Mae] {
            let (_, g) = pixel_loss(&p, &t, kind).unwrap();
            for i in 0..12 {
                let h = 1e-6;
                let mut pp = p.clone();
                pp.data_mut()[i] += h;
                let mut pm = p.clone();
                pm.data_mut()[i] -= h;
                let fd = (pixel_loss(&pp, &t, kind).unwrap().0 - pixel_loss(&pm, &t, kind).unwrap().0) / (2.0 * h);
                assert!((fd - g.data()[i]).abs() <= 1e-6 * fd.abs().max(1e-2), "{kind:?} {i}");
            }
        }
    }

    #[test]
    fn half_discriminator_losses() {
        let d = vec![0.5; 8];
        assert!((d_loss(&d, &d) - 2.0 * std::f64::consts::LN_2).abs() < 1e-12);
        assert_eq!(g_loss(&d), 0.0);
    }

    #[test]
    fn bayes_optimal_discriminator_recovers_kl() {
        let mut r = rng::seeded(2);
        let q = rng::normal_vec(&mut r, 100_000);
        // D* = p/(p+q) with p = N(1,1), q = N(0,1).
        let probs: Vec<f64> = q.iter().map(|y| 1.0 / (1.0 + (0.5 - y).exp())).collect();
        let est = kl_from_probs(&probs);
        assert!((est - 0.5).abs() <= 0.05, "{est}");
    }

    #[test]
    fn instance_noise_schedules() {
        let lin = InstanceNoiseSchedule::linear(1.0, 0.2, 100);
        let s: Vec<f64> = (0..150).map(|t| lin.sigma(t)).collect();
        assert!(s.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(s[0], 1.0);
        assert!((s[149] - 0.2).abs() < 1e-15);

        let mut ad = InstanceNoiseSchedule::adaptive(1.0, 0.1, 1.386);
        ad.observe(0.5);
        assert_eq!(ad.sigma(0), 1.0);
        ad.observe(2.0);
        assert!((ad.sigma(0) - 0.95).abs() < 1e-15);
        for _ in 0..200 {
            ad.observe(3.0);
        }
        assert!((ad.sigma(0) - 0.1).abs() < 1e-15);
        assert!(InstanceNoiseSchedule::linear(0.1, 0.2, 10).validate().is_err());
    }

    #[test]
    fn instance_noise_keeps_point_masses_overlapping() {
        let spec = NetSpec {
            input_shape: vec![1],
            layers: vec![
                LayerSpec::Dense { inp: 1, out: 16 },
                LayerSpec::Relu,
                LayerSpec::Dense { inp: 16, out: 1 },
                LayerSpec::Sigmoid,
            ],
            seed: 3,
        };
        let real = Tensor::full(&[64, 1], 0.0);
        let fake = Tensor::full(&[64, 1], 1.0);
        let cfg = OptimConfig { lr: 1e-2, ..Default::default() };
        let final_loss = |sigma: f64| {
            let mut d = NetState::init(&spec).unwrap();
            let mut r = rng::seeded(4);
            let mut loss = 0.0;
            for _ in 0..1500 {
                loss = discriminator_step(&mut d, &real, &fake, sigma, &cfg, &mut r).unwrap().0;
            }
            loss
        };
        let (clean, noisy) = (final_loss(0.0), final_loss(1.0));
        assert!(noisy > clean + 0.1, "{noisy} vs {clean}");
    }

    fn toy_generator(constraint: Constraint, seed: u64) -> Generator {
        Generator::new(NetState::init(&NetSpec::mlp(1, &[16, 16], 2, seed)).unwrap(), constraint)
    }

    fn toy_disc(seed: u64) -> NetState {
        let mut spec = NetSpec::mlp(2, &[16, 16], 1, seed);
        spec.layers.push(LayerSpec::Sigmoid);
        NetState::init(&spec).unwrap()
    }

    /// Finite differences of a scalar function of the generator parameters.
    fn check_param_grads(gen: &Generator, grads: &GenGrads, mut f: impl FnMut(&mut Generator) -> f64, tol: f64) {
        let flat = gen.net.flat_params();
        let g = grads.net.flat();
        for i in (0..flat.len()).step_by(7) {
            let h = 1e-5;
            let mut gp = gen.clone();
            let mut p = flat.clone();
            p[i] += h;
            gp.net.set_flat_params(&p).unwrap();
            let mut gm = gen.clone();
            p[i] -= 2.0 * h;
            gm.net.set_flat_params(&p).unwrap();
            let fd = (f(&mut gp) - f(&mut gm)) / (2.0 * h);
            let err = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-4);
            assert!(err <= tol, "param {i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn generator_loss_gradient_matches_finite_differences() {
        let x = column(&[0.3, -1.2, 2.0]);
        for constraint in [
            Constraint::Affine { proj: toy_projector(), trainable: false, checked: true },
            Constraint::Soft { down: DownsampleOperator::toy_average(), lambda: 10.0 },
        ] {
            let mut gen = toy_generator(constraint, 5);
            let mut disc = toy_disc(6);
            let pass = gen.forward(&x, Mode::Train, None).unwrap();
            let mut r = rng::seeded(0);
            let (_, gy) = generator_signal(&mut disc, &pass.y, 0.0, &mut r).unwrap();
            let grads = gen.backward(&pass, &gy).unwrap();
            let d0 = disc.clone();
            check_param_grads(
                &gen,
                &grads,
                |g| {
                    let pass = g.forward(&x, Mode::Train, None).unwrap();
                    let mut d = d0.clone();
                    let probs = nn::predict(&mut d, &pass.y).unwrap();
                    g_loss(probs.data()) + g.soft_penalty(&pass).unwrap()
                },
                1e-4,
            );
        }
    }

    #[test]
    fn affine_gan_training_stays_consistent() {
        let proj = toy_projector();
        let mut gen = toy_generator(Constraint::Affine { proj: proj.clone(), trainable: false, checked: true }, 1);
        let mut disc = toy_disc(2);
        let opt = GanOptim { generator: OptimConfig::default(), discriminator: OptimConfig::default(), k_d: 1 };
        let mut r = rng::seeded(3);
        for _ in 0..50 {
            let real = Tensor::from_vec(&[32, 2], rng::normal_vec(&mut r, 64)).unwrap();
            let x = Tensor::from_vec(&[32, 1], rng::normal_vec(&mut r, 32)).unwrap();
            gan_step(&mut gen, &mut disc, &real, &x, 0.0, &opt, &mut r).unwrap();
            let y = gen.predict(&x, None).unwrap();
            assert!(proj.consistency_residual(&y, &x).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn guided_chain_matches_log_kde_differences() {
        let kde = KdeModel::swiss_roll(&Default::default(), 2_000, 0).unwrap();
        let mut gen = toy_generator(Constraint::Affine { proj: toy_projector(), trainable: false, checked: true }, 9);
        let x = column(&[0.5, -2.0, 1.5, 3.0, -0.7]);
        let score = |y: &Tensor| -> Result<Tensor> {
            let rows: Vec<Vec<f64>> =
                (0..y.batch()).map(|s| kde.grad_log_density([y.sample(s)[0], y.sample(s)[1]]).to_vec()).collect();
            Tensor::stack(&[2], &rows)
        };
        let (grads, _) = guided_gradients(&mut gen, &x, score, None).unwrap().unwrap();
        check_param_grads(
            &gen,
            &grads,
            |g| {
                let y = g.predict(&x, None).unwrap();
                -(0..5).map(|s| kde.log_density([y.sample(s)[0], y.sample(s)[1]])).sum::<f64>() / 5.0
            },
            1e-3,
        );
    }

    #[test]
    fn identity_denoiser_gives_zero_gradient() {
        let spec = NetSpec { input_shape: vec![2], layers: vec![], seed: 0 };
        let mut den = DenoiserCheckpoint { sigma: 0.3, state: NetState::init(&spec).unwrap() };
        let y = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        assert_eq!(denoiser_gradient(&mut den, &y).unwrap().max_abs(), 0.0);
    }

    fn residual_denoiser(seed: u64) -> NetSpec {
        let mut spec = NetSpec::mlp(2, &[64, 64], 2, seed);
        spec.layers.push(LayerSpec::Skip { from: 0 });
        spec
    }

    fn gaussian_sampler(mu: [f64; 2], s: f64) -> impl FnMut(&mut Rng, usize) -> Tensor {
        move |r, n| {
            let v: Vec<f64> = (0..2 * n).map(|i| mu[i % 2] + s * rng::normal(r)).collect();
            Tensor::from_vec(&[n, 2], v).unwrap()
        }
    }

    #[test]
    fn trained_denoiser_matches_gaussian_oracle() {
        let (mu, s, sigma) = ([1.0, -1.0], 0.5, 0.3);
        let schedule = DenoiserSchedule { sigmas: vec![sigma], iterations_per_level: 6000 };
        let cfg = OptimConfig { lr: 1e-3, batch_size: 256, ..Default::default() };
        let mut den = dae_pretrain(&residual_denoiser(1), gaussian_sampler(mu, s), &schedule, &cfg)
            .unwrap()
            .remove(0);
        let mut r = rng::seeded(50);
        let clean = gaussian_sampler(mu, s)(&mut r, 500);
        let noisy = add_noise(&clean, sigma, &mut r);
        let out = nn::predict(&mut den.state, &noisy).unwrap();
        let mut gap = 0.0;
        for k in 0..500 {
            let y = noisy.sample(k);
            let want = analytic_denoiser_gaussian(&mu, s, sigma, y);
            let got = out.sample(k);
            gap += ((got[0] - want[0]).powi(2) + (got[1] - want[1]).powi(2)).sqrt();
        }
        assert!(gap / 500.0 <= 0.05, "{}", gap / 500.0);
    }

    #[test]
    fn huge_noise_denoiser_returns_mean() {
        let mu = [2.0, -1.0];
        let schedule = DenoiserSchedule { sigmas: vec![10.0], iterations_per_level: 10_000 };
        let cfg = OptimConfig { lr: 1e-3, batch_size: 256, ..Default::default() };
        let mut den = dae_pretrain(&NetSpec::mlp(2, &[64, 64], 2, 2), gaussian_sampler(mu, 0.3), &schedule, &cfg)
            .unwrap()
            .remove(0);
        let mut r = rng::seeded(8);
        let probe = Tensor::from_vec(&[100, 2], rng::normal_vec(&mut r, 200).iter().map(|v| 10.0 * v).collect())
            .unwrap();
        let out = nn::predict(&mut den.state, &probe).unwrap();
        for k in 0..100 {
            let o = out.sample(k);
            assert!((o[0] - mu[0]).abs() < 0.5 && (o[1] - mu[1]).abs() < 0.5, "{o:?}");
        }
    }

    #[test]
    fn denoiser_schedule_levels() {
        let s = DenoiserSchedule { sigmas: vec![0.5, 0.25], iterations_per_level: 10 };
        s.validate().unwrap();
        assert_eq!(s.level_at(0, 100), 0);
        assert_eq!(s.level_at(49, 100), 0);
        assert_eq!(s.level_at(50, 100), 1);
        assert!(DenoiserSchedule { sigmas: vec![0.25, 0.5], iterations_per_level: 1 }.validate().is_err());
    }

    #[test]
    fn stochastic_samples_share_observation_and_differ() {
        let mut gen = Generator::new(
            NetState::init(&NetSpec::mlp(3, &[16], 2, 4)).unwrap(),
            Constraint::Affine { proj: toy_projector(), trainable: false, checked: true },
        )
        .with_noise(2);
        let mut r = rng::seeded(5);
        let x = column(&[0.7, -1.0]);
        let ys = stochastic_generator_sample(&mut gen, &x, 10, &mut r).unwrap();
        assert_eq!(ys.shape(), &[20, 2]);
        for k in 0..20 {
            let y = ys.sample(k);
            assert!(((y[0] + y[1]) / 2.0 - x.data()[k / 10]).abs() <= 1e-12);
        }
        assert!((ys.sample(0)[0] - ys.sample(1)[0]).abs() > 1e-6);
    }
}
