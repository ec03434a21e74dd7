//! The 2D Swiss-roll benchmark: pixel-loss, GAN and denoiser-guided
//! generators compared against brute-force oracles.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::densities::{observe, sample_swiss_roll, KdeModel, LineOracles, SwissRollParams};
use crate::io::{self, BlobDtype};
use crate::linops::{fit_pseudoinverse, AffineProjector, DownsampleOperator, FitConfig};
use crate::nn::{LayerSpec, NetSpec, NetState, OptimConfig};
use crate::objectives::{
    dae_pretrain, denoiser_guided_step, gan_step, pixel_step, Constraint, DenoiserCheckpoint, DenoiserSchedule,
    GanOptim, Generator, InstanceNoiseSchedule, PixelLoss,
};
use crate::rng::{self, Rng};
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ToyVariant {
    #[serde(rename = "MSE")]
    Mse,
    #[serde(rename = "MAE")]
    Mae,
    AffGAN,
    SoftGAN,
    AffDG,
    SoftDG,
}

impl ToyVariant {
    pub const ALL: [ToyVariant; 6] =
        [ToyVariant::Mse, ToyVariant::Mae, ToyVariant::AffGAN, ToyVariant::SoftGAN, ToyVariant::AffDG, ToyVariant::SoftDG];

    pub fn name(self) -> &'static str {
        match self {
            ToyVariant::Mse => "MSE",
            ToyVariant::Mae => "MAE",
            ToyVariant::AffGAN => "AffGAN",
            ToyVariant::SoftGAN => "SoftGAN",
            ToyVariant::AffDG => "AffDG",
            ToyVariant::SoftDG => "SoftDG",
        }
    }

    fn tag(self) -> u64 {
        ToyVariant::ALL.iter().position(|v| *v == self).unwrap() as u64
    }

    fn uses_denoiser(self) -> bool {
        matches!(self, ToyVariant::AffDG | ToyVariant::SoftDG)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DaeConfig {
    pub hidden: Vec<usize>,
    pub schedule: DenoiserSchedule,
    pub optim: OptimConfig,
}

impl Default for DaeConfig {
    fn default() -> Self {
        DaeConfig {
            hidden: vec![256, 256],
            schedule: DenoiserSchedule { sigmas: vec![0.5, 0.4, 0.3, 0.25], iterations_per_level: 5000 },
            optim: OptimConfig { batch_size: 128, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SwissrollConfig {
    pub variants: Vec<ToyVariant>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub roll: SwissRollParams,
    pub kde_points: usize,
    pub kde_bandwidth: f64,
    pub kde_seed: u64,
    pub hidden: Vec<usize>,
    pub iterations: usize,
    pub batch_size: usize,
    pub generator: OptimConfig,
    pub discriminator: OptimConfig,
    pub k_d: usize,
    pub instance_noise: InstanceNoiseSchedule,
    /// Weight of `MAE(x, Aŷ)` for SoftGAN.
    pub lambda_gan: f64,
    /// Weight of `MAE(x, Aŷ)` for SoftDG.
    pub lambda_dg: f64,
    pub dae: DaeConfig,
    /// Observations drawn from the data distribution for evaluation.
    pub eval_points: usize,
    pub eval_seed: u64,
    /// Evenly spaced `x ∈ [-8, 8]` for the output sweep.
    pub grid_points: usize,
    pub log_every: usize,
    pub save_checkpoints: bool,
}

impl Default for SwissrollConfig {
    fn default() -> Self {
        SwissrollConfig {
            variants: ToyVariant::ALL.to_vec(),
            seeds: (0..10).collect(),
            output_dir: PathBuf::from("runs/swissroll"),
            roll: SwissRollParams::default(),
            kde_points: 50_000,
            kde_bandwidth: 0.2,
            kde_seed: 0,
            hidden: vec![64, 64],
            iterations: 10_000,
            batch_size: 128,
            generator: OptimConfig { final_lr: Some(1e-5), ..Default::default() },
            discriminator: OptimConfig::default(),
            k_d: 1,
            instance_noise: InstanceNoiseSchedule::linear(1.0, 0.1, 10_000),
            lambda_gan: 1.0,
            lambda_dg: 3.0,
            dae: DaeConfig::default(),
            eval_points: 1000,
            eval_seed: 12345,
            grid_points: 401,
            log_every: 500,
            save_checkpoints: false,
        }
    }
}

impl SwissrollConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("no variants requested".into()));
        }
        check_seeds(&self.seeds)?;
        self.roll.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.instance_noise.validate()?;
        if self.variants.iter().any(|v| v.uses_denoiser()) {
            self.dae.schedule.validate()?;
            self.dae.optim.validate()?;
        }
        if self.iterations == 0 || self.batch_size == 0 || self.log_every == 0 || self.k_d == 0 {
            return Err(Error::Config("iterations, batch_size, log_every and k_d must be positive".into()));
        }
        if self.eval_points == 0 || self.grid_points < 2 || self.kde_points == 0 || !(self.kde_bandwidth > 0.0) {
            return Err(Error::Config("evaluation sizes and KDE settings must be positive".into()));
        }
        if !(self.lambda_gan >= 0.0 && self.lambda_dg >= 0.0) {
            return Err(Error::Config(format!("λ must be non-negative, got {} and {}", self.lambda_gan, self.lambda_dg)));
        }
        Ok(())
    }
}

pub(crate) fn check_seeds(seeds: &[u64]) -> Result<()> {
    let mut s = seeds.to_vec();
    s.sort_unstable();
    s.dedup();
    if seeds.is_empty() || s.len() != seeds.len() {
        return Err(Error::Config(format!("seeds must be non-empty and distinct, got {seeds:?}")));
    }
    Ok(())
}

/// Logged training state of one toy trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRow {
    pub iteration: usize,
    pub d_loss: Option<f64>,
    pub g_loss: Option<f64>,
    pub sigma_instance: Option<f64>,
    pub cross_entropy: f64,
    pub consistency_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub x: f64,
    pub y1: f64,
    pub y2: f64,
    pub log_density: f64,
    pub oracle_name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub variant: String,
    pub seed: u64,
    pub failed: bool,
    pub cross_entropy: Option<f64>,
    pub consistency_mse: Option<f64>,
    /// Mean distance to the matching oracle over the sweep grid.
    pub oracle_gap: Option<f64>,
    pub floored: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub method: String,
    pub cross_entropy_mean: f64,
    pub cross_entropy_std: f64,
    pub consistency_mean: Option<f64>,
    pub consistency_std: Option<f64>,
    pub trials: usize,
    pub failed: usize,
}

/// Everything shared by the trials of one sweep.
pub struct ToyContext {
    pub kde: KdeModel,
    pub projector: AffineProjector,
    pub eval_x: Vec<f64>,
    pub grid_x: Vec<f64>,
    pub eval_oracles: Vec<LineOracles>,
    pub grid_oracles: Vec<LineOracles>,
    pub denoisers: Option<Vec<DenoiserCheckpoint>>,
}

pub fn grid(n: usize) -> Vec<f64> {
    (0..n).map(|i| -8.0 + 16.0 * i as f64 / (n - 1) as f64).collect()
}

pub fn toy_projector() -> Result<AffineProjector> {
    let down = DownsampleOperator::toy_average();
    let up = fit_pseudoinverse(&down, &FitConfig { iterations: 100, ..Default::default() })?;
    AffineProjector::new(down, up)
}

fn column(v: &[f64]) -> Tensor {
    Tensor::from_vec(&[v.len(), 1], v.to_vec()).expect("column length")
}

fn points(t: &Tensor) -> Vec<[f64; 2]> {
    t.data().chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

fn roll_batch(params: &SwissRollParams, n: usize, rng: &mut Rng) -> Tensor {
    let ys = sample_swiss_roll(params, n, rng);
    Tensor::from_vec(&[n, 2], ys.iter().flatten().copied().collect()).expect("roll batch")
}

fn observe_batch(y: &Tensor) -> Tensor {
    let x: Vec<f64> = points(y).into_iter().map(observe).collect();
    column(&x)
}


impl ToyContext {
    pub fn build(cfg: &SwissrollConfig) -> Result<ToyContext> {
        let kde = KdeModel::swiss_roll(&cfg.roll, cfg.kde_points, cfg.kde_seed)?;
        let mut rng = rng::derive(cfg.eval_seed, 0);
        let eval_x: Vec<f64> =
            sample_swiss_roll(&cfg.roll, cfg.eval_points, &mut rng).into_iter().map(observe).collect();
        let grid_x = grid(cfg.grid_points);
        let oracles = |xs: &[f64]| -> Result<Vec<LineOracles>> { xs.par_iter().map(|&x| kde.line_oracles(x)).collect() };
        let eval_oracles = oracles(&eval_x)?;
        let grid_oracles = oracles(&grid_x)?;
        let denoisers = if cfg.variants.iter().any(|v| v.uses_denoiser()) {
            let spec = NetSpec::mlp(2, &cfg.dae.hidden, 2, cfg.dae.optim.seed);
            let roll = cfg.roll;
            let optim = OptimConfig {
                iterations: cfg.dae.schedule.iterations_per_level * cfg.dae.schedule.sigmas.len(),
                ..cfg.dae.optim.clone()
            };
            Some(dae_pretrain(&spec, |r, n| roll_batch(&roll, n, r), &cfg.dae.schedule, &optim)?)
        } else {
            None
        };
        Ok(ToyContext { kde, projector: toy_projector()?, eval_x, grid_x, eval_oracles, grid_oracles, denoisers })
    }

    /// Table rows for the three oracles on the evaluation observations.
    pub fn oracle_rows(&self) -> Vec<TableRow> {
        let pick: [(&str, fn(&LineOracles) -> [f64; 2]); 3] =
            [("MAP", |o| o.map), ("MSE-oracle", |o| o.mean), ("MAE-oracle", |o| o.median)];
        pick.iter()
            .map(|(name, f)| {
                let ys: Vec<[f64; 2]> = self.eval_oracles.iter().map(f).collect();
                TableRow {
                    method: name.to_string(),
                    cross_entropy_mean: self.kde.cross_entropy(&ys).nats,
                    cross_entropy_std: 0.0,
                    consistency_mean: None,
                    consistency_std: None,
                    trials: 1,
                    failed: 0,
                }
            })
            .collect()
    }

    pub fn oracle_sweep(&self) -> Vec<SweepRow> {
        let mut rows = Vec::new();
        for (name, f) in [("MAP", 0), ("MSE-oracle", 1), ("MAE-oracle", 2)] {
            for o in &self.grid_oracles {
                let y = [o.map, o.mean, o.median][f];
                rows.push(SweepRow { x: o.x, y1: y[0], y2: y[1], log_density: self.kde.log_density(y), oracle_name: name.into() });
            }
        }
        rows
    }
}

/// Result of a finished trial.
pub struct TrialOutcome {
    pub generator: Generator,
    pub log: Vec<TrainingRow>,
    pub cross_entropy: f64,
    pub consistency_mse: f64,
    pub oracle_gap: f64,
    pub floored: usize,
    pub sweep: Vec<[f64; 2]>,
}

fn evaluate(gen: &mut Generator, ctx: &ToyContext, xs: &[f64]) -> Result<(Vec<[f64; 2]>, f64)> {
    let x = column(xs);
    let y = gen.predict(&x, None)?;
    let consistency = crate::metrics::lr_consistency(&x, &y, &ctx.projector.down)?;
    Ok((points(&y), consistency))
}

fn net_seed(seed: u64, variant: ToyVariant, tag: u64) -> u64 {
    rng::derive(seed, 100 + 10 * variant.tag() + tag).gen()
}

pub fn run_trial(cfg: &SwissrollConfig, ctx: &ToyContext, variant: ToyVariant, seed: u64) -> Result<TrialOutcome> {
    let spec = NetSpec::mlp(1, &cfg.hidden, 2, net_seed(seed, variant, 0));
    let net = NetState::init(&spec)?;
    let constraint = match variant {
        ToyVariant::Mse | ToyVariant::Mae => Constraint::None,
        ToyVariant::AffGAN | ToyVariant::AffDG => {
            Constraint::Affine { proj: ctx.projector.clone(), trainable: false, checked: false }
        }
        ToyVariant::SoftGAN => Constraint::Soft { down: ctx.projector.down.clone(), lambda: cfg.lambda_gan },
        ToyVariant::SoftDG => Constraint::Soft { down: ctx.projector.down.clone(), lambda: cfg.lambda_dg },
    };
    let mut gen = Generator::new(net, constraint);
    let mut disc = match variant {
        ToyVariant::AffGAN | ToyVariant::SoftGAN => {
            let mut dspec = NetSpec::mlp(2, &cfg.hidden, 1, net_seed(seed, variant, 1));
            dspec.layers.push(LayerSpec::Sigmoid);
            Some(NetState::init(&dspec)?)
        }
        _ => None,
    };
    let mut denoisers = if variant.uses_denoiser() {
        Some(ctx.denoisers.clone().ok_or_else(|| Error::Config("denoiser variants need a pretrained DAE".into()))?)
    } else {
        None
    };
    let gen_opt = OptimConfig { iterations: cfg.iterations, ..cfg.generator.clone() };
    let gan_opt = GanOptim {
        generator: gen_opt.clone(),
        discriminator: OptimConfig { iterations: cfg.iterations * cfg.k_d, ..cfg.discriminator.clone() },
        k_d: cfg.k_d,
    };
    let mut noise = cfg.instance_noise.clone();
    let mut data = rng::derive(seed, 200 + variant.tag());
    let mut log = Vec::new();
    let (mut last_d, mut last_g, mut last_sigma) = (None, None, None);
    for it in 0..=cfg.iterations {
        if it % cfg.log_every == 0 || it == cfg.iterations {
            let (ys, consistency) = evaluate(&mut gen, ctx, &ctx.eval_x)?;
            let ce = ctx.kde.cross_entropy(&ys).nats;
            log.push(TrainingRow {
                iteration: it,
                d_loss: last_d,
                g_loss: last_g,
                sigma_instance: last_sigma,
                cross_entropy: ce,
                consistency_mse: consistency,
            });
        }
        if it == cfg.iterations {
            break;
        }
        let diverged = |e: Error| Error::Diverged(format!("{} seed {seed} at iteration {it}: {e}", variant.name()));
        match variant {
            ToyVariant::Mse | ToyVariant::Mae => {
                let y = roll_batch(&cfg.roll, cfg.batch_size, &mut data);
                let x = observe_batch(&y);
                let kind = if variant == ToyVariant::Mse { PixelLoss::Mse } else { PixelLoss::Mae };
                let loss = pixel_step(&mut gen, &x, &y, kind, &gen_opt, None).map_err(diverged)?;
                last_g = Some(loss);
            }
            ToyVariant::AffGAN | ToyVariant::SoftGAN => {
                let real = roll_batch(&cfg.roll, cfg.batch_size, &mut data);
                let x = observe_batch(&roll_batch(&cfg.roll, cfg.batch_size, &mut data));
                let sigma = noise.sigma(it);
                let losses = gan_step(&mut gen, disc.as_mut().unwrap(), &real, &x, sigma, &gan_opt, &mut data)
                    .map_err(diverged)?;
                noise.observe(losses.d_loss);
                last_d = Some(losses.d_loss);
                last_g = Some(losses.g_loss);
                last_sigma = Some(sigma);
            }
            ToyVariant::AffDG | ToyVariant::SoftDG => {
                let x = observe_batch(&roll_batch(&cfg.roll, cfg.batch_size, &mut data));
                let dens = denoisers.as_mut().unwrap();
                let level = cfg.dae.schedule.level_at(it, cfg.iterations);
                denoiser_guided_step(&mut gen, &mut dens[level], &x, &gen_opt, None).map_err(diverged)?;
                last_sigma = Some(dens[level].sigma);
            }
        }
        if last_d.is_some_and(|v: f64| !v.is_finite()) || last_g.is_some_and(|v: f64| !v.is_finite()) {
            return Err(diverged(Error::Diverged("non-finite loss".into())));
        }
    }
    let (ys, consistency_mse) = evaluate(&mut gen, ctx, &ctx.eval_x)?;
    let ce = ctx.kde.cross_entropy(&ys);
    let (sweep, _) = evaluate(&mut gen, ctx, &ctx.grid_x)?;
    let oracle_gap = sweep
        .iter()
        .zip(&ctx.grid_oracles)
        .map(|(y, o)| {
            let t = match variant {
                ToyVariant::Mse => o.mean,
                ToyVariant::Mae => o.median,
                _ => o.map,
            };
            ((y[0] - t[0]).powi(2) + (y[1] - t[1]).powi(2)).sqrt()
        })
        .sum::<f64>()
        / sweep.len() as f64;
    Ok(TrialOutcome {
        generator: gen,
        log,
        cross_entropy: ce.nats,
        consistency_mse,
        oracle_gap,
        floored: ce.floored,
        sweep,
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let m = v.iter().sum::<f64>() / v.len() as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64;
    (m, var.sqrt())
}

/// Outputs of a sweep, also written to `output_dir`.
pub struct SwissrollReport {
    pub table: Vec<TableRow>,
    pub trials: Vec<TrialRow>,
}

impl SwissrollReport {
    pub fn row(&self, method: &str) -> Option<&TableRow> {
        self.table.iter().find(|r| r.method == method)
    }
}

/// Trains every (variant, seed) pair, in parallel over trials, and writes
/// `table.csv`, `trials.csv`, `sweep.csv` and one training log per trial.
pub fn run(cfg: &SwissrollConfig) -> Result<SwissrollReport> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ctx = ToyContext::build(cfg)?;
    let jobs: Vec<(ToyVariant, u64)> =
        cfg.variants.iter().flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s))).collect();
    let results: Vec<Result<TrialOutcome>> = jobs.par_iter().map(|&(v, s)| run_trial(cfg, &ctx, v, s)).collect();

    let mut trials = Vec::new();
    let mut sweep = ctx.oracle_sweep();
    let mut table = ctx.oracle_rows();
    for (&(variant, seed), res) in jobs.iter().zip(&results) {
        let row = match res {
            Ok(o) => {
                let name = format!("{}-seed{seed}", variant.name());
                io::write_csv(&out.join(format!("train_{name}.csv")), &o.log)?;
                if cfg.save_checkpoints {
                    io::save_checkpoint(&out.join("checkpoints"), &name, &o.generator.net, cfg.iterations, &[seed], BlobDtype::F64)?;
                }
                if seed == cfg.seeds[0] {
                    for (x, y) in ctx.grid_x.iter().zip(&o.sweep) {
                        sweep.push(SweepRow {
                            x: *x,
                            y1: y[0],
                            y2: y[1],
                            log_density: ctx.kde.log_density(*y),
                            oracle_name: variant.name().into(),
                        });
                    }
                }
                TrialRow {
                    variant: variant.name().into(),
                    seed,
                    failed: false,
                    cross_entropy: Some(o.cross_entropy),
                    consistency_mse: Some(o.consistency_mse),
                    oracle_gap: Some(o.oracle_gap),
                    floored: o.floored,
                    message: String::new(),
                }
            }
            Err(e) => TrialRow {
                variant: variant.name().into(),
                seed,
                failed: true,
                cross_entropy: None,
                consistency_mse: None,
                oracle_gap: None,
                floored: 0,
                message: e.to_string(),
            },
        };
        trials.push(row);
    }
    for &v in &cfg.variants {
        let rows: Vec<&TrialRow> = trials.iter().filter(|t| t.variant == v.name()).collect();
        let ce: Vec<f64> = rows.iter().filter_map(|t| t.cross_entropy).collect();
        let cons: Vec<f64> = rows.iter().filter_map(|t| t.consistency_mse).collect();
        let (cm, cs) = mean_std(&ce);
        let (km, ks) = mean_std(&cons);
        table.push(TableRow {
            method: v.name().into(),
            cross_entropy_mean: cm,
            cross_entropy_std: cs,
            consistency_mean: Some(km),
            consistency_std: Some(ks),
            trials: rows.len(),
            failed: rows.len() - ce.len(),
        });
    }
    io::write_csv(&out.join("table.csv"), &table)?;
    io::write_csv(&out.join("trials.csv"), &trials)?;
    io::write_csv(&out.join("sweep.csv"), &sweep)?;
    io::write_json(&out.join("config.json"), cfg)?;
    Ok(SwissrollReport { table, trials })
}

pub fn load_report(dir: &Path) -> Result<SwissrollReport> {
    Ok(SwissrollReport { table: io::read_csv(&dir.join("table.csv"))?, trials: io::read_csv(&dir.join("trials.csv"))? })
}
