//! Smoke-scale comparison of an affine-projected GAN against an
//! affine-projected MSE network on procedural textures.

use std::path::PathBuf;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::images::{discriminator_spec, upsampler_spec, write_strip, TextureParams};
use super::mse_affine::ImageContext;
use crate::io::{self, BlobDtype};
use crate::linops::{FitConfig, OperatorSpec};
use crate::metrics::MetricsRow;
use crate::nn::{NetState, OptimConfig};
use crate::objectives::{gan_step, pixel_step, Constraint, GanOptim, Generator, InstanceNoiseSchedule, PixelLoss};
use crate::rng;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TextureVariant {
    AffGAN,
    AffMSE,
}

impl TextureVariant {
    pub fn name(self) -> &'static str {
        match self {
            TextureVariant::AffGAN => "AffGAN",
            TextureVariant::AffMSE => "AffMSE",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureGanConfig {
    pub variants: Vec<TextureVariant>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub operator: OperatorSpec,
    pub fit: FitConfig,
    pub textures: TextureParams,
    pub image_dir: Option<PathBuf>,
    pub train_images: usize,
    pub test_images: usize,
    pub data_seed: u64,
    pub channels: usize,
    pub depth: usize,
    pub disc_channels: usize,
    pub iterations: usize,
    pub batch_size: usize,
    pub generator: OptimConfig,
    pub discriminator: OptimConfig,
    pub k_d: usize,
    pub instance_noise: InstanceNoiseSchedule,
    pub log_every: usize,
}

impl Default for TextureGanConfig {
    fn default() -> Self {
        TextureGanConfig {
            variants: vec![TextureVariant::AffGAN, TextureVariant::AffMSE],
            seed: 0,
            output_dir: PathBuf::from("runs/texture-gan"),
            operator: OperatorSpec::Gaussian { size: 9, sigma: None, stride: 4, hr_shape: [32, 32], channels: 1 },
            fit: FitConfig { iterations: 20_000, ..Default::default() },
            textures: TextureParams::default(),
            image_dir: None,
            train_images: 256,
            test_images: 16,
            data_seed: 0,
            channels: 16,
            depth: 2,
            disc_channels: 16,
            iterations: 600,
            batch_size: 16,
            generator: OptimConfig { lr: 1e-3, ..Default::default() },
            discriminator: OptimConfig { lr: 1e-3, ..Default::default() },
            k_d: 1,
            instance_noise: InstanceNoiseSchedule::adaptive(0.3, 0.01, 2.0 * std::f64::consts::LN_2),
            log_every: 50,
        }
    }
}

impl TextureGanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("no variants requested".into()));
        }
        if !matches!(self.operator, OperatorSpec::Gaussian { .. }) {
            return Err(Error::Config("texture-gan needs a convolutional operator".into()));
        }
        self.fit.validate()?;
        self.textures.validate()?;
        self.generator.validate()?;
        self.discriminator.validate()?;
        self.instance_noise.validate()?;
        if self.train_images == 0 || self.test_images == 0 || self.channels == 0 || self.disc_channels == 0 {
            return Err(Error::Config("image counts and channel widths must be positive".into()));
        }
        if self.iterations == 0 || self.batch_size == 0 || self.log_every == 0 || self.k_d == 0 {
            return Err(Error::Config("iterations, batch_size, log_every and k_d must be positive".into()));
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextureTrainingRow {
    pub run_id: String,
    pub iteration: usize,
    pub loss: f64,
    pub d_loss: Option<f64>,
    pub sigma_instance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TextureRun {
    pub variant: TextureVariant,
    pub training: Vec<TextureTrainingRow>,
    pub metrics: Vec<MetricsRow>,
    pub samples: Tensor,
}

#[derive(Debug, Clone)]
pub struct TextureReport {
    pub runs: Vec<TextureRun>,
}

/// Trains one variant. Every logged evaluation overwrites the run's
/// checkpoint, so after a divergence the last stable one is kept on disk.
pub fn run_variant(cfg: &TextureGanConfig, ctx: &ImageContext, variant: TextureVariant) -> Result<TextureRun> {
    let run_id = format!("{}-seed{}", variant.name(), cfg.seed);
    let spec = upsampler_spec(ctx.lr_size(), ctx.scale(), cfg.channels, cfg.depth, rng::derive(cfg.seed, 1).gen());
    let mut gen = Generator::new(
        NetState::init(&spec)?,
        Constraint::Affine { proj: ctx.projector()?, trainable: false, checked: false },
    );
    let hr = ctx.down.in_shape()[0];
    let mut disc = match variant {
        TextureVariant::AffGAN => Some(NetState::init(&discriminator_spec(
            hr,
            cfg.disc_channels,
            rng::derive(cfg.seed, 2).gen(),
        ))?),
        TextureVariant::AffMSE => None,
    };
    let gen_opt = OptimConfig { batch_size: cfg.batch_size, iterations: cfg.iterations, ..cfg.generator.clone() };
    let gan_opt = GanOptim {
        generator: gen_opt.clone(),
        discriminator: OptimConfig {
            batch_size: cfg.batch_size,
            iterations: cfg.iterations * cfg.k_d,
            ..cfg.discriminator.clone()
        },
        k_d: cfg.k_d,
    };
    let ckpt_dir = cfg.output_dir.join("checkpoints");
    let mut noise = cfg.instance_noise.clone();
    let mut data = rng::derive(cfg.seed, 400);
    let (mut training, mut metrics) = (Vec::new(), Vec::new());
    for it in 0..=cfg.iterations {
        if it % cfg.log_every == 0 || it == cfg.iterations {
            let (row, _) = ctx.evaluate(&mut gen, &run_id, it)?;
            metrics.push(row);
            io::save_checkpoint(&ckpt_dir, &run_id, &gen.net, it, &[cfg.seed], BlobDtype::F64)?;
        }
        if it == cfg.iterations {
            break;
        }
        let diverged = |e: Error| match e {
            Error::Diverged(m) => Error::Diverged(format!("{run_id}: {m}")),
            e => Error::Diverged(format!("{run_id} at iteration {it}: {e}")),
        };
        let (x, y) = ctx.train.random_batch(cfg.batch_size, &mut data)?;
        let row = match disc.as_mut() {
            Some(d) => {
                let sigma = noise.sigma(it);
                let l = gan_step(&mut gen, d, &y, &x, sigma, &gan_opt, &mut data).map_err(diverged)?;
                noise.observe(l.d_loss);
                TextureTrainingRow { run_id: run_id.clone(), iteration: it, loss: l.g_loss, d_loss: Some(l.d_loss), sigma_instance: Some(sigma) }
            }
            None => {
                let l = pixel_step(&mut gen, &x, &y, PixelLoss::Mse, &gen_opt, None).map_err(diverged)?;
                TextureTrainingRow { run_id: run_id.clone(), iteration: it, loss: l, d_loss: None, sigma_instance: None }
            }
        };
        if !row.loss.is_finite() || row.d_loss.is_some_and(|d| !d.is_finite()) {
            return Err(Error::Diverged(format!("{run_id} at iteration {it}: non-finite loss")));
        }
        training.push(row);
    }
    let samples = gen.predict(&ctx.test.lr, None)?;
    Ok(TextureRun { variant, training, metrics, samples })
}

/// Writes `metrics.csv`, `training.csv`, one sample strip per variant
/// and the HR reference strip.
pub fn run(cfg: &TextureGanConfig) -> Result<TextureReport> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    io::write_json(&out.join("config.json"), cfg)?;
    let ctx = ImageContext::build(
        &cfg.operator,
        &cfg.fit,
        &cfg.textures,
        cfg.image_dir.as_deref(),
        cfg.train_images,
        cfg.test_images,
        cfg.data_seed,
    )?;
    let shown = ctx.test.len().min(8);
    let idx: Vec<usize> = (0..shown).collect();
    write_strip(&out.join("test_hr.pgm"), &ctx.test.batch(&idx)?.1)?;
    let mut runs = Vec::new();
    for &v in &cfg.variants {
        let r = run_variant(cfg, &ctx, v)?;
        let first: Vec<Vec<f64>> =
            (0..shown).map(|i| r.samples.sample(i).iter().map(|p| p.clamp(0.0, 1.0)).collect()).collect();
        write_strip(
            &out.join(format!("{}-seed{}.pgm", v.name(), cfg.seed)),
            &Tensor::stack(&r.samples.shape()[1..], &first)?,
        )?;
        runs.push(r);
    }
    let metrics: Vec<MetricsRow> = runs.iter().flat_map(|r| r.metrics.clone()).collect();
    let training: Vec<TextureTrainingRow> = runs.iter().flat_map(|r| r.training.clone()).collect();
    io::write_csv(&out.join("metrics.csv"), &metrics)?;
    io::write_csv(&out.join("training.csv"), &training)?;
    Ok(TextureReport { runs })
}
