//! MSE training of identical upsampling networks with and without the
//! affine projection layer.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::images::{upsampler_spec, write_strip, TextureParams, ToyImageDataset};
use crate::io;
use crate::linops::{fit_pseudoinverse, AffineProjector, DownsampleOperator, FitConfig, OperatorSpec, PseudoInverseOperator};
use crate::metrics::{lr_consistency, mse, psnr, ssim, MetricsRow};
use crate::nn::{NetState, OptimConfig};
use crate::objectives::{pixel_step, Constraint, Generator, PixelLoss};
use crate::rng;
use crate::{Error, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProjectionVariant {
    /// Pretrained `A⁺`, frozen.
    #[serde(rename = "MSE-fixedproj")]
    Fixed,
    /// Pretrained `A⁺`, trained with the network.
    #[serde(rename = "MSE-trainproj")]
    Trainable,
    /// Randomly initialised `A⁺`, trained with the network.
    #[serde(rename = "MSE-randproj")]
    Random,
    #[serde(rename = "MSE-noproj")]
    NoProjection,
}

impl ProjectionVariant {
    pub const ALL: [ProjectionVariant; 4] =
        [ProjectionVariant::Fixed, ProjectionVariant::Trainable, ProjectionVariant::Random, ProjectionVariant::NoProjection];

    pub fn name(self) -> &'static str {
        match self {
            ProjectionVariant::Fixed => "MSE-fixedproj",
            ProjectionVariant::Trainable => "MSE-trainproj",
            ProjectionVariant::Random => "MSE-randproj",
            ProjectionVariant::NoProjection => "MSE-noproj",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MseAffineConfig {
    pub variants: Vec<ProjectionVariant>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub operator: OperatorSpec,
    pub fit: FitConfig,
    pub textures: TextureParams,
    /// Directory of `.pgm` images used instead of procedural textures.
    pub image_dir: Option<PathBuf>,
    pub train_images: usize,
    pub test_images: usize,
    pub data_seed: u64,
    pub channels: usize,
    pub depth: usize,
    pub optim: OptimConfig,
    /// Entry scale of the random `A⁺` initialisation.
    pub random_scale: f64,
    pub log_every: usize,
}

impl Default for MseAffineConfig {
    fn default() -> Self {
        MseAffineConfig {
            variants: ProjectionVariant::ALL.to_vec(),
            seeds: vec![0],
            output_dir: PathBuf::from("runs/mse-affine"),
            operator: OperatorSpec::Gaussian { size: 9, sigma: None, stride: 4, hr_shape: [32, 32], channels: 1 },
            fit: FitConfig { iterations: 20_000, ..Default::default() },
            textures: TextureParams::default(),
            image_dir: None,
            train_images: 512,
            test_images: 32,
            data_seed: 0,
            channels: 32,
            depth: 2,
            optim: OptimConfig { batch_size: 16, iterations: 2000, ..Default::default() },
            random_scale: 0.1,
            log_every: 100,
        }
    }
}

impl MseAffineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(Error::Config("no variants requested".into()));
        }
        super::swissroll::check_seeds(&self.seeds)?;
        if !matches!(self.operator, OperatorSpec::Gaussian { .. }) {
            return Err(Error::Config("mse-affine needs a convolutional operator".into()));
        }
        self.fit.validate()?;
        self.textures.validate()?;
        self.optim.validate()?;
        if self.train_images == 0 || self.test_images == 0 || self.channels == 0 || self.log_every == 0 {
            return Err(Error::Config("image counts, channels and log_every must be positive".into()));
        }
        Ok(())
    }
}

/// Operator, fitted `A⁺` and the train/test images shared by all runs.
pub struct ImageContext {
    pub down: DownsampleOperator,
    pub pinv: PseudoInverseOperator,
    pub train: ToyImageDataset,
    pub test: ToyImageDataset,
}

impl ImageContext {
    pub fn build(
        operator: &OperatorSpec,
        fit: &FitConfig,
        textures: &TextureParams,
        image_dir: Option<&std::path::Path>,
        n_train: usize,
        n_test: usize,
        seed: u64,
    ) -> Result<ImageContext> {
        let down = operator.build()?;
        let size = down.in_shape()[0];
        if down.in_shape()[1] != size || textures.size != size {
            return Err(Error::Config(format!(
                "texture size {} must match the square operator input {:?}",
                textures.size,
                down.in_shape()
            )));
        }
        let pinv = fit_pseudoinverse(&down, fit)?;
        let (train, test) = match image_dir {
            Some(dir) => {
                let all = ToyImageDataset::from_dir(dir, size, &down)?;
                if all.len() < 2 {
                    return Err(Error::Config("an image directory needs at least two images".into()));
                }
                let n_test = n_test.min(all.len() / 2);
                let idx: Vec<usize> = (0..all.len()).collect();
                let (te, tr) = idx.split_at(n_test);
                let split = |ix: &[usize]| -> Result<ToyImageDataset> {
                    let (lr, hr) = all.batch(ix)?;
                    Ok(ToyImageDataset { hr, lr })
                };
                (split(tr)?, split(te)?)
            }
            None => (
                ToyImageDataset::procedural(textures, n_train, seed, &down)?,
                ToyImageDataset::procedural(textures, n_test, seed.wrapping_add(1), &down)?,
            ),
        };
        Ok(ImageContext { down, pinv, train, test })
    }

    pub fn projector(&self) -> Result<AffineProjector> {
        AffineProjector::new(self.down.clone(), self.pinv.clone())
    }

    pub fn lr_size(&self) -> usize {
        self.down.out_shape()[0]
    }

    pub fn scale(&self) -> usize {
        self.down.stride()[0]
    }

    /// Metrics of `gen` on the test set.
    pub fn evaluate(&self, gen: &mut Generator, run_id: &str, iteration: usize) -> Result<(MetricsRow, Tensor)> {
        let y = gen.predict(&self.test.lr, None)?;
        Ok((
            MetricsRow {
                run_id: run_id.into(),
                iteration,
                psnr: psnr(&y.map(|v| v.clamp(0.0, 1.0)), &self.test.hr, 1.0)?,
                ssim: ssim(&y, &self.test.hr, 1.0)?,
                lr_consistency: lr_consistency(&self.test.lr, &y, &self.down)?,
                hr_mse: mse(&y, &self.test.hr)?,
            },
            y,
        ))
    }
}

pub fn run_variant(
    cfg: &MseAffineConfig,
    ctx: &ImageContext,
    variant: ProjectionVariant,
    seed: u64,
) -> Result<(Vec<MetricsRow>, Tensor)> {
    let spec = upsampler_spec(ctx.lr_size(), ctx.scale(), cfg.channels, cfg.depth, seed);
    let net = NetState::init(&spec)?;
    let constraint = match variant {
        ProjectionVariant::Fixed => Constraint::Affine { proj: ctx.projector()?, trainable: false, checked: false },
        ProjectionVariant::Trainable => Constraint::Affine { proj: ctx.projector()?, trainable: true, checked: false },
        ProjectionVariant::Random => {
            let up = PseudoInverseOperator::random_for(&ctx.down, cfg.fit.kernel_size, cfg.random_scale, seed);
            Constraint::Affine { proj: AffineProjector::new(ctx.down.clone(), up)?, trainable: true, checked: false }
        }
        ProjectionVariant::NoProjection => Constraint::None,
    };
    let mut gen = Generator::new(net, constraint);
    let run_id = format!("{}-seed{seed}", variant.name());
    let mut data = rng::derive(seed, 300);
    let mut rows = Vec::new();
    let iters = cfg.optim.iterations;
    for it in 0..=iters {
        if it % cfg.log_every == 0 || it == iters {
            rows.push(ctx.evaluate(&mut gen, &run_id, it)?.0);
        }
        if it == iters {
            break;
        }
        let (x, y) = ctx.train.random_batch(cfg.optim.batch_size, &mut data)?;
        let loss = pixel_step(&mut gen, &x, &y, PixelLoss::Mse, &cfg.optim, None)
            .map_err(|e| Error::Diverged(format!("{run_id} at iteration {it}: {e}")))?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("{run_id} at iteration {it}: non-finite loss")));
        }
    }
    let out = gen.predict(&ctx.test.lr, None)?;
    Ok((rows, out))
}

/// Trains every variant for every seed and writes `metrics.csv` plus a
/// strip of test reconstructions per run.
pub fn run(cfg: &MseAffineConfig) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ctx = ImageContext::build(
        &cfg.operator,
        &cfg.fit,
        &cfg.textures,
        cfg.image_dir.as_deref(),
        cfg.train_images,
        cfg.test_images,
        cfg.data_seed,
    )?;
    let jobs: Vec<(ProjectionVariant, u64)> =
        cfg.variants.iter().flat_map(|&v| cfg.seeds.iter().map(move |&s| (v, s))).collect();
    let results: Vec<Result<(Vec<MetricsRow>, Tensor)>> =
        jobs.par_iter().map(|&(v, s)| run_variant(cfg, &ctx, v, s)).collect();
    let shown = ctx.test.len().min(8);
    let idx: Vec<usize> = (0..shown).collect();
    write_strip(&out.join("test_hr.pgm"), &ctx.test.batch(&idx)?.1)?;
    let mut all = Vec::new();
    for (&(v, s), r) in jobs.iter().zip(results) {
        let (rows, y) = r?;
        let first: Vec<Vec<f64>> = (0..shown).map(|i| y.sample(i).iter().map(|p| p.clamp(0.0, 1.0)).collect()).collect();
        write_strip(&out.join(format!("{}-seed{s}.pgm", v.name())), &Tensor::stack(&y.shape()[1..], &first)?)?;
        all.extend(rows);
    }
    io::write_csv(&out.join("metrics.csv"), &all)?;
    io::write_json(&out.join("config.json"), cfg)?;
    Ok(all)
}
