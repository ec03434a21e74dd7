//! Procedural toy images and the small convolutional networks trained on
//! them.

use std::path::{Path, PathBuf};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::io;
use crate::linops::DownsampleOperator;
use crate::nn::{LayerSpec, NetSpec};
use crate::rng::{self, Rng};
use crate::{Error, Result, Tensor};

/// Sums of random low-frequency cosines, rescaled to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TextureParams {
    pub size: usize,
    /// Largest integer frequency per axis, in cycles per image.
    pub max_freq: usize,
    pub components: usize,
}

impl Default for TextureParams {
    fn default() -> Self {
        TextureParams { size: 32, max_freq: 6, components: 16 }
    }
}

impl TextureParams {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || self.max_freq == 0 || self.components == 0 {
            return Err(Error::Config("texture size, frequency and component count must be positive".into()));
        }
        Ok(())
    }
}

pub fn texture(p: &TextureParams, rng: &mut Rng) -> Vec<f64> {
    let n = p.size;
    let f = p.max_freq as i64;
    let mut img = vec![0.0; n * n];
    for _ in 0..p.components {
        let (u, v) = loop {
            let uv = (rng.gen_range(-f..=f), rng.gen_range(-f..=f));
            if uv != (0, 0) {
                break uv;
            }
        };
        let amp = rng.gen_range(0.5..1.0) / ((u * u + v * v) as f64).sqrt();
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let (wu, wv) = (std::f64::consts::TAU * u as f64 / n as f64, std::f64::consts::TAU * v as f64 / n as f64);
        for i in 0..n {
            for j in 0..n {
                img[i * n + j] += amp * (wu * i as f64 + wv * j as f64 + phase).cos();
            }
        }
    }
    let lo = img.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = img.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = (hi - lo).max(1e-12);
    img.iter().map(|v| (v - lo) / range).collect()
}

/// High-resolution images with their observations `x = A y`.
#[derive(Debug, Clone)]
pub struct ToyImageDataset {
    pub hr: Tensor,
    pub lr: Tensor,
}

impl ToyImageDataset {
    pub fn procedural(p: &TextureParams, n: usize, seed: u64, down: &DownsampleOperator) -> Result<Self> {
        p.validate()?;
        let mut rng = rng::derive(seed, 0);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| texture(p, &mut rng)).collect();
        Self::from_rows(p.size, &rows, down)
    }

    /// Top-left `size × size` crops of every `.pgm` file in `dir`, sorted
    /// by name.
    pub fn from_dir(dir: &Path, size: usize, down: &DownsampleOperator) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "pgm"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Config(format!("no .pgm images in {}", dir.display())));
        }
        let mut rows = Vec::with_capacity(files.len());
        for f in &files {
            let (w, h, px) = io::read_pgm(f)?;
            if w < size || h < size {
                return Err(Error::Config(format!("{} is smaller than {size}×{size}", f.display())));
            }
            rows.push((0..size).flat_map(|i| px[i * w..i * w + size].to_vec()).collect());
        }
        Self::from_rows(size, &rows, down)
    }

    fn from_rows(size: usize, rows: &[Vec<f64>], down: &DownsampleOperator) -> Result<Self> {
        let hr = Tensor::stack(&[1, size, size], rows)?;
        let lr = down.apply(&hr)?;
        Ok(ToyImageDataset { hr, lr })
    }

    pub fn len(&self) -> usize {
        self.hr.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(lr, hr)` minibatch of the given sample indices.
    pub fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let pick = |t: &Tensor| Tensor::stack(&t.shape()[1..], &idx.iter().map(|&i| t.sample(i).to_vec()).collect::<Vec<_>>());
        Ok((pick(&self.lr)?, pick(&self.hr)?))
    }

    pub fn random_batch(&self, n: usize, rng: &mut Rng) -> Result<(Tensor, Tensor)> {
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..self.len())).collect();
        self.batch(&idx)
    }
}

/// LR-to-HR network: convolutions at LR resolution, then a sub-pixel
/// shuffle by `scale`.
pub fn upsampler_spec(lr_size: usize, scale: usize, channels: usize, depth: usize, seed: u64) -> NetSpec {
    let mut layers = Vec::new();
    let mut c = 1;
    for _ in 0..depth {
        layers.push(LayerSpec::Conv2d { in_ch: c, out_ch: channels, k: 3, stride: 1 });
        layers.push(LayerSpec::Relu);
        c = channels;
    }
    layers.push(LayerSpec::Conv2d { in_ch: c, out_ch: scale * scale, k: 3, stride: 1 });
    layers.push(LayerSpec::PixelShuffle { r: scale });
    NetSpec { input_shape: vec![1, lr_size, lr_size], layers, seed }
}

/// HR discriminator: stride-2 convolutions, a dense read-out and a sigmoid.
pub fn discriminator_spec(size: usize, channels: usize, seed: u64) -> NetSpec {
    let mut layers = Vec::new();
    let (mut c, mut s) = (1, size);
    for _ in 0..3 {
        layers.push(LayerSpec::Conv2d { in_ch: c, out_ch: channels, k: 3, stride: 2 });
        layers.push(LayerSpec::Relu);
        c = channels;
        s = (s - 1) / 2 + 1;
    }
    layers.push(LayerSpec::Dense { inp: c * s * s, out: 1 });
    layers.push(LayerSpec::Sigmoid);
    NetSpec { input_shape: vec![1, size, size], layers, seed }
}

/// Tiles a `[n, 1, h, w]` batch side by side into one greyscale image.
pub fn write_strip(path: &Path, images: &Tensor) -> Result<()> {
    let s = images.shape();
    let (n, h, w) = (s[0], s[s.len() - 2], s[s.len() - 1]);
    let mut px = vec![0.0; n * h * w];
    for k in 0..n {
        let img = images.sample(k);
        for i in 0..h {
            px[i * n * w + k * w..i * n * w + (k + 1) * w].copy_from_slice(&img[i * w..(i + 1) * w]);
        }
    }
    io::write_pgm(path, n * w, h, &px)
}
