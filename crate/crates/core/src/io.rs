//! Files on disk: JSON manifests with little-endian float blobs, CSV
//! tables and binary PGM/PPM images.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::linops::{DownsampleOperator, FitConfig, OperatorSpec, PseudoInverseOperator};
use crate::nn::{NetSpec, NetState};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlobDtype {
    F32,
    F64,
}

pub fn write_blob(path: &Path, values: &[f64], dtype: BlobDtype) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 8);
    for v in values {
        match dtype {
            BlobDtype::F32 => bytes.extend_from_slice(&(*v as f32).to_le_bytes()),
            BlobDtype::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_blob(path: &Path, dtype: BlobDtype, len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let width = match dtype {
        BlobDtype::F32 => 4,
        BlobDtype::F64 => 8,
    };
    if bytes.len() != len * width {
        return Err(Error::ShapeMismatch { context: "float blob", expected: vec![len * width], actual: vec![bytes.len()] });
    }
    Ok(bytes
        .chunks_exact(width)
        .map(|c| match dtype {
            BlobDtype::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
            BlobDtype::F64 => f64::from_le_bytes(c.try_into().unwrap()),
        })
        .collect())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a JSON file; malformed or unknown content is a config error.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e.to_string()))
}

fn sibling(manifest: &Path, name: &str) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OperatorManifest {
    pub down: OperatorSpec,
    pub kernel_size: usize,
    pub stride: [usize; 2],
    pub lr_shape: Vec<usize>,
    pub hr_shape: Vec<usize>,
    pub channels: usize,
    pub seed: Option<u64>,
    pub fit_loss: Option<f64>,
    pub fit_config: Option<FitConfig>,
    pub blob: String,
    pub dtype: BlobDtype,
    pub len: usize,
}

/// Writes `<dir>/<name>.json` and `<dir>/<name>.bin`; returns the manifest
/// path.
pub fn save_operator(dir: &Path, name: &str, down: &OperatorSpec, up: &PseudoInverseOperator, dtype: BlobDtype) -> Result<PathBuf> {
    let op = down.build()?;
    let blob = format!("{name}.bin");
    let manifest = OperatorManifest {
        down: down.clone(),
        kernel_size: up.kernel_size(),
        stride: up.stride(),
        lr_shape: op.out_shape().to_vec(),
        hr_shape: op.in_shape().to_vec(),
        channels: op.channels(),
        seed: up.fit_config.as_ref().map(|c| c.seed),
        fit_loss: up.fit_loss,
        fit_config: up.fit_config.clone(),
        blob: blob.clone(),
        dtype,
        len: up.weights().len(),
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_blob(&dir.join(&blob), up.weights(), dtype)?;
    let path = dir.join(format!("{name}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn load_operator(manifest_path: &Path) -> Result<(DownsampleOperator, PseudoInverseOperator)> {
    let m: OperatorManifest = read_json(manifest_path)?;
    let down = m.down.build()?;
    let weights = read_blob(&sibling(manifest_path, &m.blob), m.dtype, m.len)?;
    let mut up = PseudoInverseOperator::from_weights(&down, m.kernel_size, weights)?;
    up.fit_loss = m.fit_loss;
    up.fit_config = m.fit_config;
    Ok((down, up))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub spec: NetSpec,
    pub iteration: usize,
    pub seeds: Vec<u64>,
    pub blob: String,
    pub dtype: BlobDtype,
    pub param_lens: Vec<usize>,
    /// Per-layer channel counts of stored batch-norm statistics.
    pub running_lens: Vec<usize>,
}

/// Parameters followed by batch-norm running means and variances.
pub fn save_checkpoint(dir: &Path, name: &str, state: &NetState, iteration: usize, seeds: &[u64], dtype: BlobDtype) -> Result<PathBuf> {
    let mut values = state.flat_params();
    let mut running_lens = Vec::new();
    for r in &state.running {
        match r {
            Some((m, v)) => {
                values.extend_from_slice(m);
                values.extend_from_slice(v);
                running_lens.push(m.len());
            }
            None => running_lens.push(0),
        }
    }
    let blob = format!("{name}.bin");
    let manifest = CheckpointManifest {
        spec: state.spec.clone(),
        iteration,
        seeds: seeds.to_vec(),
        blob: blob.clone(),
        dtype,
        param_lens: state.params.iter().map(Vec::len).collect(),
        running_lens,
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_blob(&dir.join(&blob), &values, dtype)?;
    let path = dir.join(format!("{name}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

pub fn load_checkpoint(manifest_path: &Path) -> Result<(NetState, CheckpointManifest)> {
    let m: CheckpointManifest = read_json(manifest_path)?;
    let mut state = NetState::init(&m.spec)?;
    let n_params: usize = m.param_lens.iter().sum();
    let n_running: usize = m.running_lens.iter().map(|c| 2 * c).sum();
    let values = read_blob(&sibling(manifest_path, &m.blob), m.dtype, n_params + n_running)?;
    state.set_flat_params(&values[..n_params])?;
    let mut off = n_params;
    for (slot, &c) in state.running.iter_mut().zip(&m.running_lens) {
        if c > 0 {
            *slot = Some((values[off..off + c].to_vec(), values[off + c..off + 2 * c].to_vec()));
            off += 2 * c;
        }
    }
    Ok((state, m))
}

fn quantise(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// 8-bit binary greyscale image from values in `[0, 1]`.
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[f64]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::ShapeMismatch { context: "PGM pixels", expected: vec![height, width], actual: vec![pixels.len()] });
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(pixels.iter().map(|&v| quantise(v)));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// 8-bit binary colour image from planar `[3, h, w]` values in `[0, 1]`.
pub fn write_ppm(path: &Path, width: usize, height: usize, planar: &[f64]) -> Result<()> {
    let n = width * height;
    if planar.len() != 3 * n {
        return Err(Error::ShapeMismatch { context: "PPM pixels", expected: vec![3, height, width], actual: vec![planar.len()] });
    }
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    for i in 0..n {
        for c in 0..3 {
            bytes.push(quantise(planar[c * n + i]));
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit P5 image as `(width, height, values in [0, 1])`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Config(format!("{}: {msg}", path.display()));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max == 0 || max > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    let data = &bytes[i + 1..];
    if data.len() < w * h {
        return Err(bad("truncated pixel data"));
    }
    Ok((w, h, data[..w * h].iter().map(|&b| b as f64 / max as f64).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linops::fit_pseudoinverse;

    #[test]
    fn blobs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.bin");
        let v = vec![1.0, -2.5, 1e-3, 0.1];
        write_blob(&p, &v, BlobDtype::F64).unwrap();
        assert_eq!(read_blob(&p, BlobDtype::F64, 4).unwrap(), v);
        write_blob(&p, &v, BlobDtype::F32).unwrap();
        assert_eq!(fs::read(&p).unwrap().len(), 16);
        let back = read_blob(&p, BlobDtype::F32, 4).unwrap();
        assert_eq!(back[3], 0.1f32 as f64);
        assert!(read_blob(&p, BlobDtype::F32, 5).is_err());
    }

    #[test]
    fn operator_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = OperatorSpec::Matrix { rows: 1, cols: 2, weights: vec![0.5, 0.5] };
        let down = spec.build().unwrap();
        let up = fit_pseudoinverse(&down, &FitConfig { iterations: 10, ..Default::default() }).unwrap();
        let path = save_operator(dir.path(), "toy", &spec, &up, BlobDtype::F64).unwrap();
        let (d2, u2) = load_operator(&path).unwrap();
        assert_eq!(d2, down);
        assert_eq!(u2, up);
    }

    #[test]
    fn checkpoint_round_trip() {
        use crate::nn::LayerSpec;
        let dir = tempfile::tempdir().unwrap();
        let spec = NetSpec {
            input_shape: vec![3],
            layers: vec![LayerSpec::Dense { inp: 3, out: 4 }, LayerSpec::BatchNorm { ch: 4 }],
            seed: 2,
        };
        let mut state = NetState::init(&spec).unwrap();
        state.running[1] = Some((vec![0.1, 0.2, 0.3, 0.4], vec![1.0, 2.0, 3.0, 4.0]));
        let path = save_checkpoint(dir.path(), "net", &state, 7, &[2], BlobDtype::F64).unwrap();
        let (back, m) = load_checkpoint(&path).unwrap();
        assert_eq!(back.params, state.params);
        assert_eq!(back.running, state.running);
        assert_eq!(m.iteration, 7);
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let px: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        write_pgm(&p, 4, 3, &px).unwrap();
        let (w, h, back) = read_pgm(&p).unwrap();
        assert_eq!((w, h), (4, 3));
        for (a, b) in px.iter().zip(&back) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        let ppm = dir.path().join("a.ppm");
        write_ppm(&ppm, 2, 2, &[0.0; 12]).unwrap();
        assert!(fs::read(&ppm).unwrap().starts_with(b"P6\n2 2\n255\n"));
    }

    #[test]
    fn unknown_manifest_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        fs::write(&p, r#"{"spec": {"input_shape": [1], "layers": [], "seed": 0}, "typo": 1}"#).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Config(_))));
    }
}
