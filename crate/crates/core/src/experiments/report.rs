//! Read-only summaries of finished run directories.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::swissroll;
use super::texture_gan::TextureTrainingRow;
use crate::io::{self, OperatorManifest};
use crate::metrics::MetricsRow;
use crate::{Error, Result};

/// Fraction of logged discriminator losses inside `[lo, hi]`.
pub fn d_loss_band_fraction(rows: &[TextureTrainingRow], lo: f64, hi: f64) -> Option<f64> {
    let d: Vec<f64> = rows.iter().filter_map(|r| r.d_loss).collect();
    if d.is_empty() {
        return None;
    }
    Some(d.iter().filter(|v| (lo..=hi).contains(*v)).count() as f64 / d.len() as f64)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{v:.3e}"))
}

/// Describes every recognised artifact in `dir`. Nothing is written.
pub fn summarise(dir: &Path) -> Result<String> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("{} is not a directory", dir.display())));
    }
    let mut out = String::new();
    if dir.join("table.csv").exists() {
        let rep = swissroll::load_report(dir)?;
        writeln!(out, "{:<12} {:>18} {:>24} {:>7}", "method", "cross-entropy", "consistency", "failed").unwrap();
        for r in &rep.table {
            writeln!(
                out,
                "{:<12} {:>9.3} ± {:<6.3} {:>11} ± {:<10} {:>3}/{}",
                r.method,
                r.cross_entropy_mean,
                r.cross_entropy_std,
                fmt_opt(r.consistency_mean),
                fmt_opt(r.consistency_std),
                r.failed,
                r.trials
            )
            .unwrap();
        }
    }
    if dir.join("metrics.csv").exists() {
        let rows: Vec<MetricsRow> = io::read_csv(&dir.join("metrics.csv"))?;
        let mut runs: BTreeMap<&str, (&MetricsRow, &MetricsRow)> = BTreeMap::new();
        for r in &rows {
            runs.entry(&r.run_id).and_modify(|e| e.1 = r).or_insert((r, r));
        }
        writeln!(out, "{:<22} {:>6} {:>10} {:>10} {:>8} {:>10} {:>12}", "run", "iter", "mse@0", "mse", "psnr", "ssim", "lr-consist.")
            .unwrap();
        for (id, (first, last)) in runs {
            writeln!(
                out,
                "{:<22} {:>6} {:>10.5} {:>10.5} {:>8.2} {:>10.4} {:>12.3e}",
                id, last.iteration, first.hr_mse, last.hr_mse, last.psnr, last.ssim, last.lr_consistency
            )
            .unwrap();
        }
    }
    if dir.join("training.csv").exists() {
        let rows: Vec<TextureTrainingRow> = io::read_csv(&dir.join("training.csv"))?;
        if let Some(f) = d_loss_band_fraction(&rows, 0.5, 2.5) {
            writeln!(out, "discriminator loss in [0.5, 2.5] for {:.1}% of iterations", 100.0 * f).unwrap();
        }
    }
    let mut entries: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    entries.sort();
    for p in entries {
        if let Ok(m) = io::read_json::<OperatorManifest>(&p) {
            writeln!(
                out,
                "operator {}: {}× up-sampling, kernel {}, ℓ1+ℓ2 = {}",
                p.file_name().unwrap().to_string_lossy(),
                m.stride[0],
                m.kernel_size,
                fmt_opt(m.fit_loss)
            )
            .unwrap();
        }
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no run artifacts found in {}", dir.display())));
    }
    Ok(out)
}
