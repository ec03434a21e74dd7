use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;

use affmap::experiments::{fit_pinv, mse_affine, report, swissroll, texture_gan};
use affmap::{io, Error, Result};

#[derive(Parser)]
#[command(name = "affmap", version, about = "Amortised MAP inference for super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the up-sampling pseudoinverse of a downsampling operator.
    FitPinv { config: PathBuf },
    /// Swiss-roll table: every variant over every seed, plus the oracles.
    Swissroll { config: PathBuf },
    /// MSE networks with and without the affine projection.
    MseAffine { config: PathBuf },
    /// Smoke-scale AffGAN vs AffMSE on procedural textures.
    TextureGan { config: PathBuf },
    /// Summarise a finished run directory.
    Report { dir: PathBuf },
}

fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    io::read_json(path).map_err(|e| match e {
        Error::Io { .. } => Error::Config(e.to_string()),
        e => e,
    })
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Diverged(_) | Error::NonFinite { .. } => 3,
        _ => 1,
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("AFFMAP_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("AFFMAP_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| Error::Config(e.to_string()))
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::FitPinv { config } => {
            let cfg: fit_pinv::FitPinvConfig = load(&config)?;
            let r = fit_pinv::run(&cfg)?;
            println!("wrote {}", r.manifest.display());
            println!("l1+l2 = {:.6e} (stored as {:?}; {:.6e} before rounding)", r.loss, cfg.dtype, r.loss_full_precision);
            if r.weights.len() <= 16 {
                println!("B = {:?}", r.weights);
            }
        }
        Command::Swissroll { config } => {
            let cfg: swissroll::SwissrollConfig = load(&config)?;
            swissroll::run(&cfg)?;
            print!("{}", report::summarise(&cfg.output_dir)?);
        }
        Command::MseAffine { config } => {
            let cfg: mse_affine::MseAffineConfig = load(&config)?;
            mse_affine::run(&cfg)?;
            print!("{}", report::summarise(&cfg.output_dir)?);
        }
        Command::TextureGan { config } => {
            let cfg: texture_gan::TextureGanConfig = load(&config)?;
            texture_gan::run(&cfg)?;
            print!("{}", report::summarise(&cfg.output_dir)?);
        }
        Command::Report { dir } => print!("{}", report::summarise(&dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| execute(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
