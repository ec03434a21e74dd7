use affmap::experiments::report::d_loss_band_fraction;
use affmap::experiments::texture_gan::{self, TextureGanConfig, TextureVariant};
use affmap::io;
use affmap::linops::FitConfig;
use affmap::metrics::lr_consistency;
use affmap::nn::OptimConfig;
use affmap::Error;

#[test]
fn smoke_run_is_consistent_stable_and_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TextureGanConfig { output_dir: dir.path().to_path_buf(), ..Default::default() };
    let rep = texture_gan::run(&cfg).unwrap();
    let run = |v| rep.runs.iter().find(|r| r.variant == v).unwrap();
    let (gan, mse) = (run(TextureVariant::AffGAN), run(TextureVariant::AffMSE));

    let down = cfg.operator.build().unwrap();
    let test = affmap::experiments::images::ToyImageDataset::procedural(&cfg.textures, cfg.test_images, cfg.data_seed + 1, &down).unwrap();
    assert!(lr_consistency(&test.lr, &gan.samples, &down).unwrap() <= 1e-6);
    assert!(gan.metrics.iter().all(|m| m.lr_consistency <= 1e-6));

    let band = d_loss_band_fraction(&gan.training, 0.5, 2.5).unwrap();
    assert!(band >= 0.8, "d_loss in band for only {band}");

    let final_psnr = |r: &texture_gan::TextureRun| r.metrics.last().unwrap().psnr;
    assert!(final_psnr(mse) > final_psnr(gan));

    for f in ["metrics.csv", "training.csv", "AffGAN-seed0.pgm", "AffMSE-seed0.pgm", "test_hr.pgm"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
}

#[test]
fn divergence_keeps_the_last_stable_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TextureGanConfig {
        variants: vec![TextureVariant::AffGAN],
        output_dir: dir.path().to_path_buf(),
        fit: FitConfig { iterations: 100, ..Default::default() },
        train_images: 16,
        test_images: 2,
        channels: 4,
        disc_channels: 4,
        iterations: 50,
        batch_size: 4,
        log_every: 1000,
        generator: OptimConfig { lr: 1e300, ..Default::default() },
        ..Default::default()
    };
    let err = texture_gan::run(&cfg).unwrap_err();
    assert!(matches!(err, Error::Diverged(_)), "{err}");
    let (state, manifest) = io::load_checkpoint(&dir.path().join("checkpoints/AffGAN-seed0.json")).unwrap();
    assert_eq!(manifest.iteration, 0);
    assert!(state.flat_params().iter().all(|v| v.is_finite()));
}
