//! How gradient sparsification and additive noise blunt a pixel-space
//! attack on one reported gradient.

use gialab::flsim::{apply_defense, make_dataset};
use gialab::inversion::{invert, InversionConfig, InversionTask, Mode};
use gialab::metrics::psnr;
use gialab::models::{batch_gradient, ClassifierModel, DefenseConfig};

fn main() -> gialab::Result<()> {
    let data = make_dataset("bars", 4, 1)?;
    let model = ClassifierModel::mlp3(0);
    let clean = batch_gradient(&model, &data.images[..1], &data.labels[..1], false)?;
    let cfg = InversionConfig { mode: Mode::X, iterations: 200, restarts: 1, ..InversionConfig::default() };

    let grid = [(0.0, 0.0), (0.9, 0.0), (0.99, 0.0), (0.0, 1e-3), (0.0, 1e-2)];
    for (sparsity, noise) in grid {
        let defense = DefenseConfig { sparsity, noise, batch_size: 1 };
        let report = apply_defense(&clean, &defense, 42);
        let zeros: usize = report.gradients.iter().map(|g| g.data().iter().filter(|v| **v == 0.0).count()).sum();
        let task = InversionTask::from_report(model.clone(), report)?;
        let est = invert(&task, &cfg, None)?;
        println!(
            "sparsity {sparsity:<4} noise {noise:<6} zeroed entries {zeros:>6}  PSNR {:6.2} dB",
            psnr(&est.images[0], &data.images[0])?
        );
    }
    Ok(())
}
