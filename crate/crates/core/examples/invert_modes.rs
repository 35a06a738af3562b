//! One observed gradient, three attacks: pixel search (GI-x), latent
//! search in a generator fitted to the same image family (GI-z), and
//! latent search followed by generator-weight search (GI-z/w).

use gialab::flsim::make_dataset;
use gialab::inversion::{invert, InversionConfig, InversionTask, Mode};
use gialab::metrics::{psnr, ssim};
use gialab::models::{batch_gradient, fit_generator, ClassifierModel, FitConfig, GeneratorModel};
use gialab::ImageShape;

fn main() -> gialab::Result<()> {
    // The prior is fitted on a different draw of the family than the victim's.
    let prior_data = make_dataset("two-cluster", 64, 100)?;
    let fit = FitConfig { iterations: 300, ..FitConfig::default() };
    let (prior, _, fit_err) = fit_generator(&GeneratorModel::dec16(1), &prior_data.images, &fit)?;
    println!("generator fitted, reconstruction error {fit_err:.4}");

    let victim = make_dataset("two-cluster", 4, 7)?;
    let model = ClassifierModel::cnn4(3);
    let report = batch_gradient(&model, &victim.images[..1], &victim.labels[..1], false)?;
    let task = InversionTask::from_report(model, report)?;

    for mode in [Mode::X, Mode::Z, Mode::ZW] {
        let cfg = InversionConfig {
            mode,
            iterations: 200,
            z_iterations: 200,
            restarts: 2,
            lambda_tv: 0.0,
            ..InversionConfig::default()
        };
        let gen = mode.needs_generator().then_some(&prior);
        let est = invert(&task, &cfg, gen)?;
        let (x, t) = (&est.images[0], &victim.images[0]);
        println!(
            "{:>4}: final cost {:+.4}  PSNR {:6.2} dB  SSIM {:.3}",
            mode.as_str(),
            est.final_cost,
            psnr(x, t)?,
            ssim(x, t, ImageShape::GRAY16)?
        );
    }
    Ok(())
}
