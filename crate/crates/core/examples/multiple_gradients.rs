//! The same batch observed through several gradients, each taken at a
//! different model initialization, inverted jointly. More observations
//! constrain the images more tightly.

use gialab::flsim::make_dataset;
use gialab::inversion::{invert_multi, InversionConfig, InversionTask, Mode};
use gialab::metrics::psnr;
use gialab::models::{batch_gradient, ClassifierModel};

fn main() -> gialab::Result<()> {
    let data = make_dataset("blobs", 4, 2)?;
    let (images, labels) = (&data.images[..1], &data.labels[..1]);
    let cfg = InversionConfig { mode: Mode::X, iterations: 200, restarts: 2, ..InversionConfig::default() };
    for count in [1u64, 2, 4, 8] {
        let tasks = (0..count)
            .map(|s| {
                let model = ClassifierModel::cnn4(1000 + s);
                let report = batch_gradient(&model, images, labels, false)?;
                InversionTask::from_report(model, report)
            })
            .collect::<gialab::Result<Vec<_>>>()?;
        let est = invert_multi(&tasks, &cfg, None)?;
        println!("T = {count}: PSNR {:6.2} dB  summed cost {:+.4}", psnr(&est.images[0], &images[0])?, est.final_cost);
    }
    Ok(())
}
