//! PSNR and SSIM of progressively degraded images, and the on-disk report
//! an attack run leaves behind.

use gialab::flsim::make_dataset;
use gialab::inversion::{CurvePoint, Phase};
use gialab::metrics::{psnr, score, ssim, write_outputs};
use gialab::{ImageShape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> gialab::Result<()> {
    let shape = ImageShape::GRAY16;
    let truth = make_dataset("blobs", 3, 0)?.images;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for sigma in [0.0, 0.01, 0.05, 0.2] {
        let mut noisy = truth[0].clone();
        for v in noisy.data_mut() {
            *v = (*v + sigma * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0);
        }
        println!("noise {sigma:<5} PSNR {:7.2} dB  SSIM {:.4}", psnr(&noisy, &truth[0])?, ssim(&noisy, &truth[0], shape)?);
    }

    let estimate: Vec<Tensor> = truth.iter().map(|t| t.map(|v| 0.8 * v + 0.1)).collect();
    let record = score(&estimate, &truth, shape, 0.0)?;
    let curve: Vec<CurvePoint> =
        (0..5).map(|i| CurvePoint { restart: 0, iteration: i, phase: Phase::X, cost: 1.0 / (1 + i) as f64 }).collect();
    let dir = std::env::temp_dir().join("gialab-quality-example");
    write_outputs(&record, &estimate, &curve, &truth, shape, &dir)?;
    println!("batch PSNR {:.2} (best {:.2}), report written to {}", record.psnr_mean, record.psnr_best, dir.display());
    Ok(())
}
