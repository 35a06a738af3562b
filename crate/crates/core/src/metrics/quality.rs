use autodiff::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageShape;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.numel() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// Peak signal-to-noise ratio with unit peak, capped at [`PSNR_CAP`].
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / e).log10()).min(PSNR_CAP))
}

/// Mean SSIM over all 8x8 windows (stride 1) of every channel, with
/// uniform window weights and population moments.
pub fn ssim(a: &Tensor, b: &Tensor, shape: ImageShape) -> Result<f64> {
    same_shape(a, b)?;
    if a.numel() != shape.len() {
        return Err(Error::Shape(format!("{} values for image {shape:?}", a.numel())));
    }
    let w = SSIM_WINDOW;
    if shape.height < w || shape.width < w {
        return Err(Error::Shape(format!("image {}x{} smaller than the {w}x{w} window", shape.height, shape.width)));
    }
    let (da, db) = (a.data(), b.data());
    let n = (w * w) as f64;
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..shape.channels {
        for y0 in 0..=shape.height - w {
            for x0 in 0..=shape.width - w {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for y in y0..y0 + w {
                    for x in x0..x0 + w {
                        let i = shape.index(c, y, x);
                        let (u, v) = (da[i], db[i]);
                        sa += u;
                        sb += v;
                        saa += u * u;
                        sbb += v * v;
                        sab += u * v;
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let va = (saa / n - ma * ma).max(0.0);
                let vb = (sbb / n - mb * mb).max(0.0);
                let cov = sab / n - ma * mb;
                total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Per-image scores of one reconstructed batch, paired by index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub psnr_mean: f64,
    pub psnr_best: f64,
    pub ssim_mean: f64,
    pub ssim_best: f64,
    pub final_cost: f64,
    pub fingerprint: String,
    pub seed: u64,
}

fn mean_max(v: &[f64]) -> (f64, f64) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    // The mean of equal values can round above their max.
    (mean.min(max), max)
}

/// Batch mean and best of per-image PSNR and SSIM.
pub fn aggregate(psnrs: &[f64], ssims: &[f64], final_cost: f64) -> Result<MetricsRecord> {
    if psnrs.is_empty() || psnrs.len() != ssims.len() {
        return Err(Error::Shape(format!("{} PSNR and {} SSIM values", psnrs.len(), ssims.len())));
    }
    let (psnr_mean, psnr_best) = mean_max(psnrs);
    let (ssim_mean, ssim_best) = mean_max(ssims);
    Ok(MetricsRecord {
        psnr: psnrs.to_vec(),
        ssim: ssims.to_vec(),
        psnr_mean,
        psnr_best,
        ssim_mean,
        ssim_best,
        final_cost,
        fingerprint: String::new(),
        seed: 0,
    })
}

/// Scores `estimate[j]` against `truth[j]`.
pub fn score(estimate: &[Tensor], truth: &[Tensor], shape: ImageShape, final_cost: f64) -> Result<MetricsRecord> {
    if estimate.len() != truth.len() {
        return Err(Error::Shape(format!("{} estimates for {} truths", estimate.len(), truth.len())));
    }
    let p = estimate.iter().zip(truth).map(|(a, b)| psnr(a, b)).collect::<Result<Vec<_>>>()?;
    let s = estimate.iter().zip(truth).map(|(a, b)| ssim(a, b, shape)).collect::<Result<Vec<_>>>()?;
    aggregate(&p, &s, final_cost)
}
