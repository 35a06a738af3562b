//! Reconstruction quality and run artifacts.

mod output;
mod quality;

pub(crate) use output::csv_err;
pub use output::{
    csv_writer, decode_pnm, encode_pnm, num, write_curve_csv, write_metrics_csv, write_outputs, METRICS_HEADER,
};
pub use quality::{aggregate, mse, psnr, score, ssim, MetricsRecord, PSNR_CAP, SSIM_WINDOW};
