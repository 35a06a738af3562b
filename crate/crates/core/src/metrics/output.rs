use std::fs;
use std::path::Path;

use autodiff::Tensor;

use super::quality::MetricsRecord;
use crate::error::{Error, Result};
use crate::image::ImageShape;
use crate::inversion::CurvePoint;

/// A CSV writer with LF line endings.
pub fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

/// Fixed-precision number formatting used in every CSV.
pub fn num(v: f64) -> String {
    format!("{v:.6}")
}

/// Header of `metrics.csv`.
pub const METRICS_HEADER: [&str; 7] = ["row", "psnr", "ssim", "psnr_best", "ssim_best", "lpips", "final_cost"];

pub fn write_metrics_csv(record: &MetricsRecord, path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let e = |err| csv_err(path, err);
    w.write_record(METRICS_HEADER).map_err(e)?;
    for (j, (p, s)) in record.psnr.iter().zip(&record.ssim).enumerate() {
        w.write_record([j.to_string(), num(*p), num(*s), String::new(), String::new(), "n/a".into(), String::new()])
            .map_err(e)?;
    }
    w.write_record([
        "batch".to_string(),
        num(record.psnr_mean),
        num(record.ssim_mean),
        num(record.psnr_best),
        num(record.ssim_best),
        "n/a".into(),
        num(record.final_cost),
    ])
    .map_err(e)?;
    w.flush().map_err(|io| Error::io(path, io))
}

pub fn write_curve_csv(curve: &[CurvePoint], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let e = |err| csv_err(path, err);
    w.write_record(["restart", "iteration", "phase", "cost"]).map_err(e)?;
    for p in curve {
        w.write_record([p.restart.to_string(), p.iteration.to_string(), p.phase.to_string(), num(p.cost)])
            .map_err(e)?;
    }
    w.flush().map_err(|io| Error::io(path, io))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Binary PGM (one channel) or PPM (three channels) of `images` placed side
/// by side.
pub fn encode_pnm(images: &[&Tensor], shape: ImageShape) -> Result<Vec<u8>> {
    let magic = match shape.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Unsupported(format!("cannot encode {c}-channel images"))),
    };
    for im in images {
        if im.numel() != shape.len() {
            return Err(Error::Shape(format!("{} values for image {shape:?}", im.numel())));
        }
    }
    let width = shape.width * images.len();
    let mut out = format!("{magic}\n{width} {}\n255\n", shape.height).into_bytes();
    for y in 0..shape.height {
        for im in images {
            for x in 0..shape.width {
                for c in 0..shape.channels {
                    out.push(quantize(im.data()[shape.index(c, y, x)]));
                }
            }
        }
    }
    Ok(out)
}

/// Decodes a binary PGM/PPM into `(shape, values in [0, 1])`.
pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<(ImageShape, Vec<f64>), String> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(format!("unsupported magic {m}")),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|e| format!("{s}: {e}"));
    let (w, h, max) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if max != 255 {
        return Err(format!("unsupported maxval {max}"));
    }
    let shape = ImageShape::new(channels, h, w);
    let raw = bytes.get(pos..pos + shape.len()).ok_or("truncated pixels")?;
    let mut vals = vec![0.0; shape.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..channels {
                vals[shape.index(c, y, x)] = raw[(y * w + x) * channels + c] as f64 / 255.0;
            }
        }
    }
    Ok((shape, vals))
}

/// Writes `metrics.csv`, `curve.csv`, and `image_<j>.pgm` (estimate left,
/// truth right) into `dir`.
pub fn write_outputs(
    record: &MetricsRecord,
    estimate: &[Tensor],
    curve: &[CurvePoint],
    truth: &[Tensor],
    shape: ImageShape,
    dir: &Path,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_metrics_csv(record, &dir.join("metrics.csv"))?;
    write_curve_csv(curve, &dir.join("curve.csv"))?;
    let ext = if shape.channels == 3 { "ppm" } else { "pgm" };
    for (j, (est, tru)) in estimate.iter().zip(truth).enumerate() {
        let path = dir.join(format!("image_{j}.{ext}"));
        fs::write(&path, encode_pnm(&[est, tru], shape)?).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}
