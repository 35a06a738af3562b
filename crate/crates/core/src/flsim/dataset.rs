use std::str::FromStr;

use autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageShape;

/// Number of classes of every synthetic family.
pub const CLASSES: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Gaussian blobs on a dim background; label from the position of the
    /// brightest blob.
    Blobs,
    /// One horizontal or vertical bar; label from orientation and position.
    Bars,
    /// Two fixed prototypes plus a smooth random field; label is the
    /// prototype.
    TwoCluster,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "blobs" => Ok(Family::Blobs),
            "bars" => Ok(Family::Bars),
            "two-cluster" => Ok(Family::TwoCluster),
            other => Err(Error::UnknownFamily(other.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetRecipe {
    pub family: Family,
    pub count: usize,
    pub seed: u64,
    /// Per-pixel standard deviation of the additive variation before
    /// clamping. Two-cluster variation is a random combination of eight
    /// low-frequency cosines; the other families use white noise.
    pub noise: f64,
}

impl Default for DatasetRecipe {
    fn default() -> Self {
        Self { family: Family::TwoCluster, count: 256, seed: 0, noise: 0.1 }
    }
}

impl DatasetRecipe {
    pub fn build(&self) -> Result<SyntheticDataset> {
        if self.count == 0 {
            return Err(Error::Config("dataset count must be >= 1".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config(format!("dataset noise must be >= 0, got {}", self.noise)));
        }
        let shape = ImageShape::GRAY16;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let protos = prototypes();
        let mut images = Vec::with_capacity(self.count);
        let mut labels = Vec::with_capacity(self.count);
        for _ in 0..self.count {
            let (mut px, label) = match self.family {
                Family::Blobs => blobs(&mut rng, shape),
                Family::Bars => bars(&mut rng, shape),
                Family::TwoCluster => {
                    let c = rng.random_range(0..2);
                    (protos[c].data().to_vec(), c)
                }
            };
            if self.noise > 0.0 && self.family == Family::TwoCluster {
                smooth_field(&mut rng, shape, self.noise, &mut px);
            } else if self.noise > 0.0 {
                for v in &mut px {
                    *v += self.noise * rng.sample::<f64, _>(StandardNormal);
                }
            }
            for v in &mut px {
                *v = v.clamp(0.0, 1.0);
            }
            images.push(Tensor::new(vec![shape.len()], px)?);
            labels.push(label);
        }
        Ok(SyntheticDataset { images, labels, recipe: self.clone(), shape })
    }
}

/// Labelled 16x16 grayscale images in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub recipe: DatasetRecipe,
    pub shape: ImageShape,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Builds a dataset with the family's default noise.
pub fn make_dataset(family: &str, count: usize, seed: u64) -> Result<SyntheticDataset> {
    let family: Family = family.parse()?;
    DatasetRecipe { family, count, seed, ..DatasetRecipe::default() }.build()
}

/// The two cluster centres: a soft disc and a soft diagonal band.
pub fn prototypes() -> [Tensor; 2] {
    let s = ImageShape::GRAY16;
    let soft = |d: f64| 1.0 / (1.0 + (d * 1.5).exp());
    let mut disc = vec![0.0; s.len()];
    let mut band = vec![0.0; s.len()];
    for y in 0..s.height {
        for x in 0..s.width {
            let (fx, fy) = (x as f64 + 0.5 - 8.0, y as f64 + 0.5 - 8.0);
            let r = (fx * fx + fy * fy).sqrt();
            disc[s.index(0, y, x)] = 0.15 + 0.7 * soft(r - 5.0);
            let d = (fx - fy).abs() / std::f64::consts::SQRT_2;
            band[s.index(0, y, x)] = 0.15 + 0.7 * soft(d - 2.5);
        }
    }
    [
        Tensor::new(vec![s.len()], disc).expect("finite"),
        Tensor::new(vec![s.len()], band).expect("finite"),
    ]
}

/// Adds `Σ a_pq cos(π p (x+½)/W) cos(π q (y+½)/H)` over `0 ≤ p, q ≤ 2`,
/// `(p, q) ≠ (0, 0)`, with `a_pq ~ N(0, 1)` scaled to pixel std `sigma`.
fn smooth_field(rng: &mut ChaCha8Rng, s: ImageShape, sigma: f64, px: &mut [f64]) {
    let pi = std::f64::consts::PI;
    let scale = sigma / 3f64.sqrt();
    for p in 0..3 {
        for q in 0..3 {
            if p == 0 && q == 0 {
                continue;
            }
            let a = scale * rng.sample::<f64, _>(StandardNormal);
            for y in 0..s.height {
                let cy = (pi * q as f64 * (y as f64 + 0.5) / s.height as f64).cos();
                for x in 0..s.width {
                    let cx = (pi * p as f64 * (x as f64 + 0.5) / s.width as f64).cos();
                    px[s.index(0, y, x)] += a * cx * cy;
                }
            }
        }
    }
}

fn blobs(rng: &mut ChaCha8Rng, s: ImageShape) -> (Vec<f64>, usize) {
    let bg = rng.random_range(0.05..0.25);
    let mut px = vec![bg; s.len()];
    let n = rng.random_range(1..=3);
    let mut brightest = (0.0, 0.0, 0.0);
    for _ in 0..n {
        let cx = rng.random_range(2.0..14.0);
        let cy = rng.random_range(2.0..14.0);
        let sigma: f64 = rng.random_range(1.2..3.0);
        let amp = rng.random_range(0.4..0.7);
        if amp > brightest.0 {
            brightest = (amp, cx, cy);
        }
        for y in 0..s.height {
            for x in 0..s.width {
                let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                px[s.index(0, y, x)] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }
    let col = ((brightest.1 - 2.0) / 12.0 * 5.0).floor().clamp(0.0, 4.0) as usize;
    let row = usize::from(brightest.2 >= 8.0);
    (px, row * 5 + col)
}

fn bars(rng: &mut ChaCha8Rng, s: ImageShape) -> (Vec<f64>, usize) {
    let vertical = rng.random_bool(0.5);
    let pos = rng.random_range(1..15usize);
    let width = rng.random_range(1..=3usize);
    let lo = rng.random_range(0.05..0.2);
    let hi = rng.random_range(0.75..0.95);
    let mut px = vec![lo; s.len()];
    for y in 0..s.height {
        for x in 0..s.width {
            let c = if vertical { x } else { y };
            if c + width / 2 >= pos && c <= pos + width / 2 {
                px[s.index(0, y, x)] = hi;
            }
        }
    }
    let bin = (pos - 1) * 5 / 14;
    (px, usize::from(vertical) * 5 + bin)
}
/// Mean over the rows of `samples` (`[P, 256]`) of the RMS distance to the
/// nearest two-cluster prototype.
pub fn prototype_distance(samples: &Tensor) -> Result<f64> {
    let m = ImageShape::GRAY16.len();
    if samples.numel() == 0 || samples.numel() % m != 0 {
        return Err(Error::Shape(format!("{} values are not rows of {m}", samples.numel())));
    }
    let protos = prototypes();
    let rows = samples.data().chunks(m);
    let n = rows.len();
    let total: f64 = rows
        .map(|r| {
            protos
                .iter()
                .map(|p| (r.iter().zip(p.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / m as f64).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(total / n as f64)
}

