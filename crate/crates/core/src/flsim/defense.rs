use autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::models::{DefenseConfig, GradientReport};

/// Number of entries kept out of `n` at sparsity `s`: `⌈(1 − s)·n⌉`, at
/// least one.
pub fn kept_count(n: usize, s: f64) -> usize {
    let k = (1.0 - s) * n as f64;
    // Guard against representation error such as (1 - 0.99) * 1000 = 10.000000000000009.
    let k = (k - 1e-9 * k.max(1.0)).ceil() as usize;
    k.clamp(1, n.max(1))
}

fn sparsify_tensor(t: &Tensor, s: f64) -> Tensor {
    let d = t.data();
    let keep = kept_count(d.len(), s);
    if keep >= d.len() {
        return t.clone();
    }
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&a, &b| d[b].abs().total_cmp(&d[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; d.len()];
    for &i in &order[..keep] {
        out[i] = d[i];
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

/// Keeps the largest-magnitude entries of every layer and zeroes the rest.
/// Ties keep the lower flat index.
pub fn defend_sparsify(report: &GradientReport, s: f64) -> GradientReport {
    let mut out = report.clone();
    if s > 0.0 {
        out.gradients = report.gradients.iter().map(|g| sparsify_tensor(g, s)).collect();
    }
    out
}

/// Adds i.i.d. gaussian noise of standard deviation `sigma` to every entry.
pub fn defend_noise(report: &GradientReport, sigma: f64, seed: u64) -> GradientReport {
    let mut out = report.clone();
    if sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for g in &mut out.gradients {
            for v in g.data_mut() {
                *v += sigma * rng.sample::<f64, _>(StandardNormal);
            }
        }
    }
    out
}

/// Sparsification, then noise.
pub fn apply_defense(report: &GradientReport, defense: &DefenseConfig, seed: u64) -> GradientReport {
    let sparse = defend_sparsify(report, defense.sparsity);
    defend_noise(&sparse, defense.noise, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kept_count_ceiling() {
        assert_eq!(kept_count(1000, 0.99), 10);
        assert_eq!(kept_count(4, 0.5), 2);
        assert_eq!(kept_count(7, 0.0), 7);
        assert_eq!(kept_count(3, 0.9), 1);
        assert_eq!(kept_count(10, 0.95), 1);
        assert_eq!(kept_count(10, 0.85), 2);
    }
}
