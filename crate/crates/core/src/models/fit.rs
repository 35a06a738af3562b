use autodiff::{Bindings, Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generator::GeneratorModel;
use super::gradients::stack;
use crate::error::{Error, Result};
use crate::inversion::{gaussian, scheduled_lr, Adam};

/// Settings for [`fit_generator`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub iterations: usize,
    pub lr: f64,
    /// Weight of the mean squared latent norm, which keeps codes near the
    /// standard normal used to initialize latent search.
    pub latent_weight: f64,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { iterations: 600, lr: 1e-2, latent_weight: 1e-2, seed: 0 }
    }
}

/// Fits a generator to example images by jointly optimizing one latent code
/// per image and the shared parameters (a generative latent optimization).
///
/// Returns the fitted generator, the codes `[N, k]`, and the final mean
/// squared reconstruction error per image.
pub fn fit_generator(init: &GeneratorModel, images: &[Tensor], cfg: &FitConfig) -> Result<(GeneratorModel, Tensor, f64)> {
    let target = stack(images)?;
    let (n, m) = (target.shape()[0], target.shape()[1]);
    if m != init.output_dim() {
        return Err(Error::Shape(format!("images of {m} values, generator emits {}", init.output_dim())));
    }
    let k = init.latent_dim();
    let mut g = Graph::new();
    let z = g.leaf("z", &[n, k]);
    let w: Vec<_> = init.params().iter().enumerate().map(|(i, p)| g.leaf(format!("w{i}"), p.shape())).collect();
    let out = init.build_forward(&mut g, z, &w)?;
    let t = g.constant(target);
    let d = g.sub(out, t)?;
    let sq = g.square(d)?;
    let err = g.sum(sq)?;
    let err = g.scale(err, 1.0 / n as f64)?;
    let zsq = g.square(z)?;
    let zs = g.sum(zsq)?;
    let reg = g.scale(zs, cfg.latent_weight / n as f64)?;
    let loss = g.add(err, reg)?;
    let mut leaves = vec![z];
    leaves.extend(&w);
    let grads = g.derive(loss, &leaves)?;
    let mut roots = vec![err];
    roots.extend(grads);
    let plan = g.plan(&roots)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut vars = vec![gaussian(&mut rng, &[n, k])];
    vars.extend(init.params().iter().cloned());
    let mut opt = Adam::new(&vars);
    let mut last = f64::NAN;
    for it in 0..=cfg.iterations {
        let mut b = Bindings::new();
        b.bind_all(&leaves, &vars);
        let mut vals = plan.run(&g, &b)?;
        let gr = vals.split_off(1);
        last = vals[0].item();
        if !last.is_finite() {
            return Err(Error::Diverged(last));
        }
        if it < cfg.iterations {
            opt.step(&mut vars, &gr, scheduled_lr(cfg.lr, it, cfg.iterations));
        }
    }
    let codes = vars.remove(0);
    Ok((init.with_params(vars)?, codes, last / m as f64))
}
