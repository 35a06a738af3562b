//! Recursive analytic inversion of a fully connected sigmoid network, one
//! least-squares system per layer, then the same network with the first
//! layer's weight gradient withheld. The withheld layer leaves an
//! under-determined forward system; solving it through a generator's latent
//! space instead of the pseudo-inverse repairs the input estimate.

use std::collections::BTreeSet;

use gialab::flsim::make_dataset;
use gialab::models::{batch_gradient, fit_generator, Activation, ClassifierModel, FitConfig, GeneratorModel};
use gialab::rgap::{rgap_generative, rgap_recursive, LatentFit};
use gialab::Tensor;

fn main() -> gialab::Result<()> {
    let data = make_dataset("two-cluster", 8, 3)?;
    // Keep the image away from 0 and 1 so inverting the sigmoid stays stable.
    let x = data.images[0].map(|v| v.clamp(0.01, 0.99));
    let y = data.labels[0];
    let model = ClassifierModel::dense_stack(&[256, 64, 32, 10], Activation::Sigmoid, 0)?;
    let report = batch_gradient(&model, &[x.clone()], &[y], false)?;

    let full = rgap_recursive(&model, &report)?;
    println!("all gradients:");
    for (l, e) in full.layers.iter().zip(full.layer_errors(&model, &x)?) {
        println!(
            "  layer {} {:>8} system {:>4}x{:<4} rank {:>3}  residual {:.2e}  activation error {e:.2e}",
            l.system.layer,
            l.system.kind.as_str(),
            l.system.rows(),
            l.system.cols(),
            l.system.rank.unwrap_or(0),
            l.system.residual.unwrap_or(f64::NAN),
        );
    }

    let mut withheld = report.clone();
    withheld.gradients[0] = Tensor::zeros(withheld.gradients[0].shape());
    let plain = rgap_recursive(&model, &withheld)?;
    let plain_err = *plain.layer_errors(&model, &x)?.last().unwrap();

    let prior_data = make_dataset("two-cluster", 64, 100)?;
    let fit = FitConfig { iterations: 300, ..FitConfig::default() };
    let (prior, _, _) = fit_generator(&GeneratorModel::dec16(1), &prior_data.images, &fit)?;
    let hybrid = rgap_generative(&model, &withheld, &prior, &BTreeSet::from([1]), &LatentFit::default())?;
    let hybrid_err = *hybrid.layer_errors(&model, &x)?.last().unwrap();
    println!("layer 1 gradient withheld:");
    println!("  pseudo-inverse input error {plain_err:.4}");
    println!("  generator      input error {hybrid_err:.4}");
    for w in plain.warnings.iter().chain(&hybrid.warnings) {
        println!("  warning: {w}");
    }
    Ok(())
}
