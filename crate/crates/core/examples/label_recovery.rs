//! Reads the label of a single image straight off the last-layer bias
//! gradient: with softmax cross-entropy only the true class has a negative
//! entry.

use gialab::flsim::make_dataset;
use gialab::models::{batch_gradient, recover_labels, ClassifierModel};

fn main() -> gialab::Result<()> {
    let data = make_dataset("bars", 8, 0)?;
    for seed in 0..4 {
        let model = if seed % 2 == 0 { ClassifierModel::mlp3(seed) } else { ClassifierModel::cnn4(seed) };
        let j = seed as usize;
        let report = batch_gradient(&model, &data.images[j..=j], &data.labels[j..=j], false)?;
        let got = recover_labels(&report, &model)?;
        let bias = report.gradients.last().unwrap();
        println!("model seed {seed}: true {} recovered {:?}  bias gradient {:.3?}", data.labels[j], got, bias.data());
    }
    Ok(())
}
