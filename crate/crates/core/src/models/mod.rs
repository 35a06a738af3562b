//! The classifier `f_θ`, its loss and gradients, and the generative decoder.

mod classifier;
pub mod container;
mod fit;
mod generator;
mod gradients;
mod report;

pub use classifier::{Activation, ClassifierModel, ForwardExprs, Layer, LayerSpec};
pub use fit::{fit_generator, FitConfig};
pub use generator::{GenBlock, GeneratorModel};
pub(crate) use gradients::{bn_exprs, mean_cross_entropy};
pub use gradients::{
    batch_gradient, bn_statistics, cross_entropy, one_hot, recover_labels, stack, GradientProgram, LABEL_THRESHOLD,
};
pub use report::{BnStats, DefenseConfig, GradientReport};
