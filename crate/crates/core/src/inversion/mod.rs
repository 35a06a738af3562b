//! The gradient-matching cost, its regularizers, and search over inputs,
//! latent codes and generator parameters.

mod config;
mod cost;
mod invert;
mod optim;
mod task;

pub use config::{DiscrepancyKind, InversionConfig, Mode};
pub use cost::{bn_regularizer, cost, discrepancy, tv_regularizer, CostProgram, CostTerms, Search};
pub(crate) use invert::{evaluate_sum, gaussian, run_phase};
pub use invert::{invert, invert_multi, BatchEstimate, CurvePoint, Phase, RestartRecord, DIVERGENCE_LIMIT};
pub use optim::{scheduled_lr, sgd_step, Adam};
pub use task::InversionTask;
