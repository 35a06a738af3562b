mod error;
pub mod experiment;
pub mod flsim;
pub mod image;
pub mod inversion;
pub mod metrics;
pub mod models;
pub mod meta;
pub mod rgap;
mod sealed;

pub use autodiff::{self, Tensor};
pub use error::{Error, Result};
pub use image::ImageShape;
pub use sealed::Sealed;
