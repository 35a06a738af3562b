//! Dense `f64` tensors and a differentiable expression graph.
//!
//! Graphs are built once with static shapes, evaluated many times with
//! different leaf bindings, and differentiated symbolically with
//! [`Graph::derive`]. Because derivatives are themselves graph nodes,
//! gradients of functions of gradients are available to second order for
//! every supported op.
//!
//! ```
//! use autodiff::{Bindings, Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let x = g.leaf("x", &[]);
//! let cube = g.pow(x, 3.0).unwrap();
//! let d1 = g.derive(cube, &[x]).unwrap()[0];
//! let d2 = g.derive(d1, &[x]).unwrap()[0];
//! let two = Tensor::scalar(2.0);
//! let v = g.eval(d2, &Bindings::new().with(x, &two)).unwrap();
//! assert_eq!(v.item(), 12.0);
//! ```

mod derive;
mod error;
mod eval;
mod finite_diff;
mod graph;
pub mod kernels;
mod tensor;

pub use error::{GraphError, Result};
pub use eval::{Bindings, Plan};
pub use finite_diff::{finite_diff, max_rel_error};
pub use graph::{Expr, Graph, Unary};
pub use tensor::Tensor;
