use thiserror::Error;

/// Errors raised while building or evaluating an expression graph.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("leaf {leaf} ({name}) is not bound")]
    Unbound { leaf: usize, name: String },
    #[error("binding for leaf {leaf} has shape {got:?}, expected {expected:?}")]
    BindingShape {
        leaf: usize,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("cannot differentiate a non-scalar root of shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("node {0} is not a leaf and cannot be a differentiation target")]
    NotALeaf(usize),
    #[error("unsupported op in graph: {0}")]
    Unsupported(String),
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("non-finite function value {0} during finite differencing")]
    NonFinite(f64),
    #[error("expression {0} does not belong to this graph")]
    ForeignExpr(usize),
}

pub type Result<T> = std::result::Result<T, GraphError>;
