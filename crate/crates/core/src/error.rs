use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: {detail}")]
    Size { op: &'static str, detail: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("frequency table has {actual} entries, head has {expected} classes")]
    FrequencyLength { expected: usize, actual: usize },
    #[error("projection width {dim} not divisible by {heads} heads")]
    HeadSplit { dim: usize, heads: usize },
    #[error("positional embedding needs an even model width, got {0}")]
    OddModelWidth(usize),
    #[error("top-k with k = {k} exceeds {classes} classes")]
    TopK { k: usize, classes: usize },
    #[error("unknown ablation variant `{0}`")]
    UnknownVariant(String),
    #[error("unknown action scoring mode `{0}`")]
    UnknownMode(String),
    #[error("parameter `{0}` has no gradient")]
    MissingGradient(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("non-finite value produced by `{op}` (tape node {node})")]
    NonFinite { op: &'static str, node: usize },
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
