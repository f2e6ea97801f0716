//! Software simulation toolkit for FP4 quantized training.
//!
//! Everything here runs on the CPU in plain `f64`: the 4-bit formats and
//! their look-up-table quantizer, absmax scaling at tensor/vector
//! granularity, the differentiable gradient estimator used on the weight
//! path, outlier clamping and compensation for activations, a small
//! reverse-mode training harness for ablation experiments, tensor
//! distribution analysis, and an analytic FLOP/speedup model for a
//! transformer layer under FP4 acceleration.
//!
//! No FP4 hardware is required or emulated at the bit level; quantization
//! is simulated by snapping values to the format's representable set.

pub mod analysis;
pub mod dge;
pub mod fp4;
pub mod io;
pub mod linalg;
pub mod occ;
pub mod perfmodel;
pub mod qtrain;

pub use fp4::{Fp4Format, QuantizedTensor, ScaleAxis};
pub use linalg::{DenseMatrix, SparseResidual};

/// Errors shared across the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("non-finite value at ({row}, {col})")]
    NonFinite { row: usize, col: usize },

    #[error("NaN input to quantizer")]
    NanInput,

    #[error("empty tensor")]
    EmptyTensor,

    #[error("value {value} outside quantization range [-{max_abs}, {max_abs}]")]
    OutOfRange { value: f64, max_abs: f64 },

    #[error("local coordinate {t} outside interval [0, {width}]")]
    OutsideInterval { t: f64, width: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("missing backward context")]
    MissingContext,

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad file format: {0}")]
    FileFormat(String),
}

pub type Result<T> = std::result::Result<T, Error>;
