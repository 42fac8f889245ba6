//! Error-bounded lossy compression for gridded scientific floating-point
//! data.
//!
//! The pipeline compresses an n-dimensional float array in three stages:
//! a hyper-block autoencoder ([`hbae`]) that exploits correlation across
//! groups of blocks through self-attention, a block-wise residual
//! autoencoder ([`bae`]) that refines each block, and a greedy PCA-based
//! corrector ([`guarantee`]) that enforces a hard per-block l2 error bound
//! on the final output. Latents, corrections and metadata are entropy
//! coded ([`codec`]) into a self-contained archive ([`archive`]).
//!
//! Numeric kernels are generic over the scalar type through [`Real`].
//! Training runs in `f64`; archives store `f32`.

pub mod archive;
pub mod bae;
pub mod codec;
pub mod guarantee;
pub mod hbae;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod tensor;
pub(crate) mod wire;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Scalar type accepted by the numeric kernels.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Bytes per value when stored on disk.
    const BYTES: usize;
}

impl Real for f32 {
    const BYTES: usize = 4;
}

impl Real for f64 {
    const BYTES: usize = 8;
}

/// Converts an `f64` literal or intermediate into any [`Real`].
#[inline]
pub fn real<T: Real>(v: f64) -> T {
    T::from_f64(v).expect("f64 converts to any Real")
}

pub type DatasetF32 = tensor::Dataset<f32>;
pub type DatasetF64 = tensor::Dataset<f64>;
pub type Tensor2F32 = nn::Tensor2<f32>;
pub type Tensor2F64 = nn::Tensor2<f64>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("rank mismatch: block spec has rank {spec}, dataset has rank {dataset}")]
    RankMismatch { spec: usize, dataset: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("missing block at grid index {0}")]
    MissingBlock(usize),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },
    #[error("eigensolver failed to converge")]
    NumericalFailure,
    #[error(
        "quantization bin too coarse for block {block_id}: error {delta} > tau {tau} with all {dim} coefficients stored"
    )]
    BinTooCoarse {
        block_id: usize,
        delta: f64,
        tau: f64,
        dim: usize,
    },
    #[error("value {0} overflows the quantizer integer range")]
    QuantizerOverflow(f64),
    #[error("corrupt bitstream: {0}")]
    CorruptStream(String),
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("unsupported archive version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated file: {0}")]
    TruncatedFile(String),
    #[error("checksum mismatch in section {0}")]
    ChecksumFail(String),
    #[error("dataset value range is zero")]
    ZeroRange,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
