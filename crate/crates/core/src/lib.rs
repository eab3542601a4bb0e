//! Energy-aligned classification.
//!
//! A trained classifier tends to assign frequent classes a larger "free
//! energy" (log-partition of its logits over the input distribution) than
//! rare ones, and that gap shows up directly as biased predictions. This
//! crate estimates the per-class free energies from a balanced sampling set
//! and removes the gap post hoc by adding one scalar per class (or per
//! cluster of classes) to the logits. No weights are touched.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: stable log-sum-exp, softmax, free-energy estimates.
//! - [`aligning`]: shift scalars, natural-breaks clustering of class counts.
//! - [`model`]: a small MLP classifier with affine or cosine head and
//!   analytic gradients.
//! - [`training`]: cross-entropy, distillation and compound losses, SGD.
//! - [`data`]: synthetic Gaussian mixtures, long-tail subsampling,
//!   incremental splits, file formats.
//! - [`metrics`]: accuracy, confusion, split accuracies, rank diagnostics.
//! - [`harness`]: end-to-end class-incremental and long-tailed experiments.

pub mod aligning;
pub mod data;
pub mod harness;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

use thiserror::Error;

/// Errors shared by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Input that must be non-empty was empty.
    #[error("empty input: {0}")]
    Empty(&'static str),

    /// Input contained a NaN or infinite value where finite values are required.
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    /// Two related buffers disagree on length.
    #[error("length mismatch in {context}: expected {expected}, got {got}")]
    LengthMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },

    /// An index refers past the end of its collection.
    #[error("{context}: index {index} out of range for length {len}")]
    IndexOutOfRange {
        context: &'static str,
        index: usize,
        len: usize,
    },

    /// More clusters were requested than there are distinct count values.
    #[error("degenerate clustering: {requested} clusters requested but only {distinct} distinct count values")]
    DegenerateClustering { requested: usize, distinct: usize },

    /// A configuration value is inconsistent or out of range.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A file had the wrong shape, magic, or field values.
    #[error("parse error: {0}")]
    Parse(String),

    /// Training produced a non-finite loss.
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Splitmix64 step; spreads low-entropy seeds over the full 64-bit range.
pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent sub-seed for a component (`stream`) of a seeded run, so the
/// same base seed never feeds two RNG consumers the same stream.
pub(crate) fn derive_seed(base: u64, stream: u64) -> u64 {
    splitmix64(base ^ splitmix64(stream))
}
