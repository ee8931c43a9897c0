// SPDX-License-Identifier: MIT OR Apache-2.0

//! Error type shared by every module of the crate.

use std::path::PathBuf;

use crate::model::SaeParams;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors raised by the numeric, modelling, training and storage layers.
#[derive(Debug, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension mismatch in {op}: expected {expected}, got {got}")]
    DimensionMismatch {
        /// Operation that detected the mismatch.
        op: &'static str,
        /// Expected size.
        expected: usize,
        /// Size actually supplied.
        got: usize,
    },

    /// A documented precondition was violated.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A dictionary column has zero norm and cannot be normalized.
    #[error("degenerate atom: column {column} has zero norm")]
    DegenerateAtom {
        /// Offending column index.
        column: usize,
    },

    /// Exhaustive search requested beyond the supported size.
    #[error("capacity exceeded: {what} (limit {limit}, got {got})")]
    Capacity {
        /// What was too large.
        what: &'static str,
        /// Largest supported size.
        limit: usize,
        /// Requested size.
        got: usize,
    },

    /// An iterative solver produced a non-finite iterate.
    #[error("sparse coder diverged at iteration {iteration}")]
    CoderDiverged {
        /// Iteration at which the iterate became non-finite.
        iteration: usize,
    },

    /// Training produced a non-finite loss; the last finite parameters are kept.
    #[error("training diverged at step {step}")]
    TrainDiverged {
        /// Optimizer step at which the loss became non-finite.
        step: usize,
        /// Parameters from the last step with a finite loss.
        last_good: Box<SaeParams>,
    },

    /// Rejection sampling could not produce an incoherent planted dictionary.
    #[error(
        "could not draw {atoms} atoms with |cos| <= {bound} in dimension {dim} \
         after {draws} draws; try a larger ambient dimension"
    )]
    Coherence {
        /// Number of atoms requested.
        atoms: usize,
        /// Ambient dimension.
        dim: usize,
        /// Coherence bound.
        bound: f64,
        /// Draws attempted.
        draws: usize,
    },

    /// A metric is undefined for the given input.
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),

    /// A concept axis collapsed to the zero vector.
    #[error("degenerate concept: {0}")]
    DegenerateConcept(String),

    /// A file does not have the expected layout.
    #[error("format error in {path}: {reason}")]
    Format {
        /// File being read.
        path: PathBuf,
        /// What was wrong.
        reason: String,
    },

    /// A file ended early or has trailing bytes.
    #[error("corrupt file {path} at byte offset {offset}: {reason}")]
    Corruption {
        /// File being read.
        path: PathBuf,
        /// Byte offset where the inconsistency was detected.
        offset: u64,
        /// What was wrong.
        reason: String,
    },

    /// A file was written by a newer format version.
    #[error("unsupported format version {found} in {path} (this build reads up to {supported})")]
    UnsupportedVersion {
        /// File being read.
        path: PathBuf,
        /// Version found in the header.
        found: u32,
        /// Highest version this build understands.
        supported: u32,
    },

    /// Configuration failed schema validation.
    #[error("config error: {0}")]
    Config(String),

    /// Another writer holds the output path.
    #[error("output {0} is locked by another writer")]
    Locked(PathBuf),

    /// Underlying I/O failure.
    #[error("i/o error on {path}: {source}")]
    Io {
        /// Path involved.
        path: PathBuf,
        /// Source error.
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Self::Contract(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Self::Config(_) | Self::Contract(_) | Self::DimensionMismatch { .. }
        )
    }
}

pub(crate) fn check_dim(op: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { op, expected, got })
    }
}
