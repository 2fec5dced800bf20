use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // preprocessing
    #[error("unknown ROI scheme `{0}` (expected A or B)")]
    UnknownScheme(String),
    #[error("atlas table is missing region `{0}`")]
    MissingLabel(String),
    #[error("voxel index {index} is claimed by both `{first}` and `{second}`")]
    OverlappingIndices {
        index: usize,
        first: String,
        second: String,
    },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("shift of {delay_seconds} s is not a whole number of {tr_seconds} s frames")]
    NonIntegerShift { delay_seconds: f64, tr_seconds: f64 },
    #[error("shift of {shift} frames leaves nothing of a {len}-frame run")]
    ShiftExceedsRun { shift: usize, len: usize },
    #[error("empty list: {0}")]
    EmptyList(&'static str),
    #[error("layout maps two voxels to cell ({row}, {col})")]
    DuplicateTarget { row: usize, col: usize },
    #[error("layout target ({row}, {col}) outside {rows}x{cols} grid")]
    TargetOutOfGrid {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    // shapes and numerics
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("mix permutation entry {index} out of range for batch {batch}")]
    BadPermIndex { index: usize, batch: usize },
    #[error("row {0} has zero norm")]
    ZeroNormRow(usize),
    #[error("generic loss needs at least two subjects, got {0}")]
    SingleSubject(usize),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("negative loss weight for `{0}`")]
    NegativeWeight(&'static str),
    #[error("batch index {batch} not below batches per epoch {per_epoch}")]
    BadBatchIndex { batch: usize, per_epoch: usize },
    #[error("token {token} outside vocabulary of {vocab}")]
    TokenOutOfVocab { token: usize, vocab: usize },
    #[error("segmentation mask contains non-binary value {0}")]
    NonBinaryMask(f64),
    #[error("reconstruction requested from untrained heads")]
    UntrainedHeads,
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    // metrics
    #[error("{n_way}-way trial needs at least {n_way} classes, got {classes}")]
    NWayExceedsClasses { n_way: usize, classes: usize },
    #[error("temporal consistency needs at least two frames")]
    SingleFrame,
    #[error("paired sets differ: {0}")]
    PairingMismatch(String),

    // io and formats
    #[error("io failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic bytes in {0}")]
    BadMagic(String),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt header: {0}")]
    CorruptHeader(String),
    #[error("split ratios must be nonnegative and sum to 1, got {0:?}")]
    BadRatios(Vec<f64>),

    // training and pipeline
    #[error("missing upstream checkpoint: {0}")]
    MissingUpstreamCheckpoint(String),
    #[error("loss diverged at epoch {epoch}, batch {batch}: {value}")]
    DivergedLoss {
        epoch: usize,
        batch: usize,
        value: f64,
    },
    #[error("missing {what} at {path} (run `{command}` first)")]
    MissingArtifact {
        what: &'static str,
        path: PathBuf,
        command: &'static str,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("pipeline error: {0}")]
    Pipeline(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    /// Errors caused by invalid user input or ordering, as opposed to runtime failures.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::MissingUpstreamCheckpoint(_)
                | Error::MissingArtifact { .. }
                | Error::UnknownScheme(_)
                | Error::MissingLabel(_)
                | Error::OverlappingIndices { .. }
                | Error::BadRatios(_)
                | Error::InvalidParameter(_)
                | Error::NegativeWeight(_)
        )
    }
}
