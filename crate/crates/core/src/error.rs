use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("metadata error in {path}: {source}")]
    Metadata {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("bad magic header: expected \"BPEM\", found {found:?}")]
    MagicMismatch { found: [u8; 4] },
    #[error("unsupported BPEM version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: header declares {expected} bytes, found {found}")]
    TruncatedPayload { expected: u64, found: u64 },
    #[error("label {label} at row {row} is out of range for {n_relations} relation names")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        n_relations: usize,
    },
    #[error("non-finite value at row {row}, column {col}")]
    NonFiniteValue { row: usize, col: usize },
    #[error("inconsistent embedding set: {0}")]
    Inconsistent(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("too few samples: {samples} rows for {components} components")]
    TooFewSamples { samples: usize, components: usize },
    #[error("kernel bandwidth must be positive, got {0}")]
    NonPositiveBandwidth(f64),
    #[error("non-finite SVGD update for particle {particle} at iteration {iteration}")]
    NonFiniteUpdate { particle: usize, iteration: usize },
    #[error("particle set is empty")]
    EmptyParticleSet,
    #[error("label {0:?} has no words after splitting")]
    EmptyAfterSplit(String),
    #[error("word {0:?} cannot be resolved to an embedding")]
    UnresolvableWord(String),
    #[error("reserved token {0:?} in input")]
    ReservedToken(String),
    #[error("invalid entity span: {0}")]
    InvalidSpan(String),
    #[error("batch is empty")]
    EmptyBatch,
    #[error("label space mismatch: {0}")]
    LabelSpaceMismatch(String),
    #[error("stage {stage} failed: {inner}")]
    Stage {
        stage: &'static str,
        inner: Box<Error>,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            inner: Box::new(self),
        }
    }
}
