use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("truncated payload: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("invalid bundle: {0}")]
    InvalidBundle(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty layer selection")]
    EmptySelection,

    #[error("layer index {index} out of range ({available} layers available)")]
    LayerIndex { index: usize, available: usize },

    #[error("need at least {clusters} points, got {points}")]
    TooFewPoints { points: usize, clusters: usize },

    #[error("unknown class {0:?}")]
    UnknownClass(String),

    #[error("missing score for occupied component {0}")]
    MissingScore(usize),

    #[error("empty component set")]
    EmptyComponents,

    #[error("batch of {0} samples is too small (need at least 2)")]
    BatchTooSmall(usize),

    #[error("labels contain a single class")]
    SingleClass,

    #[error("no score maps present")]
    NoMaps,

    #[error("anomalous sample {0:?} in training batch")]
    AnomalousTrainingSample(String),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },
}
