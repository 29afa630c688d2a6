use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor shape did not match what an operator expects.
    #[error("{op}: dimension mismatch on {axis}: expected {expected}, got {actual}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: String,
        actual: String,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("classify: empty logits")]
    EmptyLogits,

    #[error("truncated header: {0}")]
    TruncatedHeader(String),

    #[error("bad magic: expected \"FTCLIP\", found {found:?}")]
    BadMagic { found: Vec<u8> },

    #[error("unsupported container version {found:?} (expected \"01\")")]
    VersionMismatch { found: String },

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("truncated tensor data for {tensor}: need {needed} bytes, {available} available")]
    TruncatedTensor {
        tensor: String,
        needed: usize,
        available: usize,
    },

    #[error("inconsistent tensor size for {tensor}: shape {shape:?} implies {expected} words, manifest declares {declared}")]
    InconsistentTensorSize {
        tensor: String,
        shape: Vec<usize>,
        expected: usize,
        declared: usize,
    },

    #[error("payload checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("invalid model: {0}")]
    Model(String),

    #[error("dataset format error: {0}")]
    DatasetFormat(String),

    #[error("corrupt record {record}: label byte {label} exceeds 9")]
    CorruptRecord { record: usize, label: u8 },

    #[error("calibration and evaluation splits overlap at sample {0}")]
    SplitOverlap(usize),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("fault mask index out of range: {0}")]
    MaskIndex(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(
        op: &'static str,
        axis: impl Into<String>,
        expected: impl ToString,
        actual: impl ToString,
    ) -> Self {
        Error::Dimension {
            op,
            axis: axis.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}
