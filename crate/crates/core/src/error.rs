use std::path::PathBuf;

/// Every failure the toolkit reports. Variant names follow the error
/// vocabulary of the operations that raise them.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("record `{video_id}` lacks a weak label")]
    MissingLabel { video_id: String },
    #[error("record `{video_id}`: {what} has length {got}, expected {expected}")]
    LengthMismatch {
        video_id: String,
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("record `{video_id}` is abnormal but declares no anomaly class")]
    MissingClass { video_id: String },
    #[error("invalid record `{video_id}`: {reason}")]
    InvalidRecord { video_id: String, reason: String },

    #[error("bad magic bytes in {path}")]
    BadMagic { path: PathBuf },
    #[error("unsupported format version {version} in {path}")]
    UnsupportedVersion { path: PathBuf, version: u32 },
    #[error("shape mismatch in {path}: {reason}")]
    ShapeMismatch { path: PathBuf, reason: String },
    #[error("non-finite value at row {row}, column {col} of {path}")]
    NonFiniteData { path: PathBuf, row: usize, col: usize },
    #[error("feature blob has no timesteps")]
    EmptyBlob,
    #[error("malformed manifest {path}: {reason}")]
    BadManifest { path: PathBuf, reason: String },
    #[error("malformed frame-label file {path}: {reason}")]
    BadFrameLabels { path: PathBuf, reason: String },
    #[error("video `{video_id}` has no `{stream}` stream")]
    MissingFeatures { video_id: String, stream: String },

    #[error("positional encoding needs an even width, got {0}")]
    OddDimension(usize),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("loss must be a 1x1 value, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("length mismatch: {left} vs {right}")]
    VectorLengthMismatch { left: usize, right: usize },

    #[error("corpus needs at least one abnormal and one normal labeled video")]
    DegenerateCorpus,
    #[error("insufficient videos: {0}")]
    InsufficientVideos(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("metric undefined: only one class present")]
    SingleClass,
    #[error("metric undefined: no positive labels")]
    NoPositives,
    #[error("correlation undefined: constant input")]
    ConstantInput,
    #[error("empty input")]
    EmptyInput,
    #[error("video has zero frames")]
    EmptyVideo,
    #[error("too few anomaly classes: {0}")]
    TooFewClasses(String),
    #[error("too few normal videos: {0}")]
    TooFewNormals(String),
    #[error("corpus has no frame-level ground truth")]
    MissingGroundTruth,
    #[error("invalid synthetic corpus spec: {0}")]
    InvalidSpec(String),
    #[error("malformed checkpoint {path}: {reason}")]
    BadCheckpoint { path: PathBuf, reason: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{context}: {source}")]
    Toml {
        context: String,
        #[source]
        source: toml::de::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
