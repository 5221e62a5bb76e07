use std::path::PathBuf;

/// Errors produced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("wav error on {path}: {reason}")]
    Wav { path: PathBuf, reason: String },

    #[error("empty audio: {0}")]
    EmptyAudio(PathBuf),

    #[error("unsupported sample rate {got} (expected {expected}) in {path}")]
    UnsupportedSampleRate {
        path: PathBuf,
        got: u32,
        expected: u32,
    },

    #[error("unsupported channel count {got} (expected mono) in {path}")]
    UnsupportedChannels { path: PathBuf, got: u16 },

    #[error("unsupported encoding in {path}: {reason}")]
    UnsupportedEncoding { path: PathBuf, reason: String },

    #[error("manifest {path}, line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("duplicate utt_id '{0}'")]
    DuplicateUttId(String),

    #[error("invalid gender '{0}'")]
    InvalidGender(String),

    #[error("trial file {path}, line {line}: {reason}")]
    TrialFile {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("unresolved utt_id '{0}'")]
    UnresolvedUttId(String),

    #[error("utterance too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("not enough data: {0}")]
    NotEnoughData(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("config hash mismatch in {path}: artifact was produced under a different run config")]
    ConfigHashMismatch { path: PathBuf },

    #[error("zero vector has no cosine similarity")]
    ZeroVector,

    #[error("need both target and nontarget trials")]
    SingleClass,

    #[error("invalid config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
