use std::path::PathBuf;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("unsupported audio format: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("configuration error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("waveform of {samples} samples is shorter than one {frame_len}-sample frame")]
    EmptySpectrogram { samples: usize, frame_len: usize },

    #[error("no pitch detected")]
    NoPitch,

    #[error(
        "infeasible CTC alignment: target of {target_len} labels needs at least {min_frames} frames, got {frames}"
    )]
    InfeasibleAlignment {
        target_len: usize,
        min_frames: usize,
        frames: usize,
    },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("wrong model mode: {0}")]
    Mode(String),

    #[error("input of length {len} exceeds the budget of {max} positions")]
    Length { len: usize, max: usize },

    #[error("invalid state: {0}")]
    State(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("split error: {0}")]
    Split(String),

    #[error("character {ch:?} in utterance `{utterance}` is not in the vocabulary")]
    Vocabulary { ch: char, utterance: String },

    #[error("utterance `{id}`: {source}")]
    Utterance {
        id: String,
        #[source]
        source: Box<Error>,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl Error {
    /// Attaches the utterance being processed.
    pub fn in_utterance(self, id: &str) -> Self {
        match self {
            e @ Error::Utterance { .. } => e,
            e => Error::Utterance {
                id: id.to_string(),
                source: Box::new(e),
            },
        }
    }

    /// The innermost error, looking through utterance context.
    pub fn root(&self) -> &Error {
        match self {
            Error::Utterance { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
