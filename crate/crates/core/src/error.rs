use thiserror::Error;

/// Errors raised anywhere in the toolkit.
///
/// Variants are grouped by the stage that raises them; the CLI maps
/// them onto exit codes via [`Error::is_usage`].
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("no separator token in decoded output")]
    MissingSeparator,
    #[error("decoded output has an empty label span")]
    EmptyLabel,
    #[error("invalid instance {id}: {reason}")]
    InvalidInstance { id: String, reason: String },

    #[error("token `{0}` is not in the vocabulary")]
    Vocab(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingDiverged { epoch: usize, loss: f64 },
    #[error("model state error: {0}")]
    State(String),

    #[error("requested position span is empty")]
    EmptySpan,
    #[error("position {position} outside decoded length {len}")]
    Span { position: usize, len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("vector has zero norm")]
    ZeroVector,
    #[error("metric error: {0}")]
    Metric(String),
    #[error("aligned inputs differ in length: {left} vs {right}")]
    Align { left: usize, right: usize },

    #[error("protocol timeout after {0:?}")]
    ProtocolTimeout(std::time::Duration),
    #[error("protocol version error: {0}")]
    Version(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("remote error ({code}): {message}")]
    Remote { code: String, message: String },
    #[error("attribution decomposition violated: max relative deviation {deviation:.3e}")]
    AttributionInconsistent { deviation: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by bad invocation rather than bad data or models.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }

    /// Stable name of the variant, used on the wire. A remote error keeps
    /// the code the remote sent.
    pub fn code(&self) -> &str {
        match self {
            Error::Config(_) => "Config",
            Error::MissingSeparator => "MissingSeparator",
            Error::EmptyLabel => "EmptyLabel",
            Error::InvalidInstance { .. } => "InvalidInstance",
            Error::Vocab(_) => "Vocab",
            Error::Data(_) => "Data",
            Error::TrainingDiverged { .. } => "TrainingDiverged",
            Error::State(_) => "State",
            Error::EmptySpan => "EmptySpan",
            Error::Span { .. } => "Span",
            Error::Shape(_) => "Shape",
            Error::ZeroVector => "ZeroVector",
            Error::Metric(_) => "Metric",
            Error::Align { .. } => "Align",
            Error::ProtocolTimeout(_) => "ProtocolTimeout",
            Error::Version(_) => "Version",
            Error::Protocol(_) => "Protocol",
            Error::Remote { code, .. } => code,
            Error::AttributionInconsistent { .. } => "AttributionInconsistent",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Csv(_) => "Csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
