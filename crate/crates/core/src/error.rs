use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
///
/// Every variant renders as a single line so the CLI can emit it verbatim.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("label error: label {label} outside [0, {num_classes})")]
    Label { label: usize, num_classes: usize },

    #[error("numeric error in {location}: {detail}")]
    Numeric { location: String, detail: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("tensor error: {0}")]
    Tensor(#[from] candle_core::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Short machine-readable category used by the CLI's error line.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Config(_) => "config",
            Error::Input(_) => "input",
            Error::Label { .. } => "label",
            Error::Numeric { .. } => "numeric",
            Error::Data(_) => "data",
            Error::Evaluation(_) => "evaluation",
            Error::Io { .. } => "io",
            Error::Tensor(_) => "tensor",
            Error::Json(_) => "json",
            Error::Image(_) => "image",
            Error::Csv(_) => "csv",
        }
    }

    /// The message without its category prefix, on one line.
    pub fn detail(&self) -> String {
        let msg = match self {
            Error::Config(m) | Error::Input(m) | Error::Data(m) | Error::Evaluation(m) => m.clone(),
            Error::Label { label, num_classes } => {
                format!("label {label} outside [0, {num_classes})")
            }
            Error::Numeric { location, detail } => format!("{location}: {detail}"),
            Error::Io { path, source } => format!("{}: {source}", path.display()),
            Error::Tensor(e) => e.to_string(),
            Error::Json(e) => e.to_string(),
            Error::Image(e) => e.to_string(),
            Error::Csv(e) => e.to_string(),
        };
        msg.replace('\n', " ")
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn numeric(location: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            location: location.into(),
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
