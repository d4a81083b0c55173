use std::fmt;

/// Errors raised anywhere in the pipeline.
///
/// Every variant maps to a stable lowercase category string so the CLI can
/// print a single machine-parseable line on failure.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    Numeric(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("config line {line}: {message}")]
    ConfigLine { line: usize, message: String },
    #[error("bad template: {0}")]
    Template(String),
    #[error("insufficient data: {0}")]
    Data(String),
    #[error("malformed archive: {0}")]
    Archive(String),
    #[error("malformed report: {0}")]
    Report(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// Machine-facing error category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    DegenerateInput,
    Shape,
    Numeric,
    Range,
    Config,
    Template,
    Data,
    Archive,
    Report,
    Io,
}

impl Error {
    pub fn category(&self) -> Category {
        match self {
            Error::DegenerateInput(_) => Category::DegenerateInput,
            Error::Shape(_) => Category::Shape,
            Error::Numeric(_) => Category::Numeric,
            Error::Range(_) => Category::Range,
            Error::Config(_) | Error::ConfigLine { .. } => Category::Config,
            Error::Template(_) => Category::Template,
            Error::Data(_) => Category::Data,
            Error::Archive(_) => Category::Archive,
            Error::Report(_) => Category::Report,
            Error::Io(_) => Category::Io,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Category::DegenerateInput => "degenerate_input",
            Category::Shape => "shape_error",
            Category::Numeric => "numeric_error",
            Category::Range => "range_error",
            Category::Config => "config_error",
            Category::Template => "template_error",
            Category::Data => "data_error",
            Category::Archive => "archive_error",
            Category::Report => "report_error",
            Category::Io => "io_error",
        };
        f.write_str(s)
    }
}
