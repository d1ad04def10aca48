use std::fmt;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// One rejected input row, reported with its 1-based line number.
#[derive(Debug, Clone, PartialEq)]
pub struct RowIssue {
    pub line: u64,
    pub message: String,
}

impl fmt::Display for RowIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, found {found}")]
    Dimension {
        context: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("usage: {0}")]
    Usage(String),

    #[error("domain: {0}")]
    Domain(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("ingest failed with {total} rejected row(s); first: {}", format_issues(.issues))]
    Ingest { issues: Vec<RowIssue>, total: usize },

    #[error("search failed: all {0} trial(s) failed")]
    SearchFailed(usize),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

fn format_issues(issues: &[RowIssue]) -> String {
    issues
        .iter()
        .map(ToString::to_string)
        .collect::<Vec<_>>()
        .join("; ")
}

impl Error {
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Short machine-parsable class name.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Usage(_) => "usage",
            Error::Domain(_) => "domain",
            Error::NonFinite(_) => "numeric",
            Error::Config(_) => "config",
            Error::Ingest { .. } => "ingest",
            Error::SearchFailed(_) => "search",
            Error::Io(_) => "io",
            Error::Csv(_) => "ingest",
            Error::Json(_) => "format",
        }
    }
}
