use std::fmt;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Where a numeric failure happened inside a simulated cluster.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Site {
    pub worker: Option<usize>,
    pub layer: Option<usize>,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match (self.worker, self.layer) {
            (Some(w), Some(l)) => write!(f, " (worker {w}, layer {l})"),
            (Some(w), None) => write!(f, " (worker {w})"),
            (None, Some(l)) => write!(f, " (layer {l})"),
            (None, None) => Ok(()),
        }
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("numeric error: {detail}{site}")]
    Numeric { detail: String, site: Site },

    #[error("capacity error: {requested} elements exceeds cap of {cap}")]
    Capacity { requested: usize, cap: usize },

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("ordering error: {0}")]
    Ordering(String),

    #[error("config error{}: {msg}", config_location(*.line, .key.as_deref()))]
    Config {
        line: Option<usize>,
        key: Option<String>,
        msg: String,
    },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("data error: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn config_location(line: Option<usize>, key: Option<&str>) -> String {
    match (line, key) {
        (Some(l), Some(k)) => format!(" (line {l}, key `{k}`)"),
        (Some(l), None) => format!(" (line {l})"),
        (None, Some(k)) => format!(" (key `{k}`)"),
        (None, None) => String::new(),
    }
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn numeric(detail: impl Into<String>) -> Self {
        Error::Numeric {
            detail: detail.into(),
            site: Site::default(),
        }
    }

    pub(crate) fn config(line: Option<usize>, key: Option<&str>, msg: impl Into<String>) -> Self {
        Error::Config {
            line,
            key: key.map(str::to_owned),
            msg: msg.into(),
        }
    }

    /// Attaches a layer index to a numeric error; other variants pass through.
    pub fn at_layer(mut self, layer: usize) -> Self {
        if let Error::Numeric { site, .. } = &mut self {
            site.layer.get_or_insert(layer);
        }
        self
    }

    /// Attaches a worker index to a numeric error; other variants pass through.
    pub fn at_worker(mut self, worker: usize) -> Self {
        if let Error::Numeric { site, .. } = &mut self {
            site.worker.get_or_insert(worker);
        }
        self
    }

    /// Process exit status for the command-line front end.
    ///
    /// 2 config/usage, 3 data or file format, 4 numeric, 5 I/O, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Argument(_) => 2,
            Error::Format { .. } | Error::Data(_) => 3,
            Error::Numeric { .. } => 4,
            Error::Io(_) => 5,
            Error::Shape { .. } | Error::Capacity { .. } | Error::Ordering(_) => 1,
        }
    }
}
