use std::path::{Path, PathBuf};

/// Failures of the file-backed layer. Each maps onto a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] hazeloop_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_IO: i32 = 2;
pub const EXIT_ROUTING: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().to_path_buf(),
            source,
        }
    }

    pub fn format(path: impl AsRef<Path>, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().to_path_buf(),
            msg: msg.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        use hazeloop_core::Error as C;
        match self {
            Error::Io { .. } | Error::Format { .. } => EXIT_IO,
            Error::Config(_) => EXIT_CONFIG,
            Error::Core(e) => match e {
                C::Routing { .. } => EXIT_ROUTING,
                C::NonFinite(_) | C::DegenerateTransmission { .. } => EXIT_NUMERIC,
                C::Config(_) | C::Adapter(_) | C::Lookup(_) => EXIT_CONFIG,
                _ => EXIT_IO,
            },
        }
    }
}
