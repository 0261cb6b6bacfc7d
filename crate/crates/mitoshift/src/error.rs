use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),
    #[error("{}: {message}", path.display())]
    Data { path: PathBuf, message: String },
    #[error("{}, line {line}: {message}", path.display())]
    DataLine { path: PathBuf, line: usize, message: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Core(#[from] mitoshift_core::Error),
}

impl Error {
    pub fn data(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Data {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn line(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::DataLine {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 numeric or degeneracy.
    pub fn exit_code(&self) -> i32 {
        use mitoshift_core::Error as C;
        match self {
            Error::Config(_) => 2,
            Error::Data { .. } | Error::DataLine { .. } | Error::Io { .. } => 3,
            Error::Core(e) => match e {
                C::InvalidConfig(_) => 2,
                C::LabelOutOfRange { .. } | C::LengthMismatch(..) => 3,
                _ => 4,
            },
        }
    }
}
