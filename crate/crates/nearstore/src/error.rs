use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] nearstore_core::Error),
    #[error("io error on {path}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("device {device}: extent [{offset}, {end}) lies outside the store ({len} bytes)")]
    OutOfBounds { device: usize, offset: u64, end: u64, len: u64 },
    #[error("device {device}: writing up to byte {end} exceeds capacity of {capacity} bytes")]
    CapacityExceeded { device: usize, end: u64, capacity: u64 },
    #[error("{op} is not supported on device {device} (plain SSD)")]
    Unsupported { op: &'static str, device: usize },
    #[error("unknown device {0}")]
    UnknownDevice(usize),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("pipeline aborted: {0}")]
    Aborted(String),
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
