use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Every failure the measurement pipeline can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed NIfTI header: {0}")]
    MalformedHeader(String),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("I/O failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid volume: {0}")]
    InvalidVolume(String),
    #[error("invalid spacing {0:?}")]
    InvalidSpacing([f64; 3]),
    #[error("invalid intensity window [{lo}, {hi}]")]
    InvalidWindow { lo: f64, hi: f64 },
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),
    #[error("volume is not a mask")]
    NotAMask,
    #[error("degenerate volume: {0}")]
    DegenerateVolume(String),
    #[error("no overlap between fixed samples and moving field-of-view")]
    EmptyOverlap,
    #[error("point {0:?} lies outside the control-point grid support")]
    OutsideSupport([f64; 3]),
    #[error("non-finite cost at level {level}, iteration {iteration}")]
    NonFiniteCost { level: usize, iteration: usize },
    #[error("mask is empty")]
    EmptyMask,
    #[error("measurement region (liver within valid field-of-view) is empty")]
    EmptyRegion,
    #[error("folding fraction {fraction:.4} exceeds the allowed {max:.4}")]
    FoldingExceeded { fraction: f64, max: f64 },
    #[error("invalid phantom specification: {0}")]
    SpecInvalid(String),
    #[error("warp inverse did not converge at {0:?}")]
    WarpNotInvertible([f64; 3]),
    #[error("malformed deformation field: {0}")]
    MalformedField(String),
    #[error("slice index {index} out of range for axis length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::IoFailure {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable name, used in the CLI's error JSON.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MalformedHeader(_) => "MalformedHeader",
            Error::UnsupportedDatatype(_) => "UnsupportedDatatype",
            Error::IoFailure { .. } => "IoFailure",
            Error::InvalidVolume(_) => "InvalidVolume",
            Error::InvalidSpacing(_) => "InvalidSpacing",
            Error::InvalidWindow { .. } => "InvalidWindow",
            Error::GeometryMismatch(_) => "GeometryMismatch",
            Error::NotAMask => "NotAMask",
            Error::DegenerateVolume(_) => "DegenerateVolume",
            Error::EmptyOverlap => "EmptyOverlap",
            Error::OutsideSupport(_) => "OutsideSupport",
            Error::NonFiniteCost { .. } => "NonFiniteCost",
            Error::EmptyMask => "EmptyMask",
            Error::EmptyRegion => "EmptyRegion",
            Error::FoldingExceeded { .. } => "FoldingExceeded",
            Error::SpecInvalid(_) => "SpecInvalid",
            Error::WarpNotInvertible(_) => "WarpNotInvertible",
            Error::MalformedField(_) => "MalformedField",
            Error::IndexOutOfRange { .. } => "IndexOutOfRange",
            Error::InvalidConfig(_) => "InvalidConfig",
        }
    }
}
