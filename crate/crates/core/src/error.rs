//! Error type shared across the crate.

use crate::map::VoxelKey;

/// Unified error for map construction, tracing, localization, and I/O.
///
/// Variants are grouped by who is at fault: [`Error::exit_code`] maps
/// input/configuration problems to exit code 2 and internal invariant
/// violations to exit code 3, which is the contract the `echoloc` binary
/// reports to callers.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A voxel key denotes a cell whose center lies outside the grid bounds.
    #[error("voxel ({},{},{}) lies outside the grid bounds", .0.ix, .0.iy, .0.iz)]
    OutOfBounds(VoxelKey),

    /// Geometry too degenerate to operate on (collinear plane-fit input,
    /// zero-length direction, and similar).
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),

    /// A ray direction does not face the surface it is supposed to bounce
    /// off (`d · n >= 0`).
    #[error("ray direction does not face the surface (d·n >= 0)")]
    BadOrientation,

    /// A configuration value is out of its documented range, or a `--set`
    /// key is unknown.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A map file failed to parse.
    #[error("map file, line {line}: {message}")]
    MapFormat { line: usize, message: String },

    /// A scenario file failed to parse or validate.
    #[error("scenario: {0}")]
    Scenario(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code the CLI reports for this error.
    ///
    /// `2` means the caller handed us something unusable (file, config,
    /// scenario); `3` means an internal invariant broke mid-computation.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::OutOfBounds(_)
            | Error::InvalidConfig(_)
            | Error::MapFormat { .. }
            | Error::Scenario(_)
            | Error::Io(_) => 2,
            Error::DegenerateGeometry(_) | Error::BadOrientation => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
