//! Error type shared across the crate.

use std::path::PathBuf;

/// Errors produced by cvorient operations.
#[derive(Debug, thiserror::Error)]
pub enum CvoError {
    /// A feature width of zero was supplied where a positive width is required.
    #[error("feature width must be positive")]
    InvalidFeatureWidth,

    /// Image or feature-map dimensions violate an operation's requirements.
    #[error("invalid dimensions: {0}")]
    InvalidDimensions(String),

    /// The overhead image passed to the polar transform is not square.
    #[error("overhead image must be square, got {height}x{width}")]
    NonSquareOverhead { height: usize, width: usize },

    /// A column shift lies outside the image width.
    #[error("shift {shift} out of range for image width {width}")]
    ShiftOutOfRange { shift: usize, width: usize },

    /// A field of view is outside (0, 360] or does not cut a whole number of
    /// columns from the given width.
    #[error("invalid field of view {fov}°: {reason}")]
    InvalidFov { fov: f64, reason: String },

    /// A width-scaling factor of zero was supplied.
    #[error("scaling factor must be at least 1")]
    InvalidScale,

    /// Two feature maps that must share a shape do not.
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },

    /// A zero-norm feature map was passed where a direction is required.
    #[error("degenerate feature map with zero norm")]
    DegenerateFeatures,

    /// Values that must be finite are not, or otherwise violate a numeric
    /// domain requirement.
    #[error("invalid values: {0}")]
    InvalidValues(String),

    /// A configuration value is out of its documented domain.
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// A serialized artifact (FMAP1 file, records JSON, TOML config, CSV) is
    /// malformed.
    #[error("format error: {0}")]
    Format(String),

    /// An operation requiring at least one evaluation record received none.
    #[error("no evaluation records")]
    EmptyRecords,

    /// Matched-mode evaluation was requested but no record has rank 1.
    #[error("no matched records (rank 1) for matched-mode evaluation")]
    NoMatchedRecords,

    /// A record's top-1 dataset tag does not occur among the query tags.
    #[error("unknown dataset tag: {0}")]
    UnknownTag(String),

    /// The toy optimizer produced a non-finite loss.
    #[error("optimization diverged at step {step}")]
    Divergence { step: usize },

    /// A per-scene failure inside the retrieval engine, tagged with the scene
    /// (query) id it occurred on.
    #[error("scene {id}: {source}")]
    Scene {
        id: u64,
        #[source]
        source: Box<CvoError>,
    },

    /// A filesystem path could not be read or written.
    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// An I/O failure without path context.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CvoError {
    /// Wraps an error with the id of the scene it occurred on.
    pub fn for_scene(self, id: u64) -> Self {
        CvoError::Scene {
            id,
            source: Box::new(self),
        }
    }

    /// Wraps an I/O error with the path it occurred on.
    pub fn at_path(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CvoError::Path {
            path: path.into(),
            source,
        }
    }
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CvoError>;
