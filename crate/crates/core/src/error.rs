use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid bounding box: {0}")]
    InvalidBox(String),

    #[error("bounding box {bbox:?} exceeds {width}x{height} image")]
    OutOfBounds {
        bbox: [u32; 4],
        width: u32,
        height: u32,
    },

    #[error("invalid specimen id: {0}")]
    InvalidId(String),

    #[error("invalid maturity label `{0}`")]
    InvalidLabel(String),

    #[error("manifest is missing required column `{0}`")]
    MissingColumn(String),

    #[error("manifest invariant violated: {0}")]
    Manifest(String),

    #[error("unknown cruise `{cruise}`; known cruises: {known:?}")]
    UnknownCruise { cruise: String, known: Vec<String> },

    #[error("crop {crop_w}x{crop_h} does not fit canvas {canvas_w}x{canvas_h}")]
    CropTooLarge {
        crop_w: u32,
        crop_h: u32,
        canvas_w: u32,
        canvas_h: u32,
    },

    #[error("region is empty")]
    EmptyRegion,

    #[error("mismatched region kinds")]
    MismatchedRegions,

    #[error("{0}")]
    InvalidConfig(String),

    #[error("training data error: {0}")]
    Training(String),

    #[error("model expects {expected} channels, raster has {actual}")]
    ChannelMismatch { expected: u8, actual: u8 },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("oracle limit exceeded: {0}")]
    OracleLimit(String),

    #[error("board layout overcrowded: {0}; try fewer specimens per board")]
    Overcrowded(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
