//! Krill board-photo pipeline: manifest handling, board segmentation,
//! specimen curation, length and maturity estimation, and evaluation.

pub mod curation;
pub mod data;
pub mod error;
pub mod estimation;
pub mod geometry;
pub mod metrics;
pub mod nn;
pub mod raster;
pub mod segmentation;
pub mod synth;

pub use data::{
    BoardImage, DatasetManifest, Labeled, MaturityLabel, SpecimenId, SpecimenRecord, Taxonomy, View,
};
pub use error::{Error, Result};
pub use geometry::BBox;
pub use raster::{Mask, Rle};
