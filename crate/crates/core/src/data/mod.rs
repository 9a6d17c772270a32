//! Domain types for specimen records, board photographs and manifests.

mod manifest;
mod pairing;

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub use manifest::{
    export_manifest, parse_manifest, write_manifest, ParsedManifest, Rejection, MANIFEST_COLUMNS,
};
pub use pairing::{pair_views, DroppedRecord, PairingOutcome, PairingReport};

/// Photograph orientation of a specimen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum View {
    Dorsal,
    Lateral,
}

impl View {
    pub const ALL: [View; 2] = [View::Lateral, View::Dorsal];

    pub fn other(self) -> View {
        match self {
            View::Dorsal => View::Lateral,
            View::Lateral => View::Dorsal,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            View::Dorsal => "Dorsal",
            View::Lateral => "Lateral",
        }
    }
}

impl fmt::Display for View {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for View {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "dorsal" => Ok(View::Dorsal),
            "lateral" => Ok(View::Lateral),
            other => Err(Error::InvalidConfig(format!(
                "view must be Dorsal or Lateral, got `{other}`"
            ))),
        }
    }
}

/// Maturity stage token such as `J`, `FS1` or `MA2`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct MaturityLabel(String);

impl MaturityLabel {
    pub fn new(token: &str) -> Result<Self> {
        let b = token.as_bytes();
        let letters = b.iter().take_while(|c| c.is_ascii_uppercase()).count();
        let rest = &b[letters..];
        let ok = (1..=2).contains(&letters)
            && (rest.is_empty() || (rest.len() == 1 && rest[0].is_ascii_digit()));
        if ok {
            Ok(Self(token.to_string()))
        } else {
            Err(Error::InvalidLabel(token.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for MaturityLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for MaturityLabel {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        MaturityLabel::new(&s)
    }
}

impl From<MaturityLabel> for String {
    fn from(l: MaturityLabel) -> Self {
        l.0
    }
}

impl FromStr for MaturityLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        MaturityLabel::new(s)
    }
}

/// Anything carrying a maturity label.
pub trait Labeled {
    fn maturity(&self) -> &MaturityLabel;
}

/// Classifier label set. `included` order is the classifier's class order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub included: Vec<MaturityLabel>,
    pub excluded: BTreeSet<MaturityLabel>,
    pub min_class_count: usize,
}

impl Taxonomy {
    pub fn new(
        included: Vec<MaturityLabel>,
        excluded: BTreeSet<MaturityLabel>,
        min_class_count: usize,
    ) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in &included {
            if excluded.contains(l) {
                return Err(Error::InvalidConfig(format!(
                    "label {l} is both included and excluded"
                )));
            }
            if !seen.insert(l) {
                return Err(Error::InvalidConfig(format!("label {l} listed twice")));
            }
        }
        Ok(Self {
            included,
            excluded,
            min_class_count,
        })
    }

    pub fn from_tokens(
        included: &[&str],
        excluded: &[&str],
        min_class_count: usize,
    ) -> Result<Self> {
        let inc = included
            .iter()
            .map(|t| MaturityLabel::new(t))
            .collect::<Result<_>>()?;
        let exc = excluded
            .iter()
            .map(|t| MaturityLabel::new(t))
            .collect::<Result<_>>()?;
        Self::new(inc, exc, min_class_count)
    }

    pub fn class_index(&self, label: &MaturityLabel) -> Option<usize> {
        self.included.iter().position(|l| l == label)
    }

    /// Same taxonomy with a different class list (keeps exclusions disjoint).
    pub fn with_included(&self, included: Vec<MaturityLabel>) -> Result<Self> {
        Self::new(included, self.excluded.clone(), self.min_class_count)
    }
}

impl Default for Taxonomy {
    /// Stages named in the field notes; any further retained stages are
    /// supplied through configuration.
    fn default() -> Self {
        Self::from_tokens(
            &["J", "FS1", "MS1", "MS2", "MS3", "MA1", "MA2"],
            &["M1", "A2", "U"],
            101,
        )
        .expect("default taxonomy is valid")
    }
}

/// `{image_file}-{index}`, where `image_file` starts with `{cruise}_`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpecimenId {
    pub cruise: String,
    pub image_file: String,
    pub index: u32,
}

impl SpecimenId {
    pub fn new(cruise: &str, image_file: &str, index: u32) -> Result<Self> {
        if index < 1 {
            return Err(Error::InvalidId(format!("index must be >= 1, got {index}")));
        }
        if cruise.is_empty() || cruise.contains('_') {
            return Err(Error::InvalidId(format!("bad cruise `{cruise}`")));
        }
        if !image_file
            .strip_prefix(cruise)
            .is_some_and(|rest| rest.starts_with('_') && rest.len() > 1)
        {
            return Err(Error::InvalidId(format!(
                "image file `{image_file}` must begin with `{cruise}_`"
            )));
        }
        Ok(Self {
            cruise: cruise.to_string(),
            image_file: image_file.to_string(),
            index,
        })
    }

    /// Trailing integer of the file stem, e.g. 73 for `JR255A_krill_image_73.jpeg`.
    pub fn sequence_number(&self) -> Option<u64> {
        let stem = self
            .image_file
            .rsplit_once('.')
            .map_or(self.image_file.as_str(), |(s, _)| s);
        let digits: String = stem
            .chars()
            .rev()
            .take_while(|c| c.is_ascii_digit())
            .collect::<Vec<_>>()
            .into_iter()
            .rev()
            .collect();
        digits.parse().ok()
    }
}

impl fmt::Display for SpecimenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.image_file, self.index)
    }
}

impl FromStr for SpecimenId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (file, index) = s
            .rsplit_once('-')
            .ok_or_else(|| Error::InvalidId(format!("`{s}` has no `-index` suffix")))?;
        let index: u32 = index
            .parse()
            .map_err(|_| Error::InvalidId(format!("`{s}` has non-numeric index")))?;
        let cruise = file
            .split_once('_')
            .map(|(c, _)| c)
            .ok_or_else(|| Error::InvalidId(format!("`{s}` has no cruise prefix")))?;
        SpecimenId::new(cruise, file, index)
    }
}

/// Render the canonical specimen id string.
pub fn render_specimen_id(cruise: &str, image_file: &str, index: u32) -> Result<String> {
    SpecimenId::new(cruise, image_file, index).map(|id| id.to_string())
}

/// One row of the specimen table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecimenRecord {
    pub length_mm: u32,
    pub maturity: MaturityLabel,
    pub cruise: String,
    pub bbox: BBox,
    pub id: SpecimenId,
    pub alt_id: SpecimenId,
    pub view: View,
    pub event: u32,
    pub net: u32,
    pub board: u32,
}

impl SpecimenRecord {
    pub fn validate(&self) -> Result<()> {
        if self.length_mm < 1 {
            return Err(Error::Manifest("length_mm must be ≥ 1".into()));
        }
        if self.id == self.alt_id {
            return Err(Error::Manifest("ID equals alternative view ID".into()));
        }
        if self.id.image_file == self.alt_id.image_file {
            return Err(Error::Manifest(
                "ID and alternative view ID refer to the same image".into(),
            ));
        }
        if self.id.index != self.alt_id.index {
            return Err(Error::Manifest(format!(
                "index mismatch between ID ({}) and alternative view ID ({})",
                self.id.index, self.alt_id.index
            )));
        }
        if self.id.cruise != self.cruise || self.alt_id.cruise != self.cruise {
            return Err(Error::Manifest(format!(
                "IDs must begin with cruise `{}`",
                self.cruise
            )));
        }
        Ok(())
    }
}

impl Labeled for SpecimenRecord {
    fn maturity(&self) -> &MaturityLabel {
        &self.maturity
    }
}

/// One full-board photograph. Pixels are loaded on demand.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BoardImage {
    pub file: String,
    pub path: PathBuf,
    pub cruise: String,
    pub width: u32,
    pub height: u32,
    pub view: View,
    pub paired_file: Option<String>,
}

impl BoardImage {
    pub fn load_rgb(&self) -> Result<RgbImage> {
        let img = image::open(&self.path)?;
        Ok(img.to_rgb8())
    }
}

/// Validated collection of specimen records and their boards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    records: Vec<SpecimenRecord>,
    boards: Vec<BoardImage>,
    pub taxonomy: Taxonomy,
}

impl DatasetManifest {
    pub fn new(
        records: Vec<SpecimenRecord>,
        boards: Vec<BoardImage>,
        taxonomy: Taxonomy,
    ) -> Result<Self> {
        let mut ids = HashSet::new();
        for r in &records {
            if !ids.insert(&r.id) {
                return Err(Error::Manifest(format!("duplicate id {}", r.id)));
            }
        }
        let files: HashMap<&str, &BoardImage> =
            boards.iter().map(|b| (b.file.as_str(), b)).collect();
        if files.len() != boards.len() {
            return Err(Error::Manifest("duplicate board file".into()));
        }
        for r in &records {
            let b = files
                .get(r.id.image_file.as_str())
                .ok_or_else(|| Error::Manifest(format!("record {} has no board image", r.id)))?;
            r.bbox.check_within(b.width, b.height)?;
        }
        Ok(Self {
            records,
            boards,
            taxonomy,
        })
    }

    pub fn records(&self) -> &[SpecimenRecord] {
        &self.records
    }

    pub fn boards(&self) -> &[BoardImage] {
        &self.boards
    }

    pub fn board(&self, file: &str) -> Option<&BoardImage> {
        self.boards.iter().find(|b| b.file == file)
    }

    pub fn records_on<'a>(
        &'a self,
        file: &'a str,
    ) -> impl Iterator<Item = &'a SpecimenRecord> + 'a {
        self.records.iter().filter(move |r| r.id.image_file == file)
    }

    /// Sorted, de-duplicated cruise names.
    pub fn cruises(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.boards.iter().map(|b| b.cruise.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
