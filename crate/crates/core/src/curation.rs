//! Specimen crops on a fixed canvas, class filtering and weighting, and the
//! per-view resolution ladder.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{Rgb, RgbImage};
use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetManifest, Labeled, MaturityLabel, SpecimenRecord, Taxonomy, View};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::{resize_area, Mask};

pub const DEFAULT_BG: [u8; 3] = [56, 127, 245];
pub const RESIZE_METHOD: &str = "area-average";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropSpec {
    pub canvas_w: u32,
    pub canvas_h: u32,
    pub bg: [u8; 3],
}

impl Default for CropSpec {
    fn default() -> Self {
        Self {
            canvas_w: 1700,
            canvas_h: 500,
            bg: DEFAULT_BG,
        }
    }
}

impl CropSpec {
    /// Top-left placement of a `w x h` crop, centred with floor rounding.
    pub fn offset(&self, w: u32, h: u32) -> Result<(u32, u32)> {
        if w > self.canvas_w || h > self.canvas_h {
            return Err(Error::CropTooLarge {
                crop_w: w,
                crop_h: h,
                canvas_w: self.canvas_w,
                canvas_h: self.canvas_h,
            });
        }
        Ok(((self.canvas_w - w) / 2, (self.canvas_h - h) / 2))
    }
}

/// Exact sub-raster; out-of-bounds boxes are errors, never clipped.
pub fn extract_crop(image: &RgbImage, bbox: BBox) -> Result<RgbImage> {
    let (w, h) = image.dimensions();
    bbox.check_within(w, h)?;
    Ok(image::imageops::crop_imm(image, bbox.x, bbox.y, bbox.width, bbox.height).to_image())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Padded {
    pub image: RgbImage,
    /// Placement of the crop inside the canvas.
    pub placement: BBox,
}

impl Padded {
    pub fn unpad(&self) -> Result<RgbImage> {
        extract_crop(&self.image, self.placement)
    }
}

pub fn pad_center(crop: &RgbImage, spec: &CropSpec) -> Result<Padded> {
    let (w, h) = crop.dimensions();
    let (ox, oy) = spec.offset(w, h)?;
    let mut image = RgbImage::from_pixel(spec.canvas_w, spec.canvas_h, Rgb(spec.bg));
    image::imageops::replace(&mut image, crop, ox as i64, oy as i64);
    let placement = BBox::new(ox, oy, w.max(1), h.max(1))?;
    Ok(Padded { image, placement })
}

/// One specimen on the canvas.
#[derive(Debug, Clone)]
pub struct CuratedSample {
    pub image: RgbImage,
    /// Instance mask in canvas coordinates, when one was available.
    pub mask: Option<Mask>,
    pub record: SpecimenRecord,
    pub view: View,
    pub placement: BBox,
}

impl Labeled for CuratedSample {
    fn maturity(&self) -> &MaturityLabel {
        &self.record.maturity
    }
}

/// Crop, centre and (optionally) attach the instance mask for one record.
pub fn curate_record(
    board: &RgbImage,
    record: &SpecimenRecord,
    mask: Option<&Mask>,
    spec: &CropSpec,
) -> Result<CuratedSample> {
    let crop = extract_crop(board, record.bbox)?;
    let padded = pad_center(&crop, spec)?;
    let (ox, oy) = (padded.placement.x, padded.placement.y);
    let mask = mask.and_then(|m| {
        let clipped = Mask::from_fn(record.bbox, |x, y| m.get(x, y));
        let local = clipped.trimmed()?;
        let (mx, my) = local.origin();
        let (w, h) = local.window();
        Mask::from_bits(
            mx - record.bbox.x + ox,
            my - record.bbox.y + oy,
            w,
            h,
            local.bits().to_vec(),
        )
        .ok()
    });
    Ok(CuratedSample {
        image: padded.image,
        mask,
        record: record.clone(),
        view: record.view,
        placement: padded.placement,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    /// Removed because the label is explicitly excluded.
    pub excluded: BTreeMap<String, usize>,
    /// Removed because the label is not in the class list.
    pub not_included: BTreeMap<String, usize>,
    /// Removed because the class has fewer than `min_class_count` samples.
    pub too_rare: BTreeMap<String, usize>,
    pub retained: BTreeMap<String, usize>,
}

impl FilterReport {
    pub fn removed_total(&self) -> usize {
        [&self.excluded, &self.not_included, &self.too_rare]
            .iter()
            .flat_map(|m| m.values())
            .sum()
    }
}

/// Drop excluded labels, labels outside the class list, then classes with
/// fewer than `min_class_count` remaining samples. Order is preserved.
pub fn filter_taxonomy<T: Labeled>(samples: Vec<T>, taxonomy: &Taxonomy) -> (Vec<T>, FilterReport) {
    let mut report = FilterReport::default();
    let mut kept = Vec::with_capacity(samples.len());
    for s in samples {
        let label = s.maturity();
        if taxonomy.excluded.contains(label) {
            *report.excluded.entry(label.to_string()).or_default() += 1;
        } else if taxonomy.class_index(label).is_none() {
            *report.not_included.entry(label.to_string()).or_default() += 1;
        } else {
            kept.push(s);
        }
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in &kept {
        *counts.entry(s.maturity().to_string()).or_default() += 1;
    }
    let rare: BTreeMap<String, usize> = counts
        .iter()
        .filter(|(_, &c)| c < taxonomy.min_class_count)
        .map(|(l, &c)| (l.clone(), c))
        .collect();
    kept.retain(|s| !rare.contains_key(s.maturity().as_str()));
    report.too_rare = rare;
    for s in &kept {
        *report.retained.entry(s.maturity().to_string()).or_default() += 1;
    }
    if kept.is_empty() {
        warn!("taxonomy filter removed every sample");
    }
    (kept, report)
}

/// Inverse-frequency loss weights `w_j = n / (s_j * s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: BTreeMap<String, f64>,
}

impl ClassWeights {
    pub fn get(&self, label: &str) -> Option<f64> {
        self.weights.get(label).copied()
    }

    pub fn uniform<'a>(labels: impl IntoIterator<Item = &'a MaturityLabel>) -> Self {
        Self {
            weights: labels.into_iter().map(|l| (l.to_string(), 1.0)).collect(),
        }
    }
}

pub fn class_weights(counts: &BTreeMap<String, usize>) -> Result<ClassWeights> {
    if counts.is_empty() {
        return Err(Error::InvalidConfig("no classes to weight".into()));
    }
    if let Some((label, _)) = counts.iter().find(|(_, &c)| c == 0) {
        return Err(Error::InvalidConfig(format!(
            "class {label} has no samples; filter it out before weighting"
        )));
    }
    let n: usize = counts.values().sum();
    let s = counts.len() as f64;
    let weights = counts
        .iter()
        .map(|(l, &c)| (l.clone(), n as f64 / (c as f64 * s)))
        .collect();
    Ok(ClassWeights { weights })
}

/// Per-label counts of any labelled collection.
pub fn label_counts<'a, T: Labeled + 'a>(
    samples: impl IntoIterator<Item = &'a T>,
) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in samples {
        *counts.entry(s.maturity().to_string()).or_default() += 1;
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Resolution {
    pub width: u32,
    pub height: u32,
}

impl Resolution {
    pub const fn new(width: u32, height: u32) -> Self {
        Self { width, height }
    }

    pub fn is_canonical_aspect(&self) -> bool {
        // 3.4:1 exactly, in integers.
        self.width as u64 * 10 == self.height as u64 * 34
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width, self.height)
    }
}

impl FromStr for Resolution {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("resolution `{s}` is not WIDTHxHEIGHT"));
        let (w, h) = s.trim().split_once(['x', 'X']).ok_or_else(bad)?;
        let width: u32 = w.trim().parse().map_err(|_| bad())?;
        let height: u32 = h.trim().parse().map_err(|_| bad())?;
        if width == 0 || height == 0 {
            return Err(bad());
        }
        Ok(Self { width, height })
    }
}

impl TryFrom<String> for Resolution {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Resolution> for String {
    fn from(r: Resolution) -> String {
        r.to_string()
    }
}

pub const DEFAULT_LADDER: [Resolution; 5] = [
    Resolution::new(340, 100),
    Resolution::new(680, 200),
    Resolution::new(1020, 300),
    Resolution::new(1360, 400),
    Resolution::new(1700, 500),
];

/// Warn about targets that are not 3.4:1; they are still used.
pub fn check_ladder(resolutions: &[Resolution]) -> Vec<Resolution> {
    let odd: Vec<Resolution> = resolutions
        .iter()
        .filter(|r| !r.is_canonical_aspect())
        .copied()
        .collect();
    for r in &odd {
        warn!("resolution {r} is not 3.4:1; images will be distorted");
    }
    odd
}

/// One curated image at one ladder step.
#[derive(Debug, Clone)]
pub struct LadderImage {
    pub id: String,
    pub record: SpecimenRecord,
    pub image: RgbImage,
}

/// All samples of one view at one resolution.
#[derive(Debug, Clone)]
pub struct LadderDataset {
    pub view: View,
    pub resolution: Resolution,
    pub resize_method: String,
    pub samples: Vec<LadderImage>,
}

/// In-memory ladder: one dataset per (view, resolution), views kept apart.
pub fn build_resolution_ladder(
    samples: &[CuratedSample],
    resolutions: &[Resolution],
) -> Vec<LadderDataset> {
    check_ladder(resolutions);
    let mut out = Vec::new();
    for view in View::ALL {
        for &res in resolutions {
            let samples = samples
                .iter()
                .filter(|s| s.view == view)
                .map(|s| LadderImage {
                    id: s.record.id.to_string(),
                    record: s.record.clone(),
                    image: resize_area(&s.image, res.width, res.height),
                })
                .collect();
            out.push(LadderDataset {
                view,
                resolution: res,
                resize_method: RESIZE_METHOD.into(),
                samples,
            });
        }
    }
    out
}

/// Contents of `meta.json` at the root of a curated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationMeta {
    pub crop: CropSpec,
    pub resize_method: String,
    pub resolutions: Vec<Resolution>,
    pub taxonomy: Taxonomy,
    pub weights: ClassWeights,
    pub filter: FilterReport,
    pub counts: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LabelRow {
    id: String,
    length_mm: u32,
    maturity: String,
    cruise: String,
}

/// Source of board rasters by file name.
pub trait BoardLoader {
    fn load(&self, file: &str) -> Result<RgbImage>;
}

impl<F: Fn(&str) -> Result<RgbImage>> BoardLoader for F {
    fn load(&self, file: &str) -> Result<RgbImage> {
        self(file)
    }
}

/// Curate a manifest to disk, one board at a time: filter labels, crop and
/// centre every retained record, write each resolution of each view as
/// `{view}/{WxH}/{specimen_id}.png`, then `labels.csv` and `meta.json`.
pub fn write_curated_dataset<L: BoardLoader + ?Sized>(
    manifest: &DatasetManifest,
    loader: &L,
    spec: &CropSpec,
    resolutions: &[Resolution],
    out_dir: &Path,
) -> Result<CurationMeta> {
    check_ladder(resolutions);
    let records: Vec<SpecimenRecord> = manifest.records().to_vec();
    let (kept, filter) = filter_taxonomy(records, &manifest.taxonomy);
    let counts = label_counts(&kept);
    let weights = if counts.is_empty() {
        ClassWeights {
            weights: BTreeMap::new(),
        }
    } else {
        class_weights(&counts)?
    };
    for view in View::ALL {
        for r in resolutions {
            let d = out_dir.join(view.as_str()).join(r.to_string());
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    let mut by_board: BTreeMap<&str, Vec<&SpecimenRecord>> = BTreeMap::new();
    for r in &kept {
        by_board
            .entry(r.id.image_file.as_str())
            .or_default()
            .push(r);
    }
    for (file, recs) in by_board {
        let board = loader.load(file)?;
        for rec in recs {
            let sample = curate_record(&board, rec, None, spec)?;
            for res in resolutions {
                let img = resize_area(&sample.image, res.width, res.height);
                let path = curated_path(out_dir, rec.view, *res, &rec.id.to_string());
                img.save(&path)?;
            }
        }
    }
    let labels_path = out_dir.join("labels.csv");
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(&labels_path)?;
    for r in &kept {
        w.serialize(LabelRow {
            id: r.id.to_string(),
            length_mm: r.length_mm,
            maturity: r.maturity.to_string(),
            cruise: r.cruise.clone(),
        })?;
    }
    w.flush().map_err(|e| Error::io(&labels_path, e))?;
    let meta = CurationMeta {
        crop: *spec,
        resize_method: RESIZE_METHOD.into(),
        resolutions: resolutions.to_vec(),
        taxonomy: manifest.taxonomy.clone(),
        weights,
        filter,
        counts,
    };
    let meta_path = out_dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)
        .map_err(|e| Error::io(&meta_path, e))?;
    Ok(meta)
}

pub fn curated_path(root: &Path, view: View, res: Resolution, id: &str) -> PathBuf {
    root.join(view.as_str())
        .join(res.to_string())
        .join(format!("{id}.png"))
}
