use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::{Mask, Rle};

/// Label carried by every instance.
pub const INSTANCE_LABEL: &str = "krill";

/// One instance: a non-empty mask plus an optional confidence. Ground truth
/// has no score and counts as 1.0.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceMask {
    pub mask: Mask,
    pub score: Option<f32>,
}

impl InstanceMask {
    pub fn new(mask: Mask, score: Option<f32>) -> Result<Self> {
        if mask.area() == 0 {
            return Err(Error::EmptyRegion);
        }
        if let Some(s) = score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::InvalidConfig(format!("score {s} outside [0, 1]")));
            }
        }
        Ok(Self { mask, score })
    }

    pub fn ground_truth(mask: Mask) -> Result<Self> {
        Self::new(mask, None)
    }

    pub fn effective_score(&self) -> f32 {
        self.score.unwrap_or(1.0)
    }

    pub fn label(&self) -> &'static str {
        INSTANCE_LABEL
    }
}

/// Instances found on one board with their derived boxes and position indices.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub file: String,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<InstanceMask>,
    pub boxes: Vec<BBox>,
    /// 1-based position index of each instance.
    pub indices: Vec<usize>,
}

impl DetectionResult {
    pub fn new(
        file: String,
        width: u32,
        height: u32,
        instances: Vec<InstanceMask>,
        boxes: Vec<BBox>,
        indices: Vec<usize>,
    ) -> Result<Self> {
        let n = instances.len();
        if boxes.len() != n || indices.len() != n {
            return Err(Error::InvalidConfig(
                "instances, boxes and indices differ in length".into(),
            ));
        }
        let mut sorted = indices.clone();
        sorted.sort_unstable();
        if sorted.iter().enumerate().any(|(i, &v)| v != i + 1) {
            return Err(Error::InvalidConfig(
                "indices are not a permutation of 1..N".into(),
            ));
        }
        Ok(Self {
            file,
            width,
            height,
            instances,
            boxes,
            indices,
        })
    }

    /// Instance positions sorted by index.
    pub fn in_index_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.instances.len()).collect();
        order.sort_by_key(|&i| self.indices[i]);
        order
    }

    pub fn to_file(&self) -> DetectionFile {
        let instances = self
            .in_index_order()
            .into_iter()
            .map(|i| InstanceRecord {
                bbox: self.boxes[i],
                score: self.instances[i].score.map(f64::from),
                index: self.indices[i],
                mask_rle: self.instances[i].mask.to_rle(self.width, self.height),
            })
            .collect();
        DetectionFile {
            file: self.file.clone(),
            width: self.width,
            height: self.height,
            instances,
        }
    }
}

/// On-disk per-board instance document, shared by detections and
/// ground-truth masks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionFile {
    pub file: String,
    pub width: u32,
    pub height: u32,
    pub instances: Vec<InstanceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceRecord {
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub index: usize,
    pub mask_rle: Rle,
}

impl DetectionFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn into_result(self) -> Result<DetectionResult> {
        let mut instances = Vec::new();
        let mut boxes = Vec::new();
        let mut indices = Vec::new();
        for rec in self.instances {
            let mask = rec.mask_rle.to_mask()?.ok_or(Error::EmptyRegion)?;
            instances.push(InstanceMask::new(mask, rec.score.map(|s| s as f32))?);
            boxes.push(rec.bbox);
            indices.push(rec.index);
        }
        DetectionResult::new(
            self.file,
            self.width,
            self.height,
            instances,
            boxes,
            indices,
        )
    }

    /// Instance masks in index order.
    pub fn masks(&self) -> Result<Vec<Mask>> {
        let mut recs: Vec<&InstanceRecord> = self.instances.iter().collect();
        recs.sort_by_key(|r| r.index);
        recs.iter()
            .map(|r| r.mask_rle.to_mask()?.ok_or(Error::EmptyRegion))
            .collect()
    }
}
