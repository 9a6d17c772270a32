//! Detection evaluation: IoU, COCO-style average precision and recall.
//!
//! Predictions are matched greedily per image, highest score first; each
//! prediction takes the unmatched ground truth with the best IoU at or above
//! the threshold (ties go to the earlier ground truth in canonical order).
//! Precision is interpolated at 101 recall points per threshold.

mod oracle;

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::Mask;

pub use oracle::{brute_force_ap, OracleResult, ORACLE_LIMIT};

/// Something with an area that can overlap another of its kind.
pub trait Region {
    fn area(&self) -> u64;
    fn intersection_area(&self, other: &Self) -> u64;
    /// Geometry-derived key used to order otherwise tied inputs.
    fn sort_key(&self) -> [u64; 5];
}

impl Region for BBox {
    fn area(&self) -> u64 {
        BBox::area(self)
    }

    fn intersection_area(&self, other: &Self) -> u64 {
        self.intersection(other).map_or(0, |b| b.area())
    }

    fn sort_key(&self) -> [u64; 5] {
        [
            self.y as u64,
            self.x as u64,
            self.width as u64,
            self.height as u64,
            BBox::area(self),
        ]
    }
}

impl Region for Mask {
    fn area(&self) -> u64 {
        Mask::area(self)
    }

    fn intersection_area(&self, other: &Self) -> u64 {
        Mask::intersection_area(self, other)
    }

    fn sort_key(&self) -> [u64; 5] {
        match self.tight_bbox() {
            Some(b) => [
                b.y as u64,
                b.x as u64,
                b.width as u64,
                b.height as u64,
                Mask::area(self),
            ],
            None => [0; 5],
        }
    }
}

/// Either kind of region; IoU across kinds is an error.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyRegion {
    Box(BBox),
    Mask(Mask),
}

impl AnyRegion {
    pub fn iou(&self, other: &AnyRegion) -> Result<f64> {
        match (self, other) {
            (AnyRegion::Box(a), AnyRegion::Box(b)) => iou(a, b),
            (AnyRegion::Mask(a), AnyRegion::Mask(b)) => iou(a, b),
            _ => Err(Error::MismatchedRegions),
        }
    }
}

/// Intersection over union of two non-empty regions.
pub fn iou<R: Region>(a: &R, b: &R) -> Result<f64> {
    let (aa, ba) = (a.area(), b.area());
    if aa == 0 || ba == 0 {
        return Err(Error::EmptyRegion);
    }
    let inter = a.intersection_area(b);
    Ok(inter as f64 / (aa + ba - inter) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IouKind {
    Mask,
    Box,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchSpec {
    pub iou_thresholds: Vec<f64>,
    pub iou_kind: IouKind,
    pub max_dets: usize,
}

impl Default for MatchSpec {
    fn default() -> Self {
        Self {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            iou_kind: IouKind::Mask,
            max_dets: 100,
        }
    }
}

impl MatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::InvalidConfig("no IoU thresholds".into()));
        }
        if self.iou_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0))
            || self.iou_thresholds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::InvalidConfig(
                "IoU thresholds must be strictly increasing within (0, 1]".into(),
            ));
        }
        if self.max_dets == 0 {
            return Err(Error::InvalidConfig("max_dets must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn threshold_key(t: f64) -> String {
    format!("{t:.2}")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scored<R> {
    pub region: R,
    pub score: f64,
}

/// Predictions and ground truth for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEval<R> {
    pub preds: Vec<Scored<R>>,
    pub gts: Vec<R>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct APReport {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub recall: f64,
    pub per_threshold: BTreeMap<String, f64>,
    pub n_images: usize,
    pub n_gts: usize,
    pub n_preds: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
    /// `[recall, precision]` points per threshold, in score order.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub pr_curves: BTreeMap<String, Vec<[f64; 2]>>,
}

/// Prediction indices by descending score, geometry and input position,
/// truncated to `max_dets`.
pub(crate) fn pred_order<R: Region>(preds: &[Scored<R>], max_dets: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .score
            .partial_cmp(&preds[a].score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| preds[a].region.sort_key().cmp(&preds[b].region.sort_key()))
            .then(a.cmp(&b))
    });
    order.truncate(max_dets);
    order
}

pub(crate) fn gt_order<R: Region>(gts: &[R]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..gts.len()).collect();
    order.sort_by(|&a, &b| gts[a].sort_key().cmp(&gts[b].sort_key()).then(a.cmp(&b)));
    order
}

/// IoU matrix `[pred][gt]` in canonical orders.
pub(crate) fn iou_matrix<R: Region>(
    image: &ImageEval<R>,
    preds: &[usize],
    gts: &[usize],
) -> Result<Vec<Vec<f64>>> {
    preds
        .iter()
        .map(|&p| {
            gts.iter()
                .map(|&g| iou(&image.preds[p].region, &image.gts[g]))
                .collect()
        })
        .collect()
}

/// Greedy matching outcome for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct GreedyMatch {
    /// Prediction indices in evaluation order.
    pub order: Vec<usize>,
    /// `tp[t][k]`: whether the k-th prediction in `order` is a true positive
    /// at threshold `t`.
    pub tp: Vec<Vec<bool>>,
}

pub fn greedy_match<R: Region>(
    image: &ImageEval<R>,
    thresholds: &[f64],
    max_dets: usize,
) -> Result<GreedyMatch> {
    let order = pred_order(&image.preds, max_dets);
    let gts = gt_order(&image.gts);
    let ious = iou_matrix(image, &order, &gts)?;
    let tp = thresholds
        .iter()
        .map(|&t| {
            let mut taken = vec![false; gts.len()];
            ious.iter()
                .map(|row| {
                    let mut best: Option<(usize, f64)> = None;
                    for (g, &v) in row.iter().enumerate() {
                        if taken[g] || v < t {
                            continue;
                        }
                        if best.is_none_or(|(_, b)| v > b) {
                            best = Some((g, v));
                        }
                    }
                    if let Some((g, _)) = best {
                        taken[g] = true;
                    }
                    best.is_some()
                })
                .collect()
        })
        .collect();
    Ok(GreedyMatch { order, tp })
}

/// Interpolated AP at 101 recall points from a score-ordered TP sequence.
fn interpolated_ap(tp: &[bool], n_gts: usize) -> (f64, f64, Vec<[f64; 2]>) {
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let (mut ntp, mut nfp) = (0usize, 0usize);
    for &hit in tp {
        if hit {
            ntp += 1;
        } else {
            nfp += 1;
        }
        recall.push(ntp as f64 / n_gts as f64);
        precision.push(ntp as f64 / (ntp + nfp) as f64);
    }
    let curve = recall
        .iter()
        .zip(&precision)
        .map(|(&r, &p)| [r, p])
        .collect();
    // Precision envelope, right to left.
    let mut envelope = precision.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let thr = r as f64 / 100.0;
        let i = recall.partition_point(|&x| x < thr);
        if i < envelope.len() {
            sum += envelope[i];
        }
    }
    let final_recall = recall.last().copied().unwrap_or(0.0);
    (sum / 101.0, final_recall, curve)
}

/// COCO-style AP over every image with greedy matching.
pub fn average_precision<R: Region>(images: &[ImageEval<R>], spec: &MatchSpec) -> Result<APReport> {
    spec.validate()?;
    let mut thresholds = spec.iou_thresholds.clone();
    for extra in [0.5, 0.75] {
        if !thresholds.iter().any(|&t| (t - extra).abs() < 1e-9) {
            thresholds.push(extra);
        }
    }

    // (score, image, rank, tp per threshold)
    let mut entries: Vec<(f64, usize, usize, Vec<bool>)> = Vec::new();
    let mut n_gts = 0;
    let mut n_preds = 0;
    for (img_idx, image) in images.iter().enumerate() {
        n_gts += image.gts.len();
        n_preds += image.preds.len();
        let m = greedy_match(image, &thresholds, spec.max_dets)?;
        for (rank, &p) in m.order.iter().enumerate() {
            let hits = m.tp.iter().map(|row| row[rank]).collect();
            entries.push((image.preds[p].score, img_idx, rank, hits));
        }
    }
    entries.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let mut flags = Vec::new();
    let mut per_t = Vec::with_capacity(thresholds.len());
    let mut curves = BTreeMap::new();
    if n_gts == 0 {
        let (ap, rec) = if entries.is_empty() {
            flags.push("no ground truth and no predictions: AP defined as 1.0".to_string());
            (1.0, 1.0)
        } else {
            flags.push("no ground truth: every prediction is a false positive".to_string());
            (0.0, 0.0)
        };
        per_t = vec![(ap, rec); thresholds.len()];
    } else {
        for (t_idx, &t) in thresholds.iter().enumerate() {
            let tp: Vec<bool> = entries.iter().map(|e| e.3[t_idx]).collect();
            let (ap, rec, curve) = interpolated_ap(&tp, n_gts);
            curves.insert(threshold_key(t), curve);
            per_t.push((ap, rec));
        }
    }

    let n_spec = spec.iou_thresholds.len();
    let per_threshold: BTreeMap<String, f64> = spec
        .iou_thresholds
        .iter()
        .zip(&per_t)
        .map(|(&t, &(ap, _))| (threshold_key(t), ap))
        .collect();
    curves.retain(|k, _| per_threshold.contains_key(k));
    let find = |target: f64| {
        thresholds
            .iter()
            .position(|&t| (t - target).abs() < 1e-9)
            .map(|i| per_t[i].0)
            .unwrap_or(0.0)
    };
    Ok(APReport {
        ap: per_t[..n_spec].iter().map(|p| p.0).sum::<f64>() / n_spec as f64,
        ap50: find(0.5),
        ap75: find(0.75),
        recall: per_t[..n_spec].iter().map(|p| p.1).sum::<f64>() / n_spec as f64,
        per_threshold,
        n_images: images.len(),
        n_gts,
        n_preds,
        flags,
        pr_curves: curves,
    })
}
