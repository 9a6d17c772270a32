//! Board-level instance segmentation: splits, detection, mask decoding,
//! position indexing and the box-to-mask bootstrapper.

mod detection;
mod model;

use std::collections::BTreeMap;

use image::RgbImage;
use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::{color_distance, label_components, largest_component, Mask};

pub use detection::{DetectionFile, DetectionResult, InstanceMask, InstanceRecord, INSTANCE_LABEL};
pub use model::{
    detect, non_max_suppression, train_segmenter, BoardSource, DirBoardSource, SegTrainConfig,
    Segmenter, TrainingBoard, TrainingLog,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitPolicy {
    #[serde(rename = "random80_20")]
    Random80_20,
    #[serde(rename = "leave_one_cruise_out")]
    LeaveOneCruiseOut(String),
}

impl Default for SplitPolicy {
    fn default() -> Self {
        SplitPolicy::Random80_20
    }
}

/// Board files on each side of a split, each sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Test-set size for a random 80/20 split of `n` boards.
pub fn random_test_size(n: usize) -> usize {
    if n < 2 {
        return 0;
    }
    ((n as f64 * 0.2).round() as usize).clamp(1, n - 1)
}

/// Split at board level. All records of a board stay on one side.
pub fn split_dataset(manifest: &DatasetManifest, policy: &SplitPolicy, seed: u64) -> Result<Split> {
    if manifest.boards().is_empty() {
        return Err(Error::InvalidConfig(
            "cannot split an empty manifest".into(),
        ));
    }
    let mut files: Vec<String> = manifest.boards().iter().map(|b| b.file.clone()).collect();
    files.sort();
    match policy {
        SplitPolicy::Random80_20 => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            files.shuffle(&mut rng);
            let n_test = random_test_size(files.len());
            let mut test = files.split_off(files.len() - n_test);
            files.sort();
            test.sort();
            Ok(Split { train: files, test })
        }
        SplitPolicy::LeaveOneCruiseOut(cruise) => {
            let known = manifest.cruises();
            if !known.contains(cruise) {
                return Err(Error::UnknownCruise {
                    cruise: cruise.clone(),
                    known,
                });
            }
            let (test, train): (Vec<String>, Vec<String>) = files
                .into_iter()
                .partition(|f| manifest.board(f).is_some_and(|b| &b.cruise == cruise));
            Ok(Split { train, test })
        }
    }
}

/// One leave-one-cruise-out split per cruise, in cruise order.
pub fn cruise_folds(manifest: &DatasetManifest) -> Result<Vec<(String, Split)>> {
    manifest
        .cruises()
        .into_iter()
        .map(|c| {
            let split = split_dataset(manifest, &SplitPolicy::LeaveOneCruiseOut(c.clone()), 0)?;
            Ok((c, split))
        })
        .collect()
}

/// Tight box of each instance mask (union over its components), clipped to
/// the frame. Empty or off-frame masks yield `None` and a warning.
pub fn decode_masks(masks: &[Mask], width: u32, height: u32) -> Vec<Option<BBox>> {
    masks
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let b = m.tight_bbox().and_then(|b| b.clip(width, height));
            if b.is_none() {
                warn!("instance {i} has an empty mask; dropped");
            }
            b
        })
        .collect()
}

/// Tight boxes of a labelled integer map (0 = background), keyed by label.
pub fn decode_label_map(labels: &[u32], width: u32, height: u32) -> Result<BTreeMap<u32, BBox>> {
    if labels.len() != (width as usize) * (height as usize) {
        return Err(Error::InvalidConfig(format!(
            "label map has {} cells, expected {width}x{height}",
            labels.len()
        )));
    }
    let mut ext: BTreeMap<u32, [u32; 4]> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let (x, y) = ((i % width as usize) as u32, (i / width as usize) as u32);
        let e = ext.entry(l).or_insert([x, y, x, y]);
        e[0] = e[0].min(x);
        e[1] = e[1].min(y);
        e[2] = e[2].max(x);
        e[3] = e[3].max(y);
    }
    ext.into_iter()
        .map(|(l, [x0, y0, x1, y1])| Ok((l, BBox::new(x0, y0, x1 - x0 + 1, y1 - y0 + 1)?)))
        .collect()
}

/// Assign 1-based reading-order positions: boxes are clustered into rows by
/// vertical centre (gap tolerance half the median height), rows run top to
/// bottom and boxes left to right within a row.
pub fn index_positions(boxes: &[BBox]) -> Vec<usize> {
    let n = boxes.len();
    if n == 0 {
        return Vec::new();
    }
    // Doubled centres keep everything integral.
    let key = |i: usize| {
        let b = &boxes[i];
        let (cx, cy) = b.center2();
        (cy, cx, b.width, b.height, b.y, b.x)
    };
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| key(i));

    let mut heights: Vec<u64> = boxes.iter().map(|b| 2 * b.height as u64).collect();
    heights.sort_unstable();
    // Doubled median height, halved for the tolerance: still in doubled units.
    let median2 = if n % 2 == 1 {
        heights[n / 2] as f64
    } else {
        (heights[n / 2 - 1] + heights[n / 2]) as f64 / 2.0
    };
    let tol2 = 0.5 * median2;

    // Single linkage: a gap larger than the tolerance starts a new row.
    let mut rows: Vec<Vec<usize>> = Vec::new();
    let mut prev_cy = 0u64;
    for i in order {
        let cy = boxes[i].center2().1;
        match rows.last_mut() {
            Some(row) if (cy - prev_cy) as f64 <= tol2 => row.push(i),
            _ => rows.push(vec![i]),
        }
        prev_cy = cy;
    }
    let mut out = vec![0; n];
    let mut next = 1;
    for mut row in rows {
        row.sort_by_key(|&i| {
            let b = &boxes[i];
            let (cx, cy) = b.center2();
            (cx, cy, b.width, b.height, b.x, b.y)
        });
        for i in row {
            out[i] = next;
            next += 1;
        }
    }
    out
}

/// Bootstrap masks from boxes: inside each box, pixels farther than `tol`
/// (Euclidean RGB) from `bg` are foreground; the largest 8-connected
/// component is kept. A box with no foreground yields `None` and a warning.
pub fn boxes_to_masks(
    image: &RgbImage,
    boxes: &[BBox],
    bg: [u8; 3],
    tol: f32,
) -> Result<Vec<Option<Mask>>> {
    if tol.is_nan() || tol < 0.0 {
        return Err(Error::InvalidConfig(format!(
            "tolerance must be >= 0, got {tol}"
        )));
    }
    let (w, h) = image.dimensions();
    boxes
        .iter()
        .enumerate()
        .map(|(i, b)| {
            b.check_within(w, h)?;
            let raw = Mask::from_fn(*b, |x, y| color_distance(image.get_pixel(x, y).0, bg) > tol);
            let m = largest_component(&raw);
            if m.is_none() {
                warn!("box {i} {:?} is entirely background", <[u32; 4]>::from(*b));
            }
            Ok(m)
        })
        .collect()
}

/// Split a binary frame into 8-connected instance masks.
pub fn components_to_masks(width: u32, height: u32, fg: &[bool]) -> Vec<Mask> {
    let (labels, comps) = label_components(width, height, fg);
    comps
        .iter()
        .map(|c| {
            let b = c.bbox;
            Mask::from_fn(b, |x, y| labels[(y * width + x) as usize] == c.label)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{SynthConfig, SynthPlan};
    use image::Rgb;
    use proptest::prelude::*;

    fn b(x: u32, y: u32, w: u32, h: u32) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn centred(cx: u32, cy: u32) -> BBox {
        b(cx - 20, cy - 10, 40, 20)
    }

    #[test]
    fn square_decodes_to_its_box() {
        let m = Mask::from_fn(b(0, 0, 30, 30), |x, y| {
            (5..15).contains(&x) && (5..15).contains(&y)
        });
        assert_eq!(decode_masks(&[m], 30, 30), vec![Some(b(5, 5, 10, 10))]);
    }

    #[test]
    fn two_components_union_and_full_frame() {
        let m = Mask::from_fn(b(0, 0, 20, 20), |x, y| {
            (x < 2 && y < 2) || (x > 15 && y > 17)
        });
        assert_eq!(decode_masks(&[m], 20, 20), vec![Some(b(0, 0, 20, 20))]);
        let full = Mask::from_fn(b(0, 0, 8, 6), |_, _| true);
        let empty = Mask::empty(0, 0, 3, 3);
        assert_eq!(
            decode_masks(&[full, empty], 8, 6),
            vec![Some(b(0, 0, 8, 6)), None]
        );
    }

    #[test]
    fn label_map_boxes() {
        let mut labels = vec![0u32; 10 * 5];
        labels[11] = 3;
        labels[2 * 10 + 4] = 3;
        labels[49] = 1;
        let got = decode_label_map(&labels, 10, 5).unwrap();
        assert_eq!(got[&3], b(1, 1, 4, 2));
        assert_eq!(got[&1], b(9, 4, 1, 1));
    }

    #[test]
    fn raster_order_examples() {
        let boxes = [centred(50, 100), centred(600, 100), centred(50, 300)];
        assert_eq!(index_positions(&boxes), vec![1, 2, 3]);
        // Same centre: narrower first, then shorter.
        let boxes = [b(0, 0, 10, 10), b(1, 1, 8, 8), b(1, 0, 8, 10)];
        assert_eq!(index_positions(&boxes), vec![3, 1, 2]);
    }

    #[test]
    fn synthetic_layout_order() {
        let plan = SynthPlan::new(SynthConfig {
            n_boards: 3,
            ..SynthConfig::default()
        })
        .unwrap();
        for i in 0..plan.boards.len() {
            let masks = plan.board_masks(i);
            let boxes: Vec<BBox> = masks.iter().map(|m| m.tight_bbox().unwrap()).collect();
            let idx = index_positions(&boxes);
            assert_eq!(
                idx,
                (1..=boxes.len()).collect::<Vec<_>>(),
                "board {i}: {boxes:?}"
            );
        }
    }

    proptest! {
        #[test]
        fn index_is_permutation_and_order_free(
            raw in prop::collection::vec((0u32..500, 0u32..500, 1u32..60, 1u32..60), 1..30),
            seed in any::<u64>(),
        ) {
            let boxes: Vec<BBox> = raw.iter().map(|&(x, y, w, h)| b(x, y, w, h)).collect();
            let idx = index_positions(&boxes);
            let mut sorted = idx.clone();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (1..=boxes.len()).collect::<Vec<_>>());

            let mut perm: Vec<usize> = (0..boxes.len()).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<BBox> = perm.iter().map(|&i| boxes[i]).collect();
            let idx2 = index_positions(&shuffled);
            for (k, &i) in perm.iter().enumerate() {
                // Identical boxes may swap places without changing the layout.
                let same = boxes.iter().filter(|bb| **bb == boxes[i]).count();
                if same == 1 {
                    prop_assert_eq!(idx2[k], idx[i]);
                }
            }
        }

        #[test]
        fn decoded_box_is_tight(bits in prop::collection::vec(any::<bool>(), 64)) {
            let m = Mask::from_bits(0, 0, 8, 8, bits.clone()).unwrap();
            match decode_masks(&[m.clone()], 8, 8)[0] {
                None => prop_assert!(bits.iter().all(|&v| !v)),
                Some(bb) => {
                    let inside = |x: u32, y: u32| x >= bb.x && x < bb.right() && y >= bb.y && y < bb.bottom();
                    prop_assert!(m.pixels().all(|(x, y)| inside(x, y)));
                    prop_assert!(m.pixels().any(|(x, _)| x == bb.x));
                    prop_assert!(m.pixels().any(|(x, _)| x == bb.right() - 1));
                    prop_assert!(m.pixels().any(|(_, y)| y == bb.y));
                    prop_assert!(m.pixels().any(|(_, y)| y == bb.bottom() - 1));
                }
            }
        }
    }

    #[test]
    fn ellipse_on_exact_blue() {
        let bg = [56, 127, 245];
        let mut img = RgbImage::from_pixel(60, 40, Rgb(bg));
        let inside = |x: u32, y: u32| {
            let (dx, dy) = ((x as f32 - 30.0) / 20.0, (y as f32 - 20.0) / 10.0);
            dx * dx + dy * dy <= 1.0
        };
        for (x, y, p) in img.enumerate_pixels_mut() {
            if inside(x, y) {
                *p = Rgb([240, 120, 30]);
            }
        }
        let got = boxes_to_masks(&img, &[b(5, 5, 50, 30)], bg, 30.0).unwrap();
        let m = got[0].as_ref().unwrap();
        let expected = Mask::from_fn(b(0, 0, 60, 40), inside);
        assert_eq!(m.area(), expected.area());
        assert_eq!(m.intersection_area(&expected), expected.area());
    }

    #[test]
    fn zero_tolerance_grabs_box() {
        let img = RgbImage::from_fn(20, 20, |x, y| {
            Rgb([56 + (x % 3) as u8, 127, 245 - (y % 2) as u8])
        });
        let got = boxes_to_masks(&img, &[b(2, 2, 10, 10)], [56, 127, 245], 0.0).unwrap();
        assert!(got[0].as_ref().unwrap().area() >= 80);
        let blank = RgbImage::from_pixel(20, 20, Rgb([56, 127, 245]));
        assert_eq!(
            boxes_to_masks(&blank, &[b(2, 2, 10, 10)], [56, 127, 245], 30.0).unwrap()[0],
            None
        );
    }

    fn synth_manifest() -> DatasetManifest {
        let plan = SynthPlan::new(SynthConfig {
            n_boards: 10,
            specimens_per_board: 4,
            ..SynthConfig::default()
        })
        .unwrap();
        plan.manifest(
            std::path::Path::new("boards"),
            plan.config.taxonomy(1).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn random_split_sizes_and_determinism() {
        let m = synth_manifest();
        let s = split_dataset(&m, &SplitPolicy::Random80_20, 3).unwrap();
        assert_eq!(s.test.len(), 4);
        assert_eq!(s.train.len(), 16);
        assert!(s.train.iter().all(|f| !s.test.contains(f)));
        assert_eq!(s, split_dataset(&m, &SplitPolicy::Random80_20, 3).unwrap());
        assert_eq!(random_test_size(10), 2);
    }

    #[test]
    fn cruise_folds_partition() {
        let m = synth_manifest();
        let folds = cruise_folds(&m).unwrap();
        assert_eq!(folds.len(), 5);
        let mut all: Vec<String> = folds.iter().flat_map(|(_, s)| s.test.clone()).collect();
        all.sort();
        let mut boards: Vec<String> = m.boards().iter().map(|b| b.file.clone()).collect();
        boards.sort();
        assert_eq!(all, boards);
        let err = split_dataset(&m, &SplitPolicy::LeaveOneCruiseOut("JR999".into()), 0);
        assert!(matches!(err, Err(Error::UnknownCruise { .. })));
    }
}
