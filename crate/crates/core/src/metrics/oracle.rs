//! Exhaustive-matching AP used to check the greedy evaluator on small cases.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use super::{gt_order, iou, pred_order, threshold_key, APReport, ImageEval, MatchSpec, Region};
use crate::error::{Error, Result};

/// Maximum total predictions and total ground truths accepted.
pub const ORACLE_LIMIT: usize = 6;

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub report: APReport,
    /// `tp[image][t][k]` for the k-th prediction in evaluation order.
    pub tp: Vec<Vec<Vec<bool>>>,
}

/// Best one-to-one matching for one image and threshold: maximal matched
/// count, and among those the TP pattern that is lexicographically greatest
/// in score order (earliest predictions matched first).
fn best_matching(ious: &[Vec<f64>], n_gts: usize, t: f64) -> Vec<bool> {
    fn rec(
        k: usize,
        ious: &[Vec<f64>],
        t: f64,
        used: &mut Vec<bool>,
        current: &mut Vec<bool>,
        best: &mut Option<Vec<bool>>,
    ) {
        if k == ious.len() {
            let better = match best {
                None => true,
                Some(b) => {
                    let (cn, bn) = (
                        current.iter().filter(|&&x| x).count(),
                        b.iter().filter(|&&x| x).count(),
                    );
                    cn > bn
                        || (cn == bn && current.as_slice().cmp(b.as_slice()) == Ordering::Greater)
                }
            };
            if better {
                *best = Some(current.clone());
            }
            return;
        }
        for g in 0..used.len() {
            if !used[g] && ious[k][g] >= t {
                used[g] = true;
                current.push(true);
                rec(k + 1, ious, t, used, current, best);
                current.pop();
                used[g] = false;
            }
        }
        current.push(false);
        rec(k + 1, ious, t, used, current, best);
        current.pop();
    }
    let mut best = None;
    rec(
        0,
        ious,
        t,
        &mut vec![false; n_gts],
        &mut Vec::new(),
        &mut best,
    );
    best.unwrap_or_default()
}

/// AP at one threshold by the direct definition: at each of 101 recall
/// levels, the highest precision attained at any recall at or above it.
fn direct_ap(tp_sorted: &[bool], n_gts: usize) -> (f64, f64) {
    let mut points = Vec::new();
    let mut hits = 0usize;
    for (i, &h) in tp_sorted.iter().enumerate() {
        if h {
            hits += 1;
        }
        points.push((hits as f64 / n_gts as f64, hits as f64 / (i + 1) as f64));
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        let mut best = 0.0f64;
        for &(rec, prec) in &points {
            if rec >= level && prec > best {
                best = prec;
            }
        }
        total += best;
    }
    (total / 101.0, points.last().map_or(0.0, |p| p.0))
}

pub fn brute_force_ap<R: Region>(
    images: &[ImageEval<R>],
    spec: &MatchSpec,
) -> Result<OracleResult> {
    spec.validate()?;
    let n_preds: usize = images.iter().map(|i| i.preds.len()).sum();
    let n_gts: usize = images.iter().map(|i| i.gts.len()).sum();
    if n_preds > ORACLE_LIMIT || n_gts > ORACLE_LIMIT {
        return Err(Error::OracleLimit(format!(
            "{n_preds} predictions / {n_gts} ground truths, limit {ORACLE_LIMIT}"
        )));
    }
    let thresholds = &spec.iou_thresholds;
    let mut tp_all = Vec::new();
    let mut scored: Vec<(f64, usize, usize)> = Vec::new();
    for (img_idx, image) in images.iter().enumerate() {
        let order = pred_order(&image.preds, spec.max_dets);
        let gts = gt_order(&image.gts);
        let mut ious = Vec::new();
        for &p in &order {
            let mut row = Vec::new();
            for &g in &gts {
                row.push(iou(&image.preds[p].region, &image.gts[g])?);
            }
            ious.push(row);
        }
        let per_t: Vec<Vec<bool>> = thresholds
            .iter()
            .map(|&t| best_matching(&ious, gts.len(), t))
            .collect();
        for (rank, &p) in order.iter().enumerate() {
            scored.push((image.preds[p].score, img_idx, rank));
        }
        tp_all.push(per_t);
    }
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap_or(Ordering::Equal)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });

    let ap_at = |t_idx: usize| -> (f64, f64) {
        if n_gts == 0 {
            return if scored.is_empty() {
                (1.0, 1.0)
            } else {
                (0.0, 0.0)
            };
        }
        let seq: Vec<bool> = scored
            .iter()
            .map(|&(_, i, k)| tp_all[i][t_idx][k])
            .collect();
        direct_ap(&seq, n_gts)
    };
    let values: Vec<(f64, f64)> = (0..thresholds.len()).map(ap_at).collect();
    let per_threshold: BTreeMap<String, f64> = thresholds
        .iter()
        .zip(&values)
        .map(|(&t, &(ap, _))| (threshold_key(t), ap))
        .collect();
    let at = |target: f64| {
        thresholds
            .iter()
            .position(|&t| (t - target).abs() < 1e-9)
            .map_or(0.0, |i| values[i].0)
    };
    let n = thresholds.len() as f64;
    let report = APReport {
        ap: values.iter().map(|v| v.0).sum::<f64>() / n,
        ap50: at(0.5),
        ap75: at(0.75),
        recall: values.iter().map(|v| v.1).sum::<f64>() / n,
        per_threshold,
        n_images: images.len(),
        n_gts,
        n_preds,
        flags: Vec::new(),
        pr_curves: BTreeMap::new(),
    };
    Ok(OracleResult { report, tp: tp_all })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BBox;
    use crate::metrics::{average_precision, IouKind, Scored};

    fn b(x: u32, y: u32, w: u32, h: u32) -> BBox {
        BBox::new(x, y, w, h).unwrap()
    }

    fn spec() -> MatchSpec {
        MatchSpec {
            iou_kind: IouKind::Box,
            ..MatchSpec::default()
        }
    }

    #[test]
    fn empty_preds_one_gt() {
        let imgs = vec![ImageEval::<BBox> {
            preds: vec![],
            gts: vec![b(0, 0, 4, 4)],
        }];
        assert_eq!(brute_force_ap(&imgs, &spec()).unwrap().report.ap, 0.0);
    }

    #[test]
    fn limit_enforced() {
        let imgs = vec![ImageEval {
            preds: (0..7)
                .map(|i| Scored {
                    region: b(i * 10, 0, 5, 5),
                    score: 0.5,
                })
                .collect(),
            gts: vec![],
        }];
        assert!(matches!(
            brute_force_ap(&imgs, &spec()),
            Err(Error::OracleLimit(_))
        ));
    }

    #[test]
    fn duplicates_agree() {
        let g = b(0, 0, 10, 10);
        let imgs = vec![ImageEval {
            preds: vec![
                Scored {
                    region: g,
                    score: 0.9,
                },
                Scored {
                    region: g,
                    score: 0.8,
                },
            ],
            gts: vec![g],
        }];
        let o = brute_force_ap(&imgs, &spec()).unwrap();
        assert_eq!(o.tp[0][0], vec![true, false]);
        let greedy = average_precision(&imgs, &spec()).unwrap();
        assert!((o.report.ap - greedy.ap).abs() < 1e-12);
    }

    #[test]
    fn finds_matching_greedy_misses() {
        // p1 overlaps g1 best and g2 less; p2 overlaps only g1.
        let g1 = b(0, 0, 10, 10);
        let g2 = b(4, 0, 10, 10);
        let p1 = b(2, 0, 10, 10);
        let p2 = b(0, 0, 9, 10);
        let imgs = vec![ImageEval {
            preds: vec![
                Scored {
                    region: p1,
                    score: 0.9,
                },
                Scored {
                    region: p2,
                    score: 0.8,
                },
            ],
            gts: vec![g1, g2],
        }];
        let s = MatchSpec {
            iou_thresholds: vec![0.6],
            ..spec()
        };
        let o = brute_force_ap(&imgs, &s).unwrap();
        assert_eq!(o.tp[0][0], vec![true, true]);
        let greedy = crate::metrics::greedy_match(&imgs[0], &s.iou_thresholds, 100).unwrap();
        assert_eq!(greedy.tp[0], vec![true, false]);
    }
}
