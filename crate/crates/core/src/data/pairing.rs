use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{DatasetManifest, SpecimenId};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DroppedRecord {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingReport {
    pub retained: usize,
    pub dropped: Vec<DroppedRecord>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct PairingOutcome {
    pub manifest: DatasetManifest,
    pub report: PairingReport,
}

/// Keep only specimens recorded in both views with mutually consistent
/// alternative-view references.
///
/// A record whose partner points elsewhere taints both ends of the broken
/// link; records left without a partner are dropped as well.
pub fn pair_views(manifest: &DatasetManifest) -> Result<PairingOutcome> {
    let records = manifest.records();
    let by_id: HashMap<&SpecimenId, usize> = records
        .iter()
        .enumerate()
        .map(|(i, r)| (&r.id, i))
        .collect();

    let mut reasons: Vec<Option<String>> = vec![None; records.len()];
    for (i, r) in records.iter().enumerate() {
        match by_id.get(&r.alt_id) {
            None => {
                reasons[i].get_or_insert(format!("alternative view {} not present", r.alt_id));
            }
            Some(&j) => {
                let p = &records[j];
                if p.alt_id != r.id {
                    let why = format!(
                        "asymmetric pairing: {} -> {} but {} -> {}",
                        r.id, r.alt_id, p.id, p.alt_id
                    );
                    reasons[i].get_or_insert(why.clone());
                    reasons[j].get_or_insert(why);
                } else if p.view == r.view {
                    reasons[i].get_or_insert(format!("both views of {} are {}", r.id, r.view));
                }
            }
        }
    }
    // Partners of dropped records lose their pair.
    loop {
        let mut changed = false;
        for (i, r) in records.iter().enumerate() {
            if reasons[i].is_some() {
                continue;
            }
            let j = by_id[&r.alt_id];
            if reasons[j].is_some() {
                reasons[i] = Some(format!("partner {} was dropped", r.alt_id));
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    let mut report = PairingReport::default();
    let mut kept = Vec::new();
    let mut warned = HashSet::new();
    for (r, reason) in records.iter().zip(reasons) {
        match reason {
            Some(reason) => report.dropped.push(DroppedRecord {
                id: r.id.to_string(),
                reason,
            }),
            None => {
                if let (Some(a), Some(b)) = (r.id.sequence_number(), r.alt_id.sequence_number()) {
                    let mut key = [r.id.image_file.as_str(), r.alt_id.image_file.as_str()];
                    key.sort_unstable();
                    if a.abs_diff(b) != 1 && warned.insert(key) {
                        report.warnings.push(format!(
                            "paired images {} and {} are not consecutive",
                            r.id.image_file, r.alt_id.image_file
                        ));
                    }
                }
                kept.push(r.clone());
            }
        }
    }
    report.retained = kept.len();

    let used: HashSet<&str> = kept.iter().map(|r| r.id.image_file.as_str()).collect();
    let boards = manifest
        .boards()
        .iter()
        .filter(|b| used.contains(b.file.as_str()))
        .map(|b| {
            let mut b = b.clone();
            b.paired_file = kept
                .iter()
                .find(|r| r.id.image_file == b.file)
                .map(|r| r.alt_id.image_file.clone());
            b
        })
        .collect();
    let manifest = DatasetManifest::new(kept, boards, manifest.taxonomy.clone())?;
    Ok(PairingOutcome { manifest, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{BoardImage, MaturityLabel, SpecimenRecord, Taxonomy, View};
    use crate::geometry::BBox;

    fn rec(file: &str, alt: &str, index: u32, view: View) -> SpecimenRecord {
        SpecimenRecord {
            length_mm: 30,
            maturity: MaturityLabel::new("J").unwrap(),
            cruise: "JR255A".into(),
            bbox: BBox::new(0, 0, 10, 10).unwrap(),
            id: SpecimenId::new("JR255A", file, index).unwrap(),
            alt_id: SpecimenId::new("JR255A", alt, index).unwrap(),
            view,
            event: 1,
            net: 1,
            board: 1,
        }
    }

    fn manifest(records: Vec<SpecimenRecord>) -> DatasetManifest {
        let mut files: Vec<(String, View)> = records
            .iter()
            .map(|r| (r.id.image_file.clone(), r.view))
            .collect();
        files.sort();
        files.dedup();
        let boards = files
            .into_iter()
            .map(|(f, view)| BoardImage {
                path: f.clone().into(),
                file: f,
                cruise: "JR255A".into(),
                width: 100,
                height: 100,
                view,
                paired_file: None,
            })
            .collect();
        DatasetManifest::new(records, boards, Taxonomy::default()).unwrap()
    }

    const A: &str = "JR255A_krill_image_73.jpeg";
    const B: &str = "JR255A_krill_image_74.jpeg";
    const C: &str = "JR255A_krill_image_75.jpeg";

    #[test]
    fn mutual_pair_retained() {
        let m = manifest(vec![
            rec(A, B, 1, View::Dorsal),
            rec(B, A, 1, View::Lateral),
        ]);
        let out = pair_views(&m).unwrap();
        assert_eq!(out.report.retained, 2);
        assert!(out.report.dropped.is_empty());
        assert!(out.report.warnings.is_empty());
        assert_eq!(
            out.manifest.board(A).unwrap().paired_file.as_deref(),
            Some(B)
        );
    }

    #[test]
    fn missing_partner_dropped() {
        let m = manifest(vec![rec(A, B, 1, View::Dorsal)]);
        let out = pair_views(&m).unwrap();
        assert_eq!(out.report.retained, 0);
        assert_eq!(out.report.dropped.len(), 1);
        assert!(out.manifest.boards().is_empty());
    }

    #[test]
    fn asymmetric_rejects_both() {
        let m = manifest(vec![
            rec(A, B, 1, View::Dorsal),
            rec(B, C, 1, View::Lateral),
            rec(C, B, 1, View::Dorsal),
        ]);
        let out = pair_views(&m).unwrap();
        assert_eq!(out.report.retained, 0);
        assert!(out.report.dropped[0].reason.contains("asymmetric"));
        assert!(out.report.dropped[1].reason.contains("asymmetric"));
    }

    #[test]
    fn non_consecutive_warns() {
        let m = manifest(vec![
            rec(A, C, 1, View::Dorsal),
            rec(C, A, 1, View::Lateral),
        ]);
        let out = pair_views(&m).unwrap();
        assert_eq!(out.report.retained, 2);
        assert_eq!(out.report.warnings.len(), 1);
    }

    #[test]
    fn same_view_pair_dropped() {
        let m = manifest(vec![rec(A, B, 1, View::Dorsal), rec(B, A, 1, View::Dorsal)]);
        assert_eq!(pair_views(&m).unwrap().report.retained, 0);
    }

    /// Full-scale bookkeeping: 5095 complete pairs plus 334 orphans.
    #[test]
    fn full_scale_counts() {
        let mut records = Vec::new();
        for k in 0..5095u32 {
            let board = k / 25;
            let index = k % 25 + 1;
            let d = format!("JR255A_krill_image_{}.jpeg", 2 * board + 1);
            let l = format!("JR255A_krill_image_{}.jpeg", 2 * board + 2);
            records.push(rec(&d, &l, index, View::Dorsal));
            records.push(rec(&l, &d, index, View::Lateral));
        }
        for k in 0..334u32 {
            let d = format!("JR255A_krill_image_{}.jpeg", 100_000 + k);
            let l = format!("JR255A_krill_image_{}.jpeg", 200_000 + k);
            records.push(rec(&d, &l, 1, View::Dorsal));
        }
        assert_eq!(records.len(), 10524);
        let m = manifest(records);
        let out = pair_views(&m).unwrap();
        assert_eq!(out.report.retained, 10190);
        assert_eq!(out.report.retained, 2 * 5095);
        assert_eq!(out.report.dropped.len(), 334);
    }
}
