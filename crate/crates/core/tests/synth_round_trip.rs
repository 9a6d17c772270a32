use std::fs;

use krill_core::curation::{curate_record, CropSpec};
use krill_core::data::{pair_views, parse_manifest};
use krill_core::metrics::iou;
use krill_core::segmentation::{index_positions, DetectionFile};
use krill_core::synth::{SynthConfig, SynthPlan};
use krill_core::View;

fn plan() -> SynthPlan {
    SynthPlan::new(SynthConfig {
        n_boards: 3,
        specimens_per_board: 6,
        board_size: (900, 600),
        length_range_mm: (20, 40),
        seed: 11,
        ..SynthConfig::default()
    })
    .unwrap()
}

#[test]
fn written_dataset_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let plan = plan();
    let written = plan.write(dir.path()).unwrap();
    let boards = dir.path().join("boards");

    let text = fs::read(dir.path().join("table.csv")).unwrap();
    let parsed = parse_manifest(&text[..], &boards, plan.config.taxonomy(1).unwrap()).unwrap();
    assert!(parsed.rejections.is_empty(), "{:?}", parsed.rejections);
    assert_eq!(parsed.manifest.records(), written.records());

    // Every specimen appears in both views, so pairing keeps everything.
    let paired = pair_views(&parsed.manifest).unwrap();
    assert_eq!(paired.manifest.records().len(), 3 * 2 * 6);
    assert!(paired.report.dropped.is_empty());

    for board in parsed.manifest.boards() {
        let gt =
            DetectionFile::load(&dir.path().join(format!("masks/{}.json", board.file))).unwrap();
        let masks = gt.masks().unwrap();
        let records: Vec<_> = parsed.manifest.records_on(&board.file).collect();
        assert_eq!(masks.len(), records.len());
        for (inst, mask) in gt.instances.iter().zip(&masks) {
            assert_eq!(mask.tight_bbox(), Some(inst.bbox));
        }
        let mut idx: Vec<_> = gt.instances.iter().map(|i| i.index).collect();
        idx.sort();
        assert_eq!(idx, (1..=masks.len()).collect::<Vec<_>>());
    }
}

#[test]
fn unjittered_layout_matches_reading_order() {
    let plan = SynthPlan::new(SynthConfig {
        jitter_px: 0.0,
        max_rotation_deg: 0.0,
        ..plan().config
    })
    .unwrap();
    for i in 0..plan.boards.len() {
        let b = plan.render(i);
        let boxes: Vec<_> = b.records.iter().map(|r| r.bbox).collect();
        let want: Vec<_> = b.records.iter().map(|r| r.id.index as usize).collect();
        assert_eq!(index_positions(&boxes), want, "{}", b.file);
    }
}

#[test]
fn curated_masks_match_board_masks() {
    let plan = plan();
    let spec = CropSpec::default();
    for i in 0..plan.boards.len() {
        let b = plan.render(i);
        for (r, m) in b.records.iter().zip(&b.masks) {
            let s = curate_record(&b.image, r, Some(m), &spec).unwrap();
            assert_eq!(s.view, b.view);
            let local = s.mask.expect("mask inside its box");
            assert_eq!(local.area(), m.area());
            let back = local.translated(r.bbox.x, r.bbox.y);
            let shifted = krill_core::Mask::from_fn(
                krill_core::BBox::new(
                    r.bbox.x + s.placement.x,
                    r.bbox.y + s.placement.y,
                    r.bbox.width,
                    r.bbox.height,
                )
                .unwrap(),
                |x, y| m.get(x - s.placement.x, y - s.placement.y),
            );
            assert_eq!(iou(&back, &shifted).unwrap(), 1.0);
        }
    }
    assert!(plan.boards.iter().any(|b| b.view == View::Dorsal));
}
