//! Acceptance gates. Prints one PASS/FAIL line per gate and exits nonzero if
//! any gate fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use image::{Rgb, RgbImage};
use krill_core::curation::{class_weights, extract_crop, pad_center, CropSpec};
use krill_core::data::{parse_manifest, write_manifest};
use krill_core::estimation::{test_specimens, LadderConfig, LadderReport, Task};
use krill_core::metrics::{
    average_precision, brute_force_ap, greedy_match, ImageEval, IouKind, MatchSpec, Scored,
    ORACLE_LIMIT,
};
use krill_core::segmentation::{cruise_folds, random_test_size, split_dataset, SplitPolicy};
use krill_core::synth::{SynthConfig, SynthPlan};
use krill_core::{BBox, Taxonomy, View};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn krill(ws: &Path, args: &[&str]) -> Result<Value, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_krill"))
        .args(args)
        .env("KRILL_WORKSPACE", ws)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!(
            "krill {} failed: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ));
    }
    serde_json::from_slice(&out.stdout)
        .map_err(|e| format!("krill {}: bad summary: {e}", args.join(" ")))
}

fn metric(summary: &Value, key: &str) -> Result<f64, String> {
    summary["metrics"][key]
        .as_f64()
        .ok_or_else(|| format!("summary has no metric {key}"))
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(
        rng.random_range(0..16),
        rng.random_range(0..16),
        rng.random_range(1..12),
        rng.random_range(1..12),
    )
    .unwrap()
}

fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let spec = MatchSpec {
        iou_kind: IouKind::Box,
        ..MatchSpec::default()
    };
    let (mut cases, mut compared, mut worst) = (0usize, 0usize, 0f64);
    while compared < 500 {
        ensure!(
            cases < 20_000,
            "only {compared} of {cases} cases had optimal greedy matching"
        );
        cases += 1;
        let n_p = rng.random_range(0..=5usize.min(ORACLE_LIMIT));
        let n_g = rng.random_range(0..=5usize.min(ORACLE_LIMIT));
        let image = ImageEval {
            preds: (0..n_p)
                .map(|_| Scored {
                    region: random_box(&mut rng),
                    score: rng.random_range(1..=9) as f64 / 10.0,
                })
                .collect(),
            gts: (0..n_g).map(|_| random_box(&mut rng)).collect(),
        };
        let greedy =
            greedy_match(&image, &spec.iou_thresholds, spec.max_dets).map_err(|e| e.to_string())?;
        let images = [image];
        let oracle = brute_force_ap(&images, &spec).map_err(|e| e.to_string())?;
        if greedy.tp != oracle.tp[0] {
            continue;
        }
        compared += 1;
        let fast = average_precision(&images, &spec).map_err(|e| e.to_string())?;
        let slow = &oracle.report;
        let mut diffs = vec![
            (fast.ap - slow.ap).abs(),
            (fast.ap50 - slow.ap50).abs(),
            (fast.ap75 - slow.ap75).abs(),
            (fast.recall - slow.recall).abs(),
        ];
        for (k, v) in &fast.per_threshold {
            diffs.push((v - slow.per_threshold[k]).abs());
        }
        let d = diffs.into_iter().fold(0.0, f64::max);
        worst = worst.max(d);
        ensure!(d <= 1e-9, "case {cases}: AP differs by {d:e}");
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!(
        "{compared} of {cases} cases compared, max |diff| {worst:e}, {secs:.2} s"
    ))
}

fn ap_hand_case() -> Outcome {
    // Prediction covers exactly half of the ground truth: IoU = 0.5.
    let gt = BBox::new(0, 0, 10, 10).unwrap();
    let pred = BBox::new(0, 0, 10, 5).unwrap();
    let images = [ImageEval {
        preds: vec![Scored {
            region: pred,
            score: 0.9,
        }],
        gts: vec![gt],
    }];
    let spec = MatchSpec {
        iou_kind: IouKind::Box,
        ..MatchSpec::default()
    };
    let r = average_precision(&images, &spec).map_err(|e| e.to_string())?;
    ensure!(
        r.ap == 0.10 && r.ap50 == 1.0 && r.ap75 == 0.0,
        "ap {} ap50 {} ap75 {}",
        r.ap,
        r.ap50,
        r.ap75
    );
    Ok(format!("ap {} ap50 {} ap75 {}", r.ap, r.ap50, r.ap75))
}

fn class_weight_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0f64;
    for _ in 0..100 {
        let k = rng.random_range(1..=8);
        let counts: BTreeMap<String, usize> = (0..k)
            .map(|j| (format!("C{j}"), rng.random_range(1..=5000usize)))
            .collect();
        let n: usize = counts.values().sum();
        let w = class_weights(&counts).map_err(|e| e.to_string())?;
        let total: f64 = counts
            .iter()
            .map(|(l, &s)| w.get(l).unwrap() * s as f64)
            .sum();
        worst = worst.max((total - n as f64).abs());
    }
    ensure!(worst <= 1e-9, "sum w_j s_j off by {worst:e}");
    for k in 1..=8 {
        let counts: BTreeMap<String, usize> = (0..k).map(|j| (format!("C{j}"), 37)).collect();
        let w = class_weights(&counts).map_err(|e| e.to_string())?;
        ensure!(
            w.weights.values().all(|&v| v == 1.0),
            "balanced {k} classes: {:?}",
            w.weights
        );
    }
    Ok(format!(
        "100 maps, max |sum - n| {worst:e}; balanced weights all 1.0"
    ))
}

fn pad_extract_round_trip() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let board = RgbImage::from_fn(1800, 640, |_, _| {
        Rgb([rng.random(), rng.random(), rng.random()])
    });
    let spec = CropSpec::default();
    let bg = Rgb([56u8, 127, 245]);
    ensure!(spec.bg == bg.0, "default background is {:?}", spec.bg);
    for case in 0..1000 {
        let w = rng.random_range(1..=1700u32);
        let h = rng.random_range(1..=500u32);
        let x = rng.random_range(0..=1800 - w);
        let y = rng.random_range(0..=640 - h);
        let crop =
            extract_crop(&board, BBox::new(x, y, w, h).unwrap()).map_err(|e| e.to_string())?;
        let padded = pad_center(&crop, &spec).map_err(|e| e.to_string())?;
        let (ox, oy) = ((1700 - w) / 2, (500 - h) / 2);
        ensure!(
            padded.image.dimensions() == (1700, 500),
            "case {case}: canvas {:?}",
            padded.image.dimensions()
        );
        for (px, py, p) in padded.image.enumerate_pixels() {
            let inside = px >= ox && px < ox + w && py >= oy && py < oy + h;
            let want = if inside {
                *board.get_pixel(x + px - ox, y + py - oy)
            } else {
                bg
            };
            ensure!(
                *p == want,
                "case {case} ({w}x{h}): pixel ({px},{py}) is {p:?}, want {want:?}"
            );
        }
        let back = padded.unpad().map_err(|e| e.to_string())?;
        ensure!(back == crop, "case {case}: unpad differs");
    }
    Ok("1000 crops bit-exact, background exact".into())
}

const SAMPLE_TABLE: &str = "\
length,maturity,cruise,x,y,width,height,ID,Alternative view ID,position,event,net,board
34,FS1,JR255A,469,751,869,114,JR255A_krill_image_73.jpeg-1,JR255A_krill_image_74.jpeg-1,Dorsal,78,2,3
23,J,JR255A,1368,869,537,118,JR255A_krill_image_73.jpeg-2,JR255A_krill_image_74.jpeg-2,Dorsal,78,2,3
25,J,JR255A,2207,851,560,123,JR255A_krill_image_73.jpeg-3,JR255A_krill_image_74.jpeg-3,Dorsal,78,2,3
29,J,JR255A,3172,819,746,168,JR255A_krill_image_73.jpeg-4,JR255A_krill_image_74.jpeg-4,Dorsal,78,2,3
40,MS1,JR255A,4319,783,1038,191,JR255A_krill_image_73.jpeg-5,JR255A_krill_image_74.jpeg-5,Dorsal,78,2,3
";

fn manifest_round_trip() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    RgbImage::from_pixel(6048, 4032, Rgb([56, 127, 245]))
        .save(dir.path().join("JR255A_krill_image_73.jpeg"))
        .map_err(|e| e.to_string())?;
    let first = parse_manifest(SAMPLE_TABLE.as_bytes(), dir.path(), Taxonomy::default())
        .map_err(|e| e.to_string())?;
    ensure!(
        first.rejections.is_empty() && first.manifest.records().len() == 5,
        "sample table rows: {} records, rejections {:?}",
        first.manifest.records().len(),
        first.rejections
    );
    let r0 = &first.manifest.records()[0];
    ensure!(
        r0.length_mm == 34 && r0.maturity.as_str() == "FS1" && r0.view == View::Dorsal,
        "first row parsed as {r0:?}"
    );
    let mut text = Vec::new();
    write_manifest(&first.manifest, &mut text).map_err(|e| e.to_string())?;
    let second = parse_manifest(text.as_slice(), dir.path(), Taxonomy::default())
        .map_err(|e| e.to_string())?;
    ensure!(
        second.manifest == first.manifest,
        "sample table round trip changed the manifest"
    );

    let synth_dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let plan = SynthPlan::new(SynthConfig {
        n_boards: 6,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    plan.write(synth_dir.path()).map_err(|e| e.to_string())?;
    let table = fs::File::open(synth_dir.path().join("table.csv")).map_err(|e| e.to_string())?;
    let parsed = parse_manifest(table, &synth_dir.path().join("boards"), Taxonomy::default())
        .map_err(|e| e.to_string())?;
    ensure!(
        parsed.rejections.is_empty(),
        "synthetic rejections: {:?}",
        parsed.rejections
    );
    let mut got = parsed.manifest.records().to_vec();
    let mut want = plan.records();
    got.sort_by(|a, b| a.id.cmp(&b.id));
    want.sort_by(|a, b| a.id.cmp(&b.id));
    ensure!(got == want, "synthetic records differ from the plan");
    Ok(format!(
        "sample table 5 rows equal after round trip; {} synthetic rows, 0 rejections",
        got.len()
    ))
}

fn split_correctness() -> Outcome {
    let (_, manifest) = krill_core::synth::generate(SynthConfig {
        n_boards: 10,
        specimens_per_board: 4,
        ..SynthConfig::default()
    })
    .map_err(|e| e.to_string())?;
    let all: BTreeSet<String> = manifest.boards().iter().map(|b| b.file.clone()).collect();
    let folds = cruise_folds(&manifest).map_err(|e| e.to_string())?;
    ensure!(folds.len() == 5, "{} folds", folds.len());
    let mut covered = BTreeSet::new();
    for (cruise, split) in &folds {
        for f in &split.test {
            ensure!(covered.insert(f.clone()), "{f} tested twice");
            ensure!(
                manifest.board(f).unwrap().cruise == *cruise,
                "{f} is not from {cruise}"
            );
        }
        let train: BTreeSet<_> = split.train.iter().cloned().collect();
        let test: BTreeSet<_> = split.test.iter().cloned().collect();
        ensure!(train.is_disjoint(&test), "fold {cruise} overlaps");
        ensure!(&train | &test == all, "fold {cruise} misses boards");
    }
    ensure!(covered == all, "folds do not cover every board");

    let a = split_dataset(&manifest, &SplitPolicy::Random80_20, 3).map_err(|e| e.to_string())?;
    let b = split_dataset(&manifest, &SplitPolicy::Random80_20, 3).map_err(|e| e.to_string())?;
    ensure!(a == b, "same seed gave different splits");
    let train: BTreeSet<_> = a.train.iter().cloned().collect();
    let test: BTreeSet<_> = a.test.iter().cloned().collect();
    ensure!(
        train.is_disjoint(&test) && &train | &test == all,
        "random split is not a partition"
    );
    ensure!(
        test.len() == random_test_size(all.len()),
        "test size {}",
        test.len()
    );
    Ok(format!(
        "5 folds partition {} boards; random split {}/{} disjoint and repeatable",
        all.len(),
        train.len(),
        test.len()
    ))
}

/// Full synthetic pipeline through the CLI, shared by the detection,
/// estimation and bootstrap gates.
struct EndToEnd {
    ws: tempfile::TempDir,
    evaluate: Value,
    bootstrap: Value,
    train_secs: f64,
    detect_secs: f64,
}

fn end_to_end() -> Result<EndToEnd, String> {
    let ws = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = ws.path();
    krill(p, &["synth", "--boards", "60", "--seed", "7"])?;
    krill(p, &["ingest"])?;
    let reference = p.join("masks");
    let boot_dir = p.join("masks_bootstrap");
    let bootstrap = krill(
        p,
        &[
            "bootstrap-masks",
            "--out",
            boot_dir.to_str().unwrap(),
            "--reference",
            reference.to_str().unwrap(),
        ],
    )?;
    let t = Instant::now();
    krill(
        p,
        &[
            "train-seg",
            "--epochs",
            "30",
            "--split",
            "random",
            "--seed",
            "7",
        ],
    )?;
    let train_secs = t.elapsed().as_secs_f64();
    let t = Instant::now();
    krill(p, &["detect", "--test-only"])?;
    let detect_secs = t.elapsed().as_secs_f64();
    let evaluate = krill(p, &["evaluate"])?;
    krill(p, &["curate", "--resolutions", "340x100"])?;
    krill(p, &["ladder", "--resolutions", "340x100"])?;
    Ok(EndToEnd {
        ws,
        evaluate,
        bootstrap,
        train_secs,
        detect_secs,
    })
}

fn detection_gate(e: &EndToEnd) -> Outcome {
    let ap = metric(&e.evaluate, "ap")?;
    let ap50 = metric(&e.evaluate, "ap50")?;
    let boards = metric(&e.evaluate, "boards")?;
    let detail = format!(
        "AP {:.2}% AP50 {:.2}% on {boards} held-out boards; train {:.0} s, detect {:.0} s (CPU)",
        100.0 * ap,
        100.0 * ap50,
        e.train_secs,
        e.detect_secs
    );
    ensure!(ap50 >= 0.90 && ap >= 0.60, "{detail}");
    ensure!(e.train_secs + e.detect_secs <= 4.0 * 3600.0, "{detail}");
    Ok(detail)
}

fn estimation_gate(e: &EndToEnd) -> Outcome {
    let text = fs::read_to_string(e.ws.path().join("reports/ladder/ladder.json"))
        .map_err(|e| e.to_string())?;
    let report: LadderReport = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let res = "340x100".parse().unwrap();

    let mut labels = csv::Reader::from_path(e.ws.path().join("curated/labels.csv"))
        .map_err(|e| e.to_string())?;
    let rows: Vec<(String, u32, String)> = labels.deserialize().map(|r| r.unwrap()).collect();
    let mut parts = Vec::new();
    for view in View::ALL {
        let len = report
            .cell(view, res, Task::Length)
            .ok_or(format!("{view} length cell missing"))?;
        let mat = report
            .cell(view, res, Task::Maturity)
            .ok_or(format!("{view} maturity cell missing"))?;
        let mean = len.mean_length_mm.ok_or("no mean length")?;
        ensure!(
            len.metric <= 0.05 * mean,
            "{view}: RMSE {:.3} mm > 5% of mean {mean:.2} mm",
            len.metric
        );
        ensure!(
            mat.metric >= 90.0,
            "{view}: maturity accuracy {:.2}%",
            mat.metric
        );

        // Supports recounted from the label table and the specimen split.
        let dir =
            e.ws.path()
                .join("curated")
                .join(view.as_str())
                .join("340x100");
        let present: Vec<&(String, u32, String)> = rows
            .iter()
            .filter(|r| dir.join(format!("{}.png", r.0)).exists())
            .collect();
        let test = test_specimens(
            present.iter().map(|r| r.0.as_str()),
            LadderConfig::default().seed,
        );
        let cm = mat.confusion.as_ref().ok_or("no confusion matrix")?;
        for (i, label) in cm.labels.iter().enumerate() {
            let want = present
                .iter()
                .filter(|r| test.contains(&r.0) && r.2 == *label)
                .count();
            let row: usize = cm.counts[i].iter().sum();
            ensure!(row == want, "{view} {label}: row sum {row}, support {want}");
        }
        ensure!(
            cm.total() == mat.n_test,
            "{view}: confusion total {} vs {}",
            cm.total(),
            mat.n_test
        );
        parts.push(format!(
            "{view} RMSE {:.3} mm ({:.2}% of {mean:.1}) accuracy {:.2}%",
            len.metric,
            100.0 * len.metric / mean,
            mat.metric
        ));
    }
    Ok(parts.join("; ") + "; confusion rows match supports")
}

fn bootstrap_gate(e: &EndToEnd) -> Outcome {
    let min = metric(&e.bootstrap, "iou_min")?;
    let mean = metric(&e.bootstrap, "iou_mean")?;
    let n = metric(&e.bootstrap, "masks")?;
    let empty = metric(&e.bootstrap, "empty_boxes")?;
    let detail = format!("{n} instances, min IoU {min:.4}, mean {mean:.4}, {empty} empty boxes");
    ensure!(min >= 0.95 && empty == 0.0, "{detail}");
    Ok(detail)
}

const SMALL_CONFIG: &str = r#"
[taxonomy]
included = ["J", "FS1", "MS1", "MA1", "MA2"]
excluded = ["M1", "A2", "U"]
min_class_count = 5

[segmentation]
epochs = 3
samples_per_board = 500

[curation]
resolutions = ["340x100"]

[estimation]
resolutions = ["340x100"]
epochs = 5
"#;

fn pipeline_hashes(ws: &Path) -> Result<Vec<(String, String)>, String> {
    fs::write(ws.join("krill.toml"), SMALL_CONFIG).map_err(|e| e.to_string())?;
    let boot = ws.join("boot");
    let boot = boot.to_str().unwrap();
    let steps: [&[&str]; 9] = [
        &["synth", "--boards", "4", "--seed", "3", "--per-board", "12"],
        &["ingest"],
        &["bootstrap-masks", "--out", boot],
        &["train-seg", "--seed", "5"],
        &["detect"],
        &["evaluate", "--all"],
        &["curate"],
        &[
            "train-est",
            "--view",
            "lateral",
            "--resolution",
            "340x100",
            "--task",
            "maturity",
        ],
        &["ladder"],
    ];
    steps
        .iter()
        .map(|args| {
            let s = krill(ws, args)?;
            let h = s["summary_hash"]
                .as_str()
                .ok_or("no summary hash")?
                .to_string();
            Ok((args[0].to_string(), h))
        })
        .collect()
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = pipeline_hashes(a.path())?;
    let second = pipeline_hashes(b.path())?;
    let rerun = pipeline_hashes(a.path())?;
    for ((cmd, h1), ((_, h2), (_, h3))) in first.iter().zip(second.iter().zip(&rerun)) {
        ensure!(h1 == h2, "{cmd}: hash differs between workspaces");
        ensure!(h1 == h3, "{cmd}: hash differs on rerun");
    }
    Ok(format!(
        "{} commands, identical across two workspaces and a rerun",
        first.len()
    ))
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() {
    let mut results: Vec<(&str, Outcome)> = Vec::new();
    let mut gate = |name: &'static str, f: &dyn Fn() -> Outcome| {
        let r = guarded(f);
        let (tag, msg) = match &r {
            Ok(m) => ("PASS", m.as_str()),
            Err(m) => ("FAIL", m.as_str()),
        };
        println!("{tag} {name}: {msg}");
        results.push((name, r));
    };
    gate("metric oracle equivalence", &oracle_equivalence);
    gate("AP hand case", &ap_hand_case);
    gate("class-weight identity", &class_weight_identity);
    gate("pad/extract round trip", &pad_extract_round_trip);
    gate("manifest round trip", &manifest_round_trip);
    gate("split correctness", &split_correctness);
    let pipeline = catch_unwind(end_to_end).unwrap_or_else(|_| Err("pipeline panicked".into()));
    match &pipeline {
        Ok(e) => {
            gate("synthetic detection", &|| detection_gate(e));
            gate("synthetic estimation", &|| estimation_gate(e));
            gate("box-to-mask bootstrap", &|| bootstrap_gate(e));
        }
        Err(err) => {
            for name in [
                "synthetic detection",
                "synthetic estimation",
                "box-to-mask bootstrap",
            ] {
                gate(name, &|| Err(format!("pipeline failed: {err}")));
            }
        }
    }
    gate("determinism", &determinism);
    let failed = results.iter().filter(|r| r.1.is_err()).count();
    println!("{} gates, {failed} failed", results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
