//! Pipeline subcommands. Each reads the workspace configuration, writes its
//! outputs under the workspace and returns a sealed [`Summary`].

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use image::RgbImage;
use krill_core::curation::{curated_path, write_curated_dataset, Resolution};
use krill_core::data::{pair_views, parse_manifest, write_manifest};
use krill_core::estimation::{
    prepare, run_ladder, test_specimens, train_cell, write_ladder_reports, EstimationItem,
    ItemStream, Task,
};
use krill_core::metrics::{average_precision, iou, ImageEval, MatchSpec, Scored};
use krill_core::segmentation::{
    boxes_to_masks, detect, split_dataset, train_segmenter, DetectionFile, DirBoardSource,
    InstanceRecord, Segmenter, Split, SplitPolicy,
};
use krill_core::synth::SynthPlan;
use krill_core::{DatasetManifest, Mask, MaturityLabel, View};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::summary::{Summary, SummaryBuilder};
use crate::workspace::{ensure_dir, list_images, Workspace};

/// `--split` values: `random` or `cruise:NAME`.
pub fn parse_split(s: &str) -> Result<SplitPolicy> {
    match s.split_once(':') {
        None if s == "random" => Ok(SplitPolicy::Random80_20),
        Some(("cruise", name)) if !name.is_empty() => {
            Ok(SplitPolicy::LeaveOneCruiseOut(name.to_string()))
        }
        _ => bail!("split must be `random` or `cruise:NAME`, got `{s}`"),
    }
}

/// Where `ingest` recorded the table and boards it read.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestRecord {
    pub table: String,
    pub boards_dir: String,
    pub rows_in: usize,
    pub rejected: usize,
    pub records: usize,
    pub paired: usize,
}

fn portable(ws: &Workspace, p: &Path) -> String {
    ws.relative(p).to_string_lossy().into_owned()
}

fn resolve(ws: &Workspace, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        ws.root.join(p)
    }
}

/// Boards directory of the ingested manifest.
pub fn board_root(ws: &Workspace) -> Result<PathBuf> {
    let p = ws.manifest_dir().join("ingest.json");
    if !p.exists() {
        return Ok(ws.boards_dir());
    }
    let rec: IngestRecord = serde_json::from_str(&fs::read_to_string(&p)?)?;
    Ok(resolve(ws, &rec.boards_dir))
}

fn load_manifest(ws: &Workspace, cfg: &RunConfig) -> Result<DatasetManifest> {
    let p = ws.manifest_path();
    if !p.exists() {
        bail!("no manifest at {}; run `krill ingest` first", p.display());
    }
    let file = fs::File::open(&p).with_context(|| format!("opening {}", p.display()))?;
    let parsed = parse_manifest(file, &board_root(ws)?, cfg.taxonomy.clone())?;
    if !parsed.rejections.is_empty() {
        bail!(
            "{} rows of {} no longer validate; re-run `krill ingest`",
            parsed.rejections.len(),
            p.display()
        );
    }
    Ok(parsed.manifest)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)
        .with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, Default)]
pub struct SynthArgs {
    pub boards: Option<usize>,
    pub seed: Option<u64>,
    pub per_board: Option<usize>,
}

pub fn synth(ws: &Workspace, mut cfg: RunConfig, args: &SynthArgs) -> Result<Summary> {
    if let Some(n) = args.boards {
        cfg.synth.n_boards = n;
    }
    if let Some(s) = args.seed {
        cfg.synth.seed = s;
    }
    if let Some(n) = args.per_board {
        cfg.synth.specimens_per_board = n;
    }
    let plan = SynthPlan::new(cfg.synth.clone())?;
    info!("rendering {} boards", plan.boards.len());
    let manifest = plan.write(&ws.root)?;
    let mut s = SummaryBuilder::new(ws, "synth", &cfg)?;
    for p in [
        ws.boards_dir(),
        ws.masks_dir(),
        ws.table_path(),
        ws.root.join("synth.json"),
    ] {
        s.output(&p)?;
    }
    s.metric("boards", manifest.boards().len())?;
    s.metric("specimens", manifest.records().len())?;
    s.metric("cruises", manifest.cruises())?;
    s.finish()
}

pub fn ingest(
    ws: &Workspace,
    cfg: RunConfig,
    table: Option<&Path>,
    boards: Option<&Path>,
) -> Result<Summary> {
    let table = table
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ws.table_path());
    let boards = boards
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ws.boards_dir());
    if !boards.is_dir() {
        bail!("boards directory {} does not exist", boards.display());
    }
    let text =
        fs::File::open(&table).with_context(|| format!("opening table {}", table.display()))?;
    let parsed = parse_manifest(text, &boards, cfg.taxonomy.clone())?;
    for r in &parsed.rejections {
        warn!("row {}: {}", r.row, r.reason);
    }
    let outcome = pair_views(&parsed.manifest)?;
    for d in &outcome.report.dropped {
        warn!("{}: {}", d.id, d.reason);
    }

    let dir = ws.manifest_dir();
    ensure_dir(&dir)?;
    let mut buf = Vec::new();
    write_manifest(&outcome.manifest, &mut buf)?;
    fs::write(ws.manifest_path(), &buf)?;
    let mut rej = Vec::new();
    for r in &parsed.rejections {
        serde_json::to_writer(&mut rej, r)?;
        rej.write_all(b"\n")?;
    }
    fs::write(dir.join("rejections.jsonl"), rej)?;
    write_json(&dir.join("pairing.json"), &outcome.report)?;
    let record = IngestRecord {
        table: portable(ws, &table),
        boards_dir: portable(ws, &boards),
        rows_in: parsed.rows_in,
        rejected: parsed.rejections.len(),
        records: parsed.manifest.records().len(),
        paired: outcome.manifest.records().len(),
    };
    write_json(&dir.join("ingest.json"), &record)?;

    let mut s = SummaryBuilder::new(ws, "ingest", &cfg)?;
    s.output(&dir)?;
    s.metric("rows_in", record.rows_in)?;
    s.metric("rejected", record.rejected)?;
    s.metric("records", record.records)?;
    s.metric("paired", record.paired)?;
    s.metric("boards", outcome.manifest.boards().len())?;
    s.finish()
}

#[derive(Debug, Clone, Default)]
pub struct BootstrapArgs {
    pub tolerance: Option<f32>,
    pub out: Option<PathBuf>,
    /// Existing masks to score the bootstrapped ones against.
    pub reference: Option<PathBuf>,
}

pub fn bootstrap_masks(
    ws: &Workspace,
    mut cfg: RunConfig,
    args: &BootstrapArgs,
) -> Result<Summary> {
    if let Some(t) = args.tolerance {
        cfg.bootstrap.tolerance = t;
    }
    let manifest = load_manifest(ws, &cfg)?;
    let out = args.out.clone().unwrap_or_else(|| ws.masks_dir());
    ensure_dir(&out)?;
    let mut s = SummaryBuilder::new(ws, "bootstrap-masks", &cfg)?;
    let mut written = 0usize;
    let mut empty = 0usize;
    let mut ious = Vec::new();
    for board in manifest.boards() {
        let image = board.load_rgb()?;
        let mut recs: Vec<_> = manifest.records_on(&board.file).collect();
        recs.sort_by_key(|r| r.id.index);
        let boxes: Vec<_> = recs.iter().map(|r| r.bbox).collect();
        let masks = boxes_to_masks(
            &image,
            &boxes,
            cfg.bootstrap.background,
            cfg.bootstrap.tolerance,
        )?;
        let reference = match &args.reference {
            Some(dir) => Some(reference_masks(&dir.join(format!("{}.json", board.file)))?),
            None => None,
        };
        let mut instances = Vec::new();
        for (r, m) in recs.iter().zip(masks) {
            let Some(m) = m else {
                empty += 1;
                continue;
            };
            if let Some(refs) = &reference {
                let gt = refs
                    .iter()
                    .find(|(i, _)| *i == r.id.index as usize)
                    .ok_or_else(|| {
                        anyhow!(
                            "reference for {} has no instance {}",
                            board.file,
                            r.id.index
                        )
                    })?;
                ious.push(iou(&m, &gt.1)?);
            }
            instances.push(InstanceRecord {
                bbox: r.bbox,
                score: None,
                index: r.id.index as usize,
                mask_rle: m.to_rle(board.width, board.height),
            });
        }
        let doc = DetectionFile {
            file: board.file.clone(),
            width: board.width,
            height: board.height,
            instances,
        };
        let path = out.join(format!("{}.json", board.file));
        doc.save(&path)?;
        s.output(&path)?;
        written += doc.instances.len();
    }
    s.metric("masks", written)?;
    s.metric("empty_boxes", empty)?;
    if !ious.is_empty() {
        let min = ious.iter().copied().fold(f64::INFINITY, f64::min);
        let mean = ious.iter().sum::<f64>() / ious.len() as f64;
        let at95 = ious.iter().filter(|&&v| v >= 0.95).count() as f64 / ious.len() as f64;
        s.metric("iou_min", min)?;
        s.metric("iou_mean", mean)?;
        s.metric("fraction_iou_ge_0.95", at95)?;
    }
    s.finish()
}

fn reference_masks(path: &Path) -> Result<Vec<(usize, Mask)>> {
    let doc = DetectionFile::load(path)?;
    doc.instances
        .iter()
        .map(|r| {
            let m = r
                .mask_rle
                .to_mask()?
                .ok_or_else(|| anyhow!("empty reference mask in {}", path.display()))?;
            Ok((r.index, m))
        })
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct TrainSegArgs {
    pub epochs: Option<usize>,
    pub split: Option<SplitPolicy>,
    pub seed: Option<u64>,
    pub masks: Option<PathBuf>,
}

pub fn train_seg(ws: &Workspace, mut cfg: RunConfig, args: &TrainSegArgs) -> Result<Summary> {
    if let Some(e) = args.epochs {
        cfg.segmentation.epochs = e;
    }
    if let Some(p) = &args.split {
        cfg.segmentation.split = p.clone();
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.segmentation.seed = seed;
    }
    cfg.segmentation.validate()?;
    let manifest = load_manifest(ws, &cfg)?;
    let split = split_dataset(&manifest, &cfg.segmentation.split, cfg.seed)?;
    let masks = args.masks.clone().unwrap_or_else(|| ws.masks_dir());
    let source = DirBoardSource::new(&board_root(ws)?, &masks, &split.train)?;
    info!("training segmenter on {} boards", split.train.len());
    let model = train_segmenter(&source, &cfg.segmentation)?;
    ensure_dir(&ws.models_dir())?;
    model.save(&ws.segmenter_path())?;
    write_json(&ws.split_path(), &split)?;

    let mut s = SummaryBuilder::new(ws, "train-seg", &cfg)?;
    s.output(&ws.segmenter_path())?;
    s.output(&ws.split_path())?;
    s.metric("train_boards", split.train.len())?;
    s.metric("test_boards", split.test.len())?;
    s.metric("final_loss", model.log.epoch_losses.last())?;
    s.finish()
}

fn load_split(ws: &Workspace) -> Result<Split> {
    let p = ws.split_path();
    let text = fs::read_to_string(&p)
        .with_context(|| format!("no split at {}; run `krill train-seg` first", p.display()))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, Default)]
pub struct DetectArgs {
    pub model: Option<PathBuf>,
    pub boards: Option<PathBuf>,
    pub threshold: Option<f32>,
    /// Only boards on the test side of the training split.
    pub test_only: bool,
}

pub fn detect_boards(ws: &Workspace, mut cfg: RunConfig, args: &DetectArgs) -> Result<Summary> {
    if let Some(t) = args.threshold {
        cfg.detection.score_threshold = t;
    }
    let t = cfg.detection.score_threshold;
    if !(0.0..=1.0).contains(&t) {
        bail!("score threshold must be within [0, 1], got {t}");
    }
    let model_path = args.model.clone().unwrap_or_else(|| ws.segmenter_path());
    let model = Segmenter::load(&model_path)
        .with_context(|| format!("loading model {}", model_path.display()))?;
    let boards = match &args.boards {
        Some(b) => b.clone(),
        None => board_root(ws)?,
    };
    let mut files = list_images(&boards)?;
    if args.test_only {
        let test: BTreeSet<String> = load_split(ws)?.test.into_iter().collect();
        files.retain(|f| test.contains(f));
    }
    if files.is_empty() {
        warn!("no board images in {}", boards.display());
    }
    let out = ws.detections_dir();
    ensure_dir(&out)?;
    let mut s = SummaryBuilder::new(ws, "detect", &cfg)?;
    let mut total = 0usize;
    for file in &files {
        let image = image::open(boards.join(file)).with_context(|| format!("reading {file}"))?;
        let result = detect(file, &image, &model, t)?;
        info!("{file}: {} instances", result.instances.len());
        total += result.instances.len();
        let path = out.join(format!("{file}.json"));
        result.to_file().save(&path)?;
        s.output(&path)?;
    }
    s.metric("boards", files.len())?;
    s.metric("instances", total)?;
    s.metric("score_threshold", t)?;
    s.finish()
}

#[derive(Debug, Clone, Default)]
pub struct EvaluateArgs {
    pub masks: Option<PathBuf>,
    pub detections: Option<PathBuf>,
    /// Score every board with detections instead of the test split.
    pub all: bool,
}

pub fn evaluate_detections(ws: &Workspace, cfg: RunConfig, args: &EvaluateArgs) -> Result<Summary> {
    let masks = args.masks.clone().unwrap_or_else(|| ws.masks_dir());
    let dets = args
        .detections
        .clone()
        .unwrap_or_else(|| ws.detections_dir());
    let files: Vec<String> = if args.all {
        let mut v: Vec<String> = fs::read_dir(&dets)
            .with_context(|| format!("reading {}", dets.display()))?
            .filter_map(|e| e.ok())
            .filter_map(|e| {
                e.file_name()
                    .to_str()?
                    .strip_suffix(".json")
                    .map(String::from)
            })
            .collect();
        v.sort();
        v
    } else {
        load_split(ws)?.test
    };
    if files.is_empty() {
        bail!("no boards to evaluate");
    }
    let mut images = Vec::new();
    for f in &files {
        let gt = DetectionFile::load(&masks.join(format!("{f}.json")))?.masks()?;
        let det_path = dets.join(format!("{f}.json"));
        if !det_path.exists() {
            bail!("no detections for {f}; run `krill detect` first");
        }
        let det = DetectionFile::load(&det_path)?;
        let mut preds = Vec::new();
        for r in det.instances {
            let mask = r
                .mask_rle
                .to_mask()?
                .ok_or_else(|| anyhow!("empty detection mask in {f}"))?;
            preds.push(Scored {
                region: mask,
                score: r.score.unwrap_or(1.0),
            });
        }
        images.push(ImageEval { preds, gts: gt });
    }
    let report = average_precision(&images, &MatchSpec::default())?;
    let out = ws.reports_dir();
    ensure_dir(&out)?;
    let path = out.join("detection_ap.json");
    write_json(&path, &report)?;
    info!(
        "mask AP {:.2}%  AP50 {:.2}%  AP75 {:.2}%",
        100.0 * report.ap,
        100.0 * report.ap50,
        100.0 * report.ap75
    );
    let mut s = SummaryBuilder::new(ws, "evaluate", &cfg)?;
    s.output(&path)?;
    s.metric("ap", report.ap)?;
    s.metric("ap50", report.ap50)?;
    s.metric("ap75", report.ap75)?;
    s.metric("boards", files.len())?;
    s.finish()
}

pub fn curate(
    ws: &Workspace,
    mut cfg: RunConfig,
    resolutions: Option<Vec<Resolution>>,
) -> Result<Summary> {
    if let Some(r) = resolutions {
        cfg.curation.resolutions = r;
    }
    if cfg.curation.resolutions.is_empty() {
        bail!("no resolutions requested");
    }
    let manifest = load_manifest(ws, &cfg)?;
    let root = ws.curated_dir();
    let loader = |file: &str| -> krill_core::Result<RgbImage> {
        let board = manifest
            .board(file)
            .ok_or_else(|| krill_core::Error::Manifest(format!("unknown board {file}")))?;
        board.load_rgb()
    };
    let meta = write_curated_dataset(
        &manifest,
        &loader,
        &cfg.curation.crop,
        &cfg.curation.resolutions,
        &root,
    )?;
    let mut s = SummaryBuilder::new(ws, "curate", &cfg)?;
    for view in View::ALL {
        for r in &cfg.curation.resolutions {
            s.output(&root.join(view.as_str()).join(r.to_string()))?;
        }
    }
    s.output(&root.join("labels.csv"))?;
    s.output(&root.join("meta.json"))?;
    s.metric("counts", &meta.counts)?;
    s.metric("removed", meta.filter.removed_total())?;
    s.finish()
}

#[derive(Debug, Deserialize)]
struct LabelRow {
    id: String,
    length_mm: u32,
    maturity: MaturityLabel,
}

fn cell_dir(ws: &Workspace, view: View, res: Resolution) -> PathBuf {
    ws.curated_dir().join(view.as_str()).join(res.to_string())
}

fn require_built(ws: &Workspace, view: View, res: Resolution) -> Result<()> {
    if !cell_dir(ws, view, res).is_dir() {
        bail!("resolution {res} is not curated for {view}; run `krill curate --resolutions {res}`");
    }
    Ok(())
}

/// Curated items of one (view, resolution) cell, read lazily.
pub fn curated_items(ws: &Workspace, view: View, res: Resolution) -> Result<ItemStream<'static>> {
    let labels = ws.curated_dir().join("labels.csv");
    let mut reader =
        csv::Reader::from_path(&labels).with_context(|| format!("reading {}", labels.display()))?;
    let rows: Vec<LabelRow> = reader.deserialize().collect::<Result<_, _>>()?;
    let root = ws.curated_dir();
    let iter = rows.into_iter().filter_map(move |row| {
        let path = curated_path(&root, view, res, &row.id);
        if !path.exists() {
            return None;
        }
        Some(
            image::open(&path)
                .map_err(krill_core::Error::from)
                .map(|img| EstimationItem {
                    id: row.id,
                    length_mm: row.length_mm,
                    maturity: row.maturity,
                    image: img.to_rgb8(),
                }),
        )
    });
    Ok(Box::new(iter))
}

pub fn train_est(
    ws: &Workspace,
    cfg: RunConfig,
    view: View,
    res: Resolution,
    task: Task,
) -> Result<Summary> {
    require_built(ws, view, res)?;
    let lc = &cfg.estimation;
    let mut prepared = Vec::new();
    for item in curated_items(ws, view, res)? {
        prepared.push(prepare(&item?, &lc.augment, lc.augment_variants, lc.seed));
    }
    let test_ids = test_specimens(prepared.iter().map(|p| p.id.as_str()), lc.seed);
    let (test, train): (Vec<_>, Vec<_>) =
        prepared.into_iter().partition(|p| test_ids.contains(&p.id));
    if train.is_empty() || test.is_empty() {
        bail!(
            "{view} {res}: too few samples ({} train, {} test)",
            train.len(),
            test.len()
        );
    }
    let (model, report) = train_cell(lc, view, res, &train, &test, task)?;
    let stem = format!(
        "estimator_{}_{res}_{}",
        view.as_str().to_lowercase(),
        task.as_str()
    );
    ensure_dir(&ws.models_dir())?;
    ensure_dir(&ws.reports_dir())?;
    let model_path = ws.models_dir().join(format!("{stem}.json"));
    let report_path = ws.reports_dir().join(format!("{stem}.json"));
    model.save(&model_path)?;
    write_json(&report_path, &report)?;
    match task {
        Task::Length => info!("{view} {res} length RMSE {:.3} mm", report.metric),
        Task::Maturity => info!("{view} {res} maturity accuracy {:.2}%", report.metric),
    }
    let mut s = SummaryBuilder::new(ws, "train-est", &cfg)?;
    s.output(&model_path)?;
    s.output(&report_path)?;
    s.metric("metric", report.metric)?;
    s.metric("n_train", train.len())?;
    s.metric("n_test", report.n_test)?;
    s.finish()
}

pub fn ladder(
    ws: &Workspace,
    mut cfg: RunConfig,
    resolutions: Option<Vec<Resolution>>,
) -> Result<Summary> {
    if let Some(r) = resolutions {
        cfg.estimation.resolutions = r;
    }
    for &res in &cfg.estimation.resolutions {
        for &view in &cfg.estimation.views {
            require_built(ws, view, res)?;
        }
    }
    let report = run_ladder(&cfg.estimation, |view, res| {
        curated_items(ws, view, res)
            .map(Some)
            .map_err(|e| krill_core::Error::Evaluation(e.to_string()))
    })?;
    let dir = ws.reports_dir().join("ladder");
    write_ladder_reports(&report, &dir)?;
    info!("\n{}", report.table_csv());
    let mut s = SummaryBuilder::new(ws, "ladder", &cfg)?;
    s.output(&dir)?;
    s.metric("rows", report.rows.len())?;
    s.metric("view_means", &report.view_means)?;
    s.metric("trend_exceptions", report.trend_exceptions.len())?;
    s.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_flag() {
        assert_eq!(parse_split("random").unwrap(), SplitPolicy::Random80_20);
        assert_eq!(
            parse_split("cruise:JR280").unwrap(),
            SplitPolicy::LeaveOneCruiseOut("JR280".into())
        );
        for bad in ["", "cruise:", "loco", "random:1"] {
            assert!(parse_split(bad).is_err(), "{bad}");
        }
    }
}
