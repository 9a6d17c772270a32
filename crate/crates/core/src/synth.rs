//! Deterministic synthetic boards with exact ground truth.
//!
//! Each board group holds `specimens_per_board` specimens photographed twice:
//! a wide lateral render and a narrow dorsal render at the same positions.
//! Specimens are curved capsules; their stage archetype sets hue, curvature
//! and banding so a classifier has a learnable (surrogate) signal.

use std::collections::BTreeSet;
use std::f32::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    export_manifest, BoardImage, DatasetManifest, MaturityLabel, SpecimenId, SpecimenRecord,
    Taxonomy, View,
};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::{hsv_to_rgb, Mask};
use crate::segmentation::{BoardSource, DetectionFile, InstanceRecord, TrainingBoard};

pub const DEFAULT_BG: [u8; 3] = [56, 127, 245];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageArchetype {
    pub label: String,
    /// Share of all specimens; shares are normalised.
    pub proportion: f64,
    pub hue_deg: f32,
    /// Arc sagitta as a fraction of the chord.
    pub curvature: f32,
    /// Number of dark bands across the body.
    pub bands: u32,
}

impl StageArchetype {
    fn new(label: &str, proportion: f64, hue_deg: f32, curvature: f32, bands: u32) -> Self {
        Self {
            label: label.into(),
            proportion,
            hue_deg,
            curvature,
            bands,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Board groups; each produces a dorsal and a lateral image.
    pub n_boards: usize,
    pub specimens_per_board: usize,
    pub board_size: (u32, u32),
    pub bg: [u8; 3],
    pub length_range_mm: (u32, u32),
    pub px_per_mm: f32,
    pub stage_classes: Vec<StageArchetype>,
    pub cruises: Vec<String>,
    pub seed: u64,
    pub noise_sigma: f32,
    pub lateral_width_ratio: f32,
    pub dorsal_width_ratio: f32,
    pub jitter_px: f32,
    pub max_rotation_deg: f32,
    pub margin_px: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_boards: 60,
            specimens_per_board: 25,
            board_size: (1512, 1008),
            bg: DEFAULT_BG,
            length_range_mm: (20, 60),
            px_per_mm: 4.0,
            stage_classes: vec![
                StageArchetype::new("J", 0.35, 58.0, 0.02, 0),
                StageArchetype::new("FS1", 0.20, 34.0, 0.08, 2),
                StageArchetype::new("MS1", 0.20, 12.0, 0.13, 0),
                StageArchetype::new("MA1", 0.15, 352.0, 0.18, 3),
                StageArchetype::new("MA2", 0.10, 330.0, 0.22, 1),
            ],
            cruises: ["JR255A", "JR260B", "JR280", "JR291", "JR15002"]
                .map(String::from)
                .to_vec(),
            seed: 7,
            noise_sigma: 3.0,
            lateral_width_ratio: 0.2,
            dorsal_width_ratio: 0.12,
            jitter_px: 10.0,
            max_rotation_deg: 6.0,
            margin_px: 5,
        }
    }
}

impl SynthConfig {
    pub fn taxonomy(&self, min_class_count: usize) -> Result<Taxonomy> {
        let labels: Vec<&str> = self
            .stage_classes
            .iter()
            .map(|s| s.label.as_str())
            .collect();
        Taxonomy::from_tokens(&labels, &["M1", "A2", "U"], min_class_count)
    }

    fn grid(&self) -> (u32, u32) {
        let cols = (self.specimens_per_board as f64).sqrt().ceil().max(1.0) as u32;
        let rows = (self.specimens_per_board as u32).div_ceil(cols);
        (cols, rows)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_boards == 0 || self.specimens_per_board == 0 {
            return bad("n_boards and specimens_per_board must be >= 1");
        }
        if self.stage_classes.is_empty() || self.cruises.is_empty() {
            return bad("need at least one stage class and one cruise");
        }
        if self.stage_classes.iter().any(|s| s.proportion <= 0.0) {
            return bad("stage proportions must be positive");
        }
        if self
            .stage_classes
            .iter()
            .any(|s| !(0.0..=0.45).contains(&s.curvature))
        {
            return bad("curvature must lie in [0, 0.45]");
        }
        let (lo, hi) = self.length_range_mm;
        if lo < 1 || lo > hi || self.px_per_mm <= 0.0 {
            return bad("invalid length range or scale");
        }
        for s in &self.stage_classes {
            MaturityLabel::new(&s.label)?;
        }
        // Worst-case footprint must fit a grid cell with margins.
        let (cols, rows) = self.grid();
        let (bw, bh) = self.board_size;
        let cell_w = bw as f32 / cols as f32;
        let cell_h = bh as f32 / rows as f32;
        let max_curv = self
            .stage_classes
            .iter()
            .map(|s| s.curvature)
            .fold(0.0, f32::max);
        let ratio = self.lateral_width_ratio.max(self.dorsal_width_ratio);
        let len = hi as f32 * self.px_per_mm;
        let thick = ratio * len;
        let depth = max_curv * (len - thick) + thick;
        let rot = self.max_rotation_deg.to_radians();
        let need_w = len * rot.cos() + depth * rot.sin() + 2.0 * self.jitter_px + 4.0;
        let need_h = depth * rot.cos() + len * rot.sin() + 2.0 * self.jitter_px + 4.0;
        let slack = 2.0 * self.margin_px as f32;
        if need_w + slack > cell_w || need_h + slack > cell_h {
            return Err(Error::Overcrowded(format!(
                "{} specimens of up to {hi} mm need {need_w:.0}x{need_h:.0} px cells plus margins, \
                 board gives {cell_w:.0}x{cell_h:.0}",
                self.specimens_per_board
            )));
        }
        Ok(())
    }
}

/// Geometry and label of one specimen, shared by both of its renders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpecimenPlan {
    pub slot: usize,
    pub length_mm: u32,
    pub stage: usize,
    pub center: (f32, f32),
    pub angle: f32,
    pub hue_shift: f32,
    pub value: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoardPlan {
    pub file: String,
    pub partner_file: String,
    pub cruise: String,
    pub view: View,
    pub group: usize,
    pub event: u32,
    pub net: u32,
    pub board_no: u32,
}

/// Everything needed to render any board independently.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthPlan {
    pub config: SynthConfig,
    pub boards: Vec<BoardPlan>,
    /// `specimens[group][slot]`.
    pub specimens: Vec<Vec<SpecimenPlan>>,
}

/// One rendered board with ground truth in position-index order.
#[derive(Debug, Clone)]
pub struct SynthBoard {
    pub file: String,
    pub cruise: String,
    pub view: View,
    pub image: RgbImage,
    pub masks: Vec<Mask>,
    pub records: Vec<SpecimenRecord>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Exact per-class counts by largest remainder.
fn class_counts(stages: &[StageArchetype], total: usize) -> Vec<usize> {
    let sum: f64 = stages.iter().map(|s| s.proportion).sum();
    let quotas: Vec<f64> = stages
        .iter()
        .map(|s| s.proportion / sum * total as f64)
        .collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut rest: Vec<usize> = (0..stages.len()).collect();
    rest.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let missing = total - counts.iter().sum::<usize>();
    for &i in rest.iter().take(missing) {
        counts[i] += 1;
    }
    counts
}

impl SynthPlan {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_for(config.seed, 0);
        let n_groups = config.n_boards;
        let per = config.specimens_per_board;
        let total = n_groups * per;

        let counts = class_counts(&config.stage_classes, total);
        let mut stages: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(i, &c)| std::iter::repeat_n(i, c))
            .collect();
        // Fisher-Yates with the plan stream.
        for i in (1..stages.len()).rev() {
            let j = rng.random_range(0..=i);
            stages.swap(i, j);
        }

        let (cols, rows) = config.grid();
        let (bw, bh) = config.board_size;
        let cell_w = bw as f32 / cols as f32;
        let cell_h = bh as f32 / rows as f32;
        let (lo, hi) = config.length_range_mm;
        let mut specimens = Vec::with_capacity(n_groups);
        let mut boards = Vec::with_capacity(2 * n_groups);
        let mut per_cruise_seq = vec![0u32; config.cruises.len()];
        for g in 0..n_groups {
            let mut group = Vec::with_capacity(per);
            for slot in 0..per {
                let (c, r) = (slot as u32 % cols, slot as u32 / cols);
                let jx = rng.random_range(-config.jitter_px..=config.jitter_px);
                let jy = rng.random_range(-config.jitter_px..=config.jitter_px);
                let rot = config.max_rotation_deg.to_radians();
                group.push(SpecimenPlan {
                    slot,
                    length_mm: rng.random_range(lo..=hi),
                    stage: stages[g * per + slot],
                    center: (
                        (c as f32 + 0.5) * cell_w + jx,
                        (r as f32 + 0.5) * cell_h + jy,
                    ),
                    angle: rng.random_range(-rot..=rot),
                    hue_shift: rng.random_range(-4.0..=4.0),
                    value: rng.random_range(0.78..=0.92),
                });
            }
            specimens.push(group);

            let ci = g % config.cruises.len();
            let cruise = config.cruises[ci].clone();
            per_cruise_seq[ci] += 2;
            let seq = per_cruise_seq[ci];
            let dorsal = format!("{cruise}_krill_image_{}.png", seq - 1);
            let lateral = format!("{cruise}_krill_image_{seq}.png");
            let (event, net, board_no) =
                (g as u32 + 1, rng.random_range(1..=4), (g % 10) as u32 + 1);
            for (file, partner, view) in [
                (&dorsal, &lateral, View::Dorsal),
                (&lateral, &dorsal, View::Lateral),
            ] {
                boards.push(BoardPlan {
                    file: file.clone(),
                    partner_file: partner.clone(),
                    cruise: cruise.clone(),
                    view,
                    group: g,
                    event,
                    net,
                    board_no,
                });
            }
        }
        Ok(Self {
            config,
            boards,
            specimens,
        })
    }

    pub fn stage_label(&self, stage: usize) -> MaturityLabel {
        MaturityLabel::new(&self.config.stage_classes[stage].label).expect("validated")
    }

    fn width_ratio(&self, view: View) -> f32 {
        match view {
            View::Lateral => self.config.lateral_width_ratio,
            View::Dorsal => self.config.dorsal_width_ratio,
        }
    }

    fn shape(&self, s: &SpecimenPlan, view: View) -> Capsule {
        let len = s.length_mm as f32 * self.config.px_per_mm;
        Capsule::new(
            len,
            self.width_ratio(view) * len / 2.0,
            self.config.stage_classes[s.stage].curvature,
            s.center,
            s.angle,
        )
    }

    /// Ground-truth masks of one board in index order.
    pub fn board_masks(&self, board: usize) -> Vec<Mask> {
        let b = &self.boards[board];
        let (w, h) = self.config.board_size;
        self.specimens[b.group]
            .iter()
            .map(|s| self.shape(s, b.view).rasterize(w, h))
            .collect()
    }

    pub fn board_records(&self, board: usize, masks: &[Mask]) -> Vec<SpecimenRecord> {
        let b = &self.boards[board];
        self.specimens[b.group]
            .iter()
            .zip(masks)
            .map(|(s, m)| {
                let index = s.slot as u32 + 1;
                SpecimenRecord {
                    length_mm: s.length_mm,
                    maturity: self.stage_label(s.stage),
                    cruise: b.cruise.clone(),
                    bbox: m.tight_bbox().expect("rendered specimens are non-empty"),
                    id: SpecimenId::new(&b.cruise, &b.file, index).expect("valid id"),
                    alt_id: SpecimenId::new(&b.cruise, &b.partner_file, index).expect("valid id"),
                    view: b.view,
                    event: b.event,
                    net: b.net,
                    board: b.board_no,
                }
            })
            .collect()
    }

    /// Every record across all boards, without rendering pixels.
    pub fn records(&self) -> Vec<SpecimenRecord> {
        (0..self.boards.len())
            .flat_map(|i| self.board_records(i, &self.board_masks(i)))
            .collect()
    }

    pub fn manifest(&self, boards_dir: &Path, taxonomy: Taxonomy) -> Result<DatasetManifest> {
        let (w, h) = self.config.board_size;
        let boards = self
            .boards
            .iter()
            .map(|b| BoardImage {
                file: b.file.clone(),
                path: boards_dir.join(&b.file),
                cruise: b.cruise.clone(),
                width: w,
                height: h,
                view: b.view,
                paired_file: Some(b.partner_file.clone()),
            })
            .collect();
        DatasetManifest::new(self.records(), boards, taxonomy)
    }

    pub fn render(&self, board: usize) -> SynthBoard {
        let b = &self.boards[board];
        let cfg = &self.config;
        let (w, h) = cfg.board_size;
        let mut rng = rng_for(cfg.seed, 1 + board as u64);
        let noise = Normal::new(0.0f32, cfg.noise_sigma.max(1e-6)).expect("finite sigma");
        let bg = cfg.bg.map(|v| v as f32);
        let mut canvas: Vec<[f32; 3]> = vec![bg; (w * h) as usize];

        let masks = self.board_masks(board);
        for (s, m) in self.specimens[b.group].iter().zip(&masks) {
            let shape = self.shape(s, b.view);
            let arch = &cfg.stage_classes[s.stage];
            for (x, y) in m.pixels() {
                let t = shape.along(x as f32 + 0.5, y as f32 + 0.5);
                let mut val = s.value;
                if arch.bands > 0 {
                    let phase = (t * arch.bands as f32 * 2.0 + 0.5).fract();
                    if phase < 0.35 {
                        val *= 0.62;
                    }
                }
                // Slightly darker towards the tail.
                val *= 1.0 - 0.12 * t;
                canvas[(y * w + x) as usize] = hsv_to_rgb(arch.hue_deg + s.hue_shift, 0.78, val);
            }
        }
        let mut image = RgbImage::new(w, h);
        for (px, c) in image.pixels_mut().zip(&canvas) {
            let v = c.map(|ch| {
                if cfg.noise_sigma > 0.0 {
                    (ch + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8
                } else {
                    ch.round().clamp(0.0, 255.0) as u8
                }
            });
            *px = Rgb(v);
        }
        let records = self.board_records(board, &masks);
        SynthBoard {
            file: b.file.clone(),
            cruise: b.cruise.clone(),
            view: b.view,
            image,
            masks,
            records,
        }
    }

    /// Write `boards/`, `masks/`, `table.csv` and `synth.json` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        let boards_dir = dir.join("boards");
        let masks_dir = dir.join("masks");
        for d in [&boards_dir, &masks_dir] {
            fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        }
        let (w, h) = self.config.board_size;
        for i in 0..self.boards.len() {
            let board = self.render(i);
            board.image.save(boards_dir.join(&board.file))?;
            let gt = DetectionFile {
                file: board.file.clone(),
                width: w,
                height: h,
                instances: board
                    .masks
                    .iter()
                    .zip(&board.records)
                    .map(|(m, r)| InstanceRecord {
                        bbox: r.bbox,
                        score: None,
                        index: r.id.index as usize,
                        mask_rle: m.to_rle(w, h),
                    })
                    .collect(),
            };
            gt.save(&masks_dir.join(format!("{}.json", board.file)))?;
        }
        let taxonomy = self.config.taxonomy(1)?;
        let manifest = self.manifest(&boards_dir, taxonomy)?;
        export_manifest(&manifest, &dir.join("table.csv"))?;
        let plan_path = dir.join("synth.json");
        fs::write(&plan_path, serde_json::to_string_pretty(&self.config)?)
            .map_err(|e| Error::io(&plan_path, e))?;
        Ok(manifest)
    }

    pub fn cruise_names(&self) -> BTreeSet<String> {
        self.boards.iter().map(|b| b.cruise.clone()).collect()
    }
}

/// Render every board in memory.
pub fn generate(config: SynthConfig) -> Result<(Vec<SynthBoard>, DatasetManifest)> {
    let plan = SynthPlan::new(config)?;
    let taxonomy = plan.config.taxonomy(1)?;
    let manifest = plan.manifest(&PathBuf::from("boards"), taxonomy)?;
    let boards = (0..plan.boards.len()).map(|i| plan.render(i)).collect();
    Ok((boards, manifest))
}

/// A subset of a plan's boards, rendered on demand.
#[derive(Debug, Clone)]
pub struct SynthSource<'a> {
    pub plan: &'a SynthPlan,
    pub boards: Vec<usize>,
}

impl<'a> SynthSource<'a> {
    /// Boards whose file names are in `files`.
    pub fn for_files(plan: &'a SynthPlan, files: &[String]) -> Self {
        let boards = plan
            .boards
            .iter()
            .enumerate()
            .filter(|(_, b)| files.contains(&b.file))
            .map(|(i, _)| i)
            .collect();
        Self { plan, boards }
    }
}

impl BoardSource for SynthSource<'_> {
    fn len(&self) -> usize {
        self.boards.len()
    }

    fn load(&self, i: usize) -> Result<TrainingBoard> {
        let b = self.plan.render(self.boards[i]);
        Ok(TrainingBoard {
            file: b.file,
            image: b.image,
            masks: b.masks,
        })
    }
}

/// Capsule swept along a symmetric circular arc.
///
/// Local frame: chord along x centred on the origin, arc bulging towards +y.
/// End to end the body measures exactly `length` along x.
#[derive(Debug, Clone, Copy)]
struct Capsule {
    length: f32,
    radius: f32,
    chord: f32,
    sagitta: f32,
    center: (f32, f32),
    cos: f32,
    sin: f32,
}

impl Capsule {
    fn new(length: f32, radius: f32, curvature: f32, center: (f32, f32), angle: f32) -> Self {
        let chord = (length - 2.0 * radius).max(0.0);
        Self {
            length,
            radius,
            chord,
            sagitta: curvature * chord,
            center,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    /// Frame point to local coordinates (shape bbox centred on the origin).
    fn local(&self, x: f32, y: f32) -> (f32, f32) {
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let lx = dx * self.cos + dy * self.sin;
        let ly = -dx * self.sin + dy * self.cos;
        (lx, ly + self.sagitta / 2.0)
    }

    fn arc_distance(&self, x: f32, y: f32) -> f32 {
        let half = self.chord / 2.0;
        if self.sagitta < 1e-3 {
            let cx = x.clamp(-half, half);
            return ((x - cx).powi(2) + y * y).sqrt();
        }
        let s = self.sagitta;
        let r = (half * half + s * s) / (2.0 * s);
        let (cx, cy) = (0.0, s - r);
        let (vx, vy) = (x - cx, y - cy);
        let theta = vy.atan2(vx);
        let alpha = (half / r).clamp(-1.0, 1.0).asin();
        if (theta - PI / 2.0).abs() <= alpha {
            ((vx * vx + vy * vy).sqrt() - r).abs()
        } else {
            let d1 = ((x - half).powi(2) + y * y).sqrt();
            let d2 = ((x + half).powi(2) + y * y).sqrt();
            d1.min(d2)
        }
    }

    fn contains(&self, x: f32, y: f32) -> bool {
        let (lx, ly) = self.local(x, y);
        self.arc_distance(lx, ly) <= self.radius
    }

    /// Position along the body in [0, 1], head at 0.
    fn along(&self, x: f32, y: f32) -> f32 {
        let (lx, _) = self.local(x, y);
        ((lx + self.length / 2.0) / self.length).clamp(0.0, 1.0)
    }

    fn rasterize(&self, frame_w: u32, frame_h: u32) -> Mask {
        let reach = (self.length / 2.0).hypot(self.sagitta + 2.0 * self.radius) + 2.0;
        let x0 = (self.center.0 - reach).floor().max(0.0) as u32;
        let y0 = (self.center.1 - reach).floor().max(0.0) as u32;
        let x1 = ((self.center.0 + reach).ceil() as u32).min(frame_w);
        let y1 = ((self.center.1 + reach).ceil() as u32).min(frame_h);
        let window = BBox::new(x0, y0, (x1 - x0).max(1), (y1 - y0).max(1)).expect("window");
        let m = Mask::from_fn(window, |x, y| self.contains(x as f32 + 0.5, y as f32 + 0.5));
        m.trimmed().unwrap_or(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Test oracle: extent of mask pixels along their principal axis.
    fn major_axis_extent(m: &Mask) -> f64 {
        let pts: Vec<(f64, f64)> = m.pixels().map(|(x, y)| (x as f64, y as f64)).collect();
        let n = pts.len() as f64;
        let (mx, my) = pts
            .iter()
            .fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for &(x, y) in &pts {
            sxx += (x - mx) * (x - mx);
            syy += (y - my) * (y - my);
            sxy += (x - mx) * (y - my);
        }
        let theta = 0.5 * (2.0 * sxy).atan2(sxx - syy);
        let (c, s) = (theta.cos(), theta.sin());
        let proj: Vec<f64> = pts.iter().map(|&(x, y)| x * c + y * s).collect();
        let lo = proj.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        hi - lo + 1.0
    }

    fn small() -> SynthConfig {
        SynthConfig {
            n_boards: 2,
            board_size: (1512, 1008),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn forty_mm_at_ten_px_per_mm() {
        for (curv, angle) in [(0.0, 0.0), (0.15, 0.08), (0.22, -0.1)] {
            let cap = Capsule::new(400.0, 40.0, curv, (300.0, 200.0), angle);
            let m = cap.rasterize(600, 400);
            let extent = major_axis_extent(&m);
            assert!((extent - 400.0).abs() <= 5.0, "curv {curv}: {extent}");
        }
    }

    #[test]
    fn counts_and_determinism() {
        let plan = SynthPlan::new(small()).unwrap();
        let records = plan.records();
        assert_eq!(plan.boards.len(), 4);
        assert_eq!(records.len(), 100);
        let a = plan.render(1);
        let b = SynthPlan::new(small()).unwrap().render(1);
        assert_eq!(a.image.as_raw(), b.image.as_raw());
        assert_eq!(a.masks, b.masks);
    }

    #[test]
    fn lengths_and_layout_invariants() {
        let cfg = small();
        let plan = SynthPlan::new(cfg.clone()).unwrap();
        let (w, h) = cfg.board_size;
        for i in 0..plan.boards.len() {
            let masks = plan.board_masks(i);
            let recs = plan.board_records(i, &masks);
            for (m, r) in masks.iter().zip(&recs) {
                let b = m.tight_bbox().unwrap();
                assert!(b.x >= cfg.margin_px && b.y >= cfg.margin_px);
                assert!(b.right() + cfg.margin_px <= w && b.bottom() + cfg.margin_px <= h);
                let mm = major_axis_extent(m) / cfg.px_per_mm as f64;
                assert!(
                    (mm - r.length_mm as f64).abs() <= 0.5,
                    "{mm} vs {}",
                    r.length_mm
                );
            }
            for a in 0..masks.len() {
                for b in a + 1..masks.len() {
                    assert_eq!(masks[a].intersection_area(&masks[b]), 0);
                }
            }
        }
    }

    #[test]
    fn class_distribution_exact() {
        let cfg = SynthConfig {
            n_boards: 4,
            ..SynthConfig::default()
        };
        let plan = SynthPlan::new(cfg.clone()).unwrap();
        let expected = class_counts(&cfg.stage_classes, 100);
        assert_eq!(expected, vec![35, 20, 20, 15, 10]);
        let mut seen = vec![0; 5];
        for g in &plan.specimens {
            for s in g {
                seen[s.stage] += 1;
            }
        }
        assert_eq!(seen, expected);
    }

    #[test]
    fn overcrowding_rejected() {
        let cfg = SynthConfig {
            specimens_per_board: 100,
            ..small()
        };
        assert!(matches!(SynthPlan::new(cfg), Err(Error::Overcrowded(_))));
    }

    #[test]
    fn pairs_are_consistent() {
        let plan = SynthPlan::new(small()).unwrap();
        let m = plan
            .manifest(Path::new("boards"), plan.config.taxonomy(1).unwrap())
            .unwrap();
        let out = crate::data::pair_views(&m).unwrap();
        assert_eq!(out.report.retained, 100);
        assert!(out.report.warnings.is_empty());
    }
}
