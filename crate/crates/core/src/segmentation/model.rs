//! Pixel-level foreground model and the board detector built on it.
//!
//! Each pixel is described by its colour, local colour means and its
//! distance from the board background (estimated from the image border).
//! A small residual MLP scores foreground probability; instances are the
//! 8-connected components of the thresholded probability map.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, RgbImage};
use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::detection::{DetectionFile, DetectionResult, InstanceMask};
use super::{decode_masks, index_positions, SplitPolicy};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::metrics::iou;
use crate::nn::{Network, Sgd, Standardizer, Trace};
use crate::raster::{border_background, label_components, Mask};

const CHECKPOINT_FORMAT: &str = "krill-segmenter/1";
const N_FEATURES: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SegTrainConfig {
    pub split: SplitPolicy,
    pub epochs: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub backbone: String,
    pub hidden: usize,
    pub blocks: usize,
    /// Epochs during which only the output layer is trained.
    pub freeze_epochs: usize,
    pub momentum: f32,
    pub batch_size: usize,
    pub samples_per_board: usize,
    /// Pixel probability at which a pixel counts as foreground.
    pub pixel_threshold: f32,
    pub nms_iou: f64,
    /// Components smaller than this fraction of the smallest training
    /// instance are discarded as noise.
    pub min_area_fraction: f64,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        Self {
            split: SplitPolicy::Random80_20,
            epochs: 30,
            learning_rate: 2e-3,
            seed: 0,
            backbone: "pixel-mlp".into(),
            hidden: 16,
            blocks: 1,
            freeze_epochs: 5,
            momentum: 0.9,
            batch_size: 32,
            samples_per_board: 2000,
            pixel_threshold: 0.5,
            nms_iou: 0.5,
            min_area_fraction: 0.2,
        }
    }
}

impl SegTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.hidden == 0 || self.batch_size == 0 || self.samples_per_board < 2 {
            return bad("hidden, batch_size and samples_per_board must be positive");
        }
        if !(0.0..1.0).contains(&self.pixel_threshold) || !(0.0..=1.0).contains(&self.nms_iou) {
            return bad("pixel_threshold must lie in [0, 1) and nms_iou in [0, 1]");
        }
        Ok(())
    }
}

/// A board with its ground-truth instance masks.
#[derive(Debug, Clone)]
pub struct TrainingBoard {
    pub file: String,
    pub image: RgbImage,
    pub masks: Vec<Mask>,
}

/// Boards loaded one at a time so a training set need not fit in memory.
pub trait BoardSource {
    fn len(&self) -> usize;
    fn load(&self, i: usize) -> Result<TrainingBoard>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl BoardSource for [TrainingBoard] {
    fn len(&self) -> usize {
        <[TrainingBoard]>::len(self)
    }

    fn load(&self, i: usize) -> Result<TrainingBoard> {
        Ok(self[i].clone())
    }
}

impl BoardSource for Vec<TrainingBoard> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }

    fn load(&self, i: usize) -> Result<TrainingBoard> {
        Ok(self[i].clone())
    }
}

/// Boards on disk: `{boards_dir}/{file}` with masks in
/// `{masks_dir}/{file}.json`.
#[derive(Debug, Clone)]
pub struct DirBoardSource {
    items: Vec<(String, PathBuf, PathBuf)>,
}

impl DirBoardSource {
    /// Fails if any board lacks a mask file.
    pub fn new(boards_dir: &Path, masks_dir: &Path, files: &[String]) -> Result<Self> {
        let mut items = Vec::with_capacity(files.len());
        let mut missing = Vec::new();
        for f in files {
            let mask = masks_dir.join(format!("{f}.json"));
            if !mask.is_file() {
                missing.push(f.clone());
            }
            items.push((f.clone(), boards_dir.join(f), mask));
        }
        if !missing.is_empty() {
            return Err(Error::Training(format!(
                "{} board(s) have no ground-truth masks: {}",
                missing.len(),
                missing.join(", ")
            )));
        }
        Ok(Self { items })
    }
}

impl BoardSource for DirBoardSource {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn load(&self, i: usize) -> Result<TrainingBoard> {
        let (file, img, masks) = &self.items[i];
        let image = image::open(img)?.to_rgb8();
        let doc = DetectionFile::load(masks)?;
        if (doc.width, doc.height) != image.dimensions() {
            return Err(Error::Training(format!(
                "{file}: masks are {}x{} but image is {}x{}",
                doc.width,
                doc.height,
                image.width(),
                image.height()
            )));
        }
        Ok(TrainingBoard {
            file: file.clone(),
            image,
            masks: doc.masks()?,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epoch_losses: Vec<f64>,
    pub n_boards: usize,
    pub n_samples: usize,
}

/// Trained segmenter; serialises to a single JSON checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmenter {
    pub format: String,
    pub config: SegTrainConfig,
    pub classes: Vec<String>,
    pub channels: u8,
    pub normalization: Standardizer,
    pub network: Network,
    pub min_area: u64,
    pub log: TrainingLog,
}

impl Segmenter {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Segmenter = serde_json::from_str(&text)?;
        if model.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint format `{}`",
                model.format
            )));
        }
        Ok(model)
    }

    /// Foreground probability for every pixel, row-major.
    pub fn probability_map(&self, image: &RgbImage) -> Vec<f32> {
        let feats = FeatureMaps::new(image);
        let (w, h) = image.dimensions();
        let mut out = Vec::with_capacity((w * h) as usize);
        let mut x = [0f32; N_FEATURES];
        for py in 0..h {
            for px in 0..w {
                feats.pixel(px, py, &mut x);
                let z = self.network.forward(&self.normalization.apply(&x))[0];
                out.push(sigmoid(z));
            }
        }
        out
    }
}

fn sigmoid(z: f32) -> f32 {
    1.0 / (1.0 + (-z).exp())
}

/// Summed-area tables for colour and background distance.
struct FeatureMaps<'a> {
    image: &'a RgbImage,
    bg: [f32; 3],
    width: usize,
    height: usize,
    /// `(w+1)*(h+1)` tables for r, g, b, distance.
    sums: [Vec<f64>; 4],
}

impl<'a> FeatureMaps<'a> {
    fn new(image: &'a RgbImage) -> Self {
        let bg = border_background(image, 2);
        let (w, h) = (image.width() as usize, image.height() as usize);
        let stride = w + 1;
        let mut sums: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; stride * (h + 1)]);
        for y in 0..h {
            let mut row = [0f64; 4];
            for x in 0..w {
                let p = image.get_pixel(x as u32, y as u32).0;
                let v = Self::raw(p, bg);
                for c in 0..4 {
                    row[c] += v[c] as f64;
                    sums[c][(y + 1) * stride + x + 1] = sums[c][y * stride + x + 1] + row[c];
                }
            }
        }
        Self {
            image,
            bg,
            width: w,
            height: h,
            sums,
        }
    }

    fn raw(p: [u8; 3], bg: [f32; 3]) -> [f32; 4] {
        let f = p.map(|v| v as f32);
        let d = ((f[0] - bg[0]).powi(2) + (f[1] - bg[1]).powi(2) + (f[2] - bg[2]).powi(2)).sqrt();
        [f[0], f[1], f[2], d]
    }

    fn window_mean(&self, c: usize, x: u32, y: u32, r: usize) -> f32 {
        let (x, y) = (x as usize, y as usize);
        let x0 = x.saturating_sub(r);
        let y0 = y.saturating_sub(r);
        let x1 = (x + r + 1).min(self.width);
        let y1 = (y + r + 1).min(self.height);
        let s = &self.sums[c];
        let st = self.width + 1;
        let total = s[y1 * st + x1] - s[y0 * st + x1] - s[y1 * st + x0] + s[y0 * st + x0];
        (total / ((x1 - x0) * (y1 - y0)) as f64) as f32
    }

    fn pixel(&self, x: u32, y: u32, out: &mut [f32; N_FEATURES]) {
        let v = Self::raw(self.image.get_pixel(x, y).0, self.bg);
        out[0] = v[0] / 255.0;
        out[1] = v[1] / 255.0;
        out[2] = v[2] / 255.0;
        out[3] = v[3] / 255.0;
        for c in 0..3 {
            out[4 + c] = self.window_mean(c, x, y, 2) / 255.0;
        }
        out[7] = self.window_mean(3, x, y, 1) / 255.0;
        out[8] = self.window_mean(3, x, y, 2) / 255.0;
        out[9] = self.window_mean(3, x, y, 5) / 255.0;
    }
}

fn board_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Balanced pixel samples from one board: half foreground, a quarter from
/// background close to instances and a quarter from anywhere.
fn sample_board(
    board: &TrainingBoard,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<([f32; N_FEATURES], f32)> {
    let (w, h) = board.image.dimensions();
    let mut fg = vec![false; (w * h) as usize];
    for m in &board.masks {
        for (x, y) in m.pixels() {
            if x < w && y < h {
                fg[(y * w + x) as usize] = true;
            }
        }
    }
    let fg_pixels: Vec<u32> = (0..w * h).filter(|&i| fg[i as usize]).collect();
    let feats = FeatureMaps::new(&board.image);
    let mut out = Vec::with_capacity(n);
    let push = |i: u32, label: f32, out: &mut Vec<_>| {
        let mut x = [0f32; N_FEATURES];
        feats.pixel(i % w, i / w, &mut x);
        out.push((x, label));
    };
    let n_fg = if fg_pixels.is_empty() { 0 } else { n / 2 };
    for _ in 0..n_fg {
        push(
            fg_pixels[rng.random_range(0..fg_pixels.len())],
            1.0,
            &mut out,
        );
    }
    let near: Vec<BBox> = board
        .masks
        .iter()
        .filter_map(|m| m.tight_bbox())
        .map(|b| {
            let x = b.x.saturating_sub(6);
            let y = b.y.saturating_sub(6);
            BBox {
                x,
                y,
                width: (b.right() + 6).min(w) - x,
                height: (b.bottom() + 6).min(h) - y,
            }
        })
        .collect();
    let n_bg = n - n_fg;
    let mut taken = 0;
    let mut attempts = 0;
    while taken < n_bg && attempts < n_bg * 50 {
        attempts += 1;
        let i = if !near.is_empty() && taken % 2 == 0 {
            let b = near[rng.random_range(0..near.len())];
            let x = rng.random_range(b.x..b.right());
            let y = rng.random_range(b.y..b.bottom());
            y * w + x
        } else {
            rng.random_range(0..w * h)
        };
        if !fg[i as usize] {
            push(i, 0.0, &mut out);
            taken += 1;
        }
    }
    out
}

/// Train the pixel model. Boards are read once, sequentially.
pub fn train_segmenter<S: BoardSource + ?Sized>(
    source: &S,
    config: &SegTrainConfig,
) -> Result<Segmenter> {
    config.validate()?;
    if source.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    let mut samples = Vec::new();
    let mut min_area = u64::MAX;
    for i in 0..source.len() {
        let board = source.load(i)?;
        for m in &board.masks {
            min_area = min_area.min(m.area());
        }
        let mut rng = board_rng(config.seed, 1 + i as u64);
        samples.extend(sample_board(&board, config.samples_per_board, &mut rng));
    }
    if min_area == u64::MAX {
        return Err(Error::Training(
            "no ground-truth instances in training set".into(),
        ));
    }
    let normalization = Standardizer::fit(samples.iter().map(|(x, _)| x.as_slice()), N_FEATURES);
    let data: Vec<(Vec<f32>, f32)> = samples
        .iter()
        .map(|(x, y)| (normalization.apply(x), *y))
        .collect();
    drop(samples);
    info!(
        "segmenter: {} pixel samples from {} boards",
        data.len(),
        source.len()
    );

    let mut rng = board_rng(config.seed, 0);
    let mut network = Network::new(N_FEATURES, config.hidden, config.blocks, 1, &mut rng);
    let mut opt = Sgd::new(&network, config.learning_rate, config.momentum);
    let mut grads = network.zeros_like();
    let mut trace = Trace::default();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainingLog {
        epoch_losses: Vec::with_capacity(config.epochs),
        n_boards: source.len(),
        n_samples: data.len(),
    };
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let frozen = epoch < config.freeze_epochs;
        let mut total = 0f64;
        for batch in order.chunks(config.batch_size) {
            grads.scale_grads(0.0);
            for &k in batch {
                let (x, y) = &data[k];
                let z = network.forward_traced(x, Some(&mut trace))[0];
                total += bce_with_logits(z, *y) as f64;
                let g = (sigmoid(z) - y) / batch.len() as f32;
                network.backward(&trace, &[g], &mut grads);
            }
            opt.step(&mut network, &grads, frozen);
        }
        let mean = total / data.len() as f64;
        debug!("segmenter epoch {}: loss {mean:.5}", epoch + 1);
        log.epoch_losses.push(mean);
    }
    let min_area = ((min_area as f64 * config.min_area_fraction).floor() as u64).max(1);
    Ok(Segmenter {
        format: CHECKPOINT_FORMAT.into(),
        config: config.clone(),
        classes: vec![super::INSTANCE_LABEL.into()],
        channels: 3,
        normalization,
        network,
        min_area,
        log,
    })
}

fn bce_with_logits(z: f32, y: f32) -> f32 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Greedy mask NMS: keep the highest-scoring instance, drop any later one
/// overlapping a kept instance above `iou_threshold`. Returns kept positions.
pub fn non_max_suppression(instances: &[InstanceMask], iou_threshold: f64) -> Result<Vec<usize>> {
    let mut order: Vec<usize> = (0..instances.len()).collect();
    order.sort_by(|&a, &b| {
        instances[b]
            .effective_score()
            .total_cmp(&instances[a].effective_score())
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        let bi = instances[i].mask.tight_bbox();
        let mut suppressed = false;
        for &k in &kept {
            let disjoint = match (bi, instances[k].mask.tight_bbox()) {
                (Some(a), Some(b)) => a.intersection(&b).is_none(),
                _ => true,
            };
            if !disjoint && iou(&instances[i].mask, &instances[k].mask)? > iou_threshold {
                suppressed = true;
                break;
            }
        }
        if !suppressed {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    Ok(kept)
}

/// Detect specimens on one board. Instances scoring below `score_threshold`
/// are removed after suppression, so raising the threshold never adds any.
pub fn detect(
    file: &str,
    image: &DynamicImage,
    model: &Segmenter,
    score_threshold: f32,
) -> Result<DetectionResult> {
    if !(0.0..=1.0).contains(&score_threshold) {
        return Err(Error::InvalidConfig(format!(
            "score threshold {score_threshold} outside [0, 1]"
        )));
    }
    let actual = image.color().channel_count();
    if actual != model.channels {
        return Err(Error::ChannelMismatch {
            expected: model.channels,
            actual,
        });
    }
    let rgb = image.to_rgb8();
    let (w, h) = rgb.dimensions();
    let prob = model.probability_map(&rgb);
    let fg: Vec<bool> = prob
        .iter()
        .map(|&p| p >= model.config.pixel_threshold)
        .collect();
    let (labels, comps) = label_components(w, h, &fg);
    let mut candidates = Vec::new();
    for c in comps.iter().filter(|c| c.area >= model.min_area) {
        let b = c.bbox;
        let mask = Mask::from_fn(b, |x, y| labels[(y * w + x) as usize] == c.label);
        let sum: f64 = mask
            .pixels()
            .map(|(x, y)| prob[(y * w + x) as usize] as f64)
            .sum();
        let score = (sum / c.area as f64).clamp(0.0, 1.0) as f32;
        candidates.push(InstanceMask::new(mask, Some(score))?);
    }
    let kept = non_max_suppression(&candidates, model.config.nms_iou)?;
    let instances: Vec<InstanceMask> = kept
        .into_iter()
        .map(|i| candidates[i].clone())
        .filter(|m| m.effective_score() >= score_threshold)
        .collect();
    let boxes: Vec<BBox> = decode_masks(
        &instances.iter().map(|m| m.mask.clone()).collect::<Vec<_>>(),
        w,
        h,
    )
    .into_iter()
    .map(|b| b.expect("instances are non-empty and in frame"))
    .collect();
    if instances.is_empty() {
        warn!("{file}: no instances detected");
    }
    let indices = index_positions(&boxes);
    DetectionResult::new(file.to_string(), w, h, instances, boxes, indices)
}
