//! Maturity-stage classification and length regression from curated crops.
//!
//! Every crop is reduced to a fixed descriptor (see [`describe`]) and a
//! residual MLP is trained on top, fully trainable from the first epoch.

mod features;
mod ladder;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use image::RgbImage;
use log::debug;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::curation::{ClassWeights, Resolution};
use crate::data::{MaturityLabel, View};
use crate::error::{Error, Result};
use crate::nn::{Network, Sgd, Standardizer, Trace};

pub use features::{describe, ColorJitter, DESCRIPTOR_LEN};
pub use ladder::{
    run_ladder, train_cell, write_ladder_reports, CellOutcome, ItemStream, LadderConfig,
    LadderReport, LadderRow, TrendFlag,
};

const CHECKPOINT_FORMAT: &str = "krill-estimator/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Maturity,
    Length,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Maturity => "maturity",
            Task::Length => "length",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub task: Task,
    pub view: View,
    pub resolution: Resolution,
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub hidden: usize,
    pub blocks: usize,
    /// Required for maturity; ignored for length.
    pub weights: Option<ClassWeights>,
    pub augment: ColorJitter,
    /// Jittered copies prepared per training sample; one is drawn per epoch.
    pub augment_variants: usize,
    pub seed: u64,
    pub backbone: String,
}

impl EstimatorConfig {
    pub fn new(task: Task, view: View, resolution: Resolution) -> Self {
        Self {
            task,
            view,
            resolution,
            epochs: 60,
            learning_rate: 1e-3,
            momentum: 0.9,
            batch_size: 16,
            hidden: 32,
            blocks: 2,
            weights: None,
            augment: ColorJitter::default(),
            augment_variants: 4,
            seed: 0,
            backbone: "descriptor-mlp".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) || self.batch_size == 0 || self.hidden == 0 {
            return Err(Error::InvalidConfig(
                "learning_rate, batch_size and hidden must be positive".into(),
            ));
        }
        if self.task == Task::Maturity && self.weights.is_none() {
            return Err(Error::InvalidConfig(
                "maturity training needs class weights".into(),
            ));
        }
        Ok(())
    }
}

/// One labelled crop at the dataset resolution.
#[derive(Debug, Clone)]
pub struct EstimationItem {
    pub id: String,
    pub length_mm: u32,
    pub maturity: MaturityLabel,
    pub image: RgbImage,
}

/// Descriptors of one item: the clean image first, then jittered copies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedSample {
    pub id: String,
    pub length_mm: u32,
    pub maturity: MaturityLabel,
    pub variants: Vec<Vec<f32>>,
}

impl PreparedSample {
    pub fn clean(&self) -> &[f32] {
        &self.variants[0]
    }
}

fn item_rng(seed: u64, id: &str) -> ChaCha8Rng {
    // FNV-1a of the id picks the stream, so results do not depend on order.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in id.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(h);
    rng
}

/// Describe one item, adding `variants` jittered copies.
pub fn prepare(
    item: &EstimationItem,
    jitter: &ColorJitter,
    variants: usize,
    seed: u64,
) -> PreparedSample {
    let mut rng = item_rng(seed, &item.id);
    let mut out = vec![describe(&item.image).to_vec()];
    for _ in 0..variants {
        out.push(describe(&jitter.apply(&item.image, &mut rng)).to_vec());
    }
    PreparedSample {
        id: item.id.clone(),
        length_mm: item.length_mm,
        maturity: item.maturity.clone(),
        variants: out,
    }
}

/// Specimen ids held out for testing: 20% (rounded, at least one when
/// there are two or more), chosen by seeded shuffle of the sorted ids.
pub fn test_specimens<'a>(keys: impl IntoIterator<Item = &'a str>, seed: u64) -> BTreeSet<String> {
    let mut all: Vec<String> = keys
        .into_iter()
        .map(String::from)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_test = crate::segmentation::random_test_size(all.len());
    all.into_iter().take(n_test).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossCurves {
    pub train: Vec<f64>,
    /// Empty when no test set was given.
    pub test: Vec<f64>,
}

/// Trained model plus everything needed to apply it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimator {
    pub format: String,
    pub config: EstimatorConfig,
    /// Class order of the output layer (maturity only).
    pub classes: Vec<MaturityLabel>,
    pub normalization: Standardizer,
    pub network: Network,
    pub curves: LossCurves,
}

impl Estimator {
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Estimator = serde_json::from_str(&text)?;
        if m.format != CHECKPOINT_FORMAT {
            return Err(Error::InvalidConfig(format!(
                "unsupported checkpoint format `{}`",
                m.format
            )));
        }
        Ok(m)
    }

    fn outputs(&self, descriptor: &[f32]) -> Vec<f32> {
        self.network.forward(&self.normalization.apply(descriptor))
    }

    pub fn predict_length(&self, descriptor: &[f32]) -> f64 {
        self.outputs(descriptor)[0] as f64
    }

    /// Class index with the highest logit (first on ties).
    pub fn predict_class(&self, descriptor: &[f32]) -> usize {
        let out = self.outputs(descriptor);
        let mut best = 0;
        for (i, &v) in out.iter().enumerate() {
            if v > out[best] {
                best = i;
            }
        }
        best
    }

    pub fn predict_image(&self, image: &RgbImage) -> Prediction {
        let d = describe(image);
        match self.config.task {
            Task::Length => Prediction::Length(self.predict_length(&d)),
            Task::Maturity => Prediction::Maturity(self.classes[self.predict_class(&d)].clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Prediction {
    Length(f64),
    Maturity(MaturityLabel),
}

fn softmax(z: &[f32]) -> Vec<f32> {
    let m = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f32 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Class-weighted cross-entropy over a batch, normalised by the summed
/// weights. Returns the loss and d(loss)/d(logits) per sample.
pub fn weighted_cross_entropy(
    logits: &[Vec<f32>],
    targets: &[usize],
    weights: &[f32],
) -> (f64, Vec<Vec<f32>>) {
    let wsum: f32 = targets.iter().map(|&t| weights[t]).sum();
    let mut loss = 0f64;
    let mut grads = Vec::with_capacity(logits.len());
    for (z, &t) in logits.iter().zip(targets) {
        let p = softmax(z);
        let w = weights[t];
        loss += (w * -(p[t].max(1e-12)).ln()) as f64;
        grads.push(
            p.iter()
                .enumerate()
                .map(|(k, &pk)| w * (pk - if k == t { 1.0 } else { 0.0 }) / wsum)
                .collect(),
        );
    }
    (loss / wsum as f64, grads)
}

/// Root-mean-square error over a batch and its gradient per prediction.
pub fn rmse_loss(preds: &[f32], targets: &[f32]) -> (f64, Vec<f32>) {
    let n = preds.len() as f64;
    let mse: f64 = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| ((p - t) as f64).powi(2))
        .sum::<f64>()
        / n;
    let r = mse.sqrt();
    let grads = preds
        .iter()
        .zip(targets)
        .map(|(p, t)| {
            if r > 0.0 {
                ((p - t) as f64 / (n * r)) as f32
            } else {
                0.0
            }
        })
        .collect();
    (r, grads)
}

pub fn rmse(preds: &[f64], truths: &[f64]) -> Result<f64> {
    if preds.is_empty() || preds.len() != truths.len() {
        return Err(Error::Evaluation(
            "RMSE needs equal, non-empty inputs".into(),
        ));
    }
    let s: f64 = preds.iter().zip(truths).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((s / preds.len() as f64).sqrt())
}

/// Class list for a dataset: taxonomy order, restricted to labels present.
pub fn present_classes(order: &[MaturityLabel], samples: &[PreparedSample]) -> Vec<MaturityLabel> {
    let present: BTreeSet<&MaturityLabel> = samples.iter().map(|s| &s.maturity).collect();
    order
        .iter()
        .filter(|l| present.contains(l))
        .cloned()
        .collect()
}

/// Train one estimator. `classes` fixes the output order for maturity.
pub fn train_estimator(
    train: &[PreparedSample],
    test: Option<&[PreparedSample]>,
    classes: &[MaturityLabel],
    cfg: &EstimatorConfig,
) -> Result<Estimator> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Training("training set is empty".into()));
    }
    let class_weight: Vec<f32> = match cfg.task {
        Task::Length => Vec::new(),
        Task::Maturity => {
            let weights = cfg.weights.as_ref().expect("validated");
            let mut w = Vec::with_capacity(classes.len());
            for c in classes {
                let v = weights
                    .get(c.as_str())
                    .ok_or_else(|| Error::Training(format!("class {c} has no weight")))?;
                w.push(v as f32);
            }
            for s in train.iter().chain(test.unwrap_or(&[])) {
                if !classes.contains(&s.maturity) {
                    return Err(Error::Training(format!(
                        "sample {} has class {} outside the class list",
                        s.id, s.maturity
                    )));
                }
            }
            w
        }
    };
    let target_class =
        |s: &PreparedSample| classes.iter().position(|c| c == &s.maturity).unwrap_or(0);

    let normalization = Standardizer::fit(
        train
            .iter()
            .flat_map(|s| s.variants.iter().map(|v| v.as_slice())),
        DESCRIPTOR_LEN,
    );
    let norm = |v: &[f32]| normalization.apply(v);
    let train_x: Vec<Vec<Vec<f32>>> = train
        .iter()
        .map(|s| s.variants.iter().map(|v| norm(v)).collect())
        .collect();
    let test_x: Vec<Vec<f32>> = test
        .unwrap_or(&[])
        .iter()
        .map(|s| norm(s.clean()))
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let outputs = match cfg.task {
        Task::Length => 1,
        Task::Maturity => classes.len(),
    };
    let mut network = Network::new(DESCRIPTOR_LEN, cfg.hidden, cfg.blocks, outputs, &mut rng);
    if cfg.task == Task::Length {
        let mean = train.iter().map(|s| s.length_mm as f32).sum::<f32>() / train.len() as f32;
        network.head.bias[0] = mean;
    }
    let mut opt = Sgd::new(&network, cfg.learning_rate, cfg.momentum);
    let mut grads = network.zeros_like();
    let mut traces = vec![Trace::default(); cfg.batch_size];
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curves = LossCurves::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let picks: Vec<usize> = (0..train.len())
            .map(|i| {
                if train_x[i].len() > 1 {
                    rng.random_range(1..train_x[i].len())
                } else {
                    0
                }
            })
            .collect();
        let (mut sum_loss, mut sum_w) = (0f64, 0f64);
        for batch in order.chunks(cfg.batch_size) {
            grads.scale_grads(0.0);
            let outs: Vec<Vec<f32>> = batch
                .iter()
                .zip(traces.iter_mut())
                .map(|(&i, tr)| network.forward_traced(&train_x[i][picks[i]], Some(tr)))
                .collect();
            let grad_out: Vec<Vec<f32>> = match cfg.task {
                Task::Length => {
                    let p: Vec<f32> = outs.iter().map(|o| o[0]).collect();
                    let t: Vec<f32> = batch.iter().map(|&i| train[i].length_mm as f32).collect();
                    let (l, g) = rmse_loss(&p, &t);
                    sum_loss += l * l * batch.len() as f64;
                    sum_w += batch.len() as f64;
                    g.into_iter().map(|v| vec![v]).collect()
                }
                Task::Maturity => {
                    let t: Vec<usize> = batch.iter().map(|&i| target_class(&train[i])).collect();
                    let (l, g) = weighted_cross_entropy(&outs, &t, &class_weight);
                    let w: f64 = t.iter().map(|&k| class_weight[k] as f64).sum();
                    sum_loss += l * w;
                    sum_w += w;
                    g
                }
            };
            for (tr, g) in traces.iter().zip(&grad_out) {
                network.backward(tr, g, &mut grads);
            }
            opt.step(&mut network, &grads, false);
        }
        let train_loss = match cfg.task {
            Task::Length => (sum_loss / sum_w).sqrt(),
            Task::Maturity => sum_loss / sum_w,
        };
        curves.train.push(train_loss);
        if let Some(test) = test.filter(|t| !t.is_empty()) {
            let outs: Vec<Vec<f32>> = test_x.iter().map(|x| network.forward(x)).collect();
            let l = match cfg.task {
                Task::Length => {
                    let p: Vec<f32> = outs.iter().map(|o| o[0]).collect();
                    let t: Vec<f32> = test.iter().map(|s| s.length_mm as f32).collect();
                    rmse_loss(&p, &t).0
                }
                Task::Maturity => {
                    let t: Vec<usize> = test.iter().map(target_class).collect();
                    weighted_cross_entropy(&outs, &t, &class_weight).0
                }
            };
            curves.test.push(l);
        }
        debug!(
            "{} epoch {}: train {train_loss:.4}",
            cfg.task.as_str(),
            epoch + 1
        );
    }
    Ok(Estimator {
        format: CHECKPOINT_FORMAT.into(),
        config: cfg.clone(),
        classes: if cfg.task == Task::Maturity {
            classes.to_vec()
        } else {
            Vec::new()
        },
        normalization,
        network,
        curves,
    })
}

/// Rows are true classes, columns predictions, both in `labels` order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        Self {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.labels.len()).map(|i| self.counts[i][i]).sum()
    }

    pub fn support(&self, i: usize) -> usize {
        self.counts[i].iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("truth\\pred");
        for l in &self.labels {
            s.push(',');
            s.push_str(l);
        }
        s.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            s.push_str(l);
            for c in row {
                s.push_str(&format!(",{c}"));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub view: View,
    pub resolution: Resolution,
    /// Accuracy in percent for maturity, RMSE in mm for length.
    pub metric: f64,
    pub n_test: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub balanced_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_class: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confusion: Option<ConfusionMatrix>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean_length_mm: Option<f64>,
    pub loss_curves: LossCurves,
}

/// Evaluate on clean (unjittered) descriptors.
pub fn evaluate(model: &Estimator, test: &[PreparedSample]) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Evaluation("test set is empty".into()));
    }
    let cfg = &model.config;
    let mut report = EvalReport {
        task: cfg.task,
        view: cfg.view,
        resolution: cfg.resolution,
        metric: 0.0,
        n_test: test.len(),
        balanced_accuracy: None,
        per_class: BTreeMap::new(),
        confusion: None,
        mean_length_mm: None,
        loss_curves: model.curves.clone(),
    };
    match cfg.task {
        Task::Length => {
            let p: Vec<f64> = test
                .iter()
                .map(|s| model.predict_length(s.clean()))
                .collect();
            let t: Vec<f64> = test.iter().map(|s| s.length_mm as f64).collect();
            report.metric = rmse(&p, &t)?;
            report.mean_length_mm = Some(t.iter().sum::<f64>() / t.len() as f64);
        }
        Task::Maturity => {
            let labels: Vec<String> = model.classes.iter().map(|c| c.to_string()).collect();
            let mut cm = ConfusionMatrix::new(labels);
            for s in test {
                let truth = model
                    .classes
                    .iter()
                    .position(|c| c == &s.maturity)
                    .ok_or_else(|| {
                        Error::Evaluation(format!("unknown class {} in test set", s.maturity))
                    })?;
                cm.counts[truth][model.predict_class(s.clean())] += 1;
            }
            report.metric = 100.0 * cm.trace() as f64 / cm.total() as f64;
            let mut recalls = Vec::new();
            for (i, l) in cm.labels.iter().enumerate() {
                let sup = cm.support(i);
                if sup > 0 {
                    let r = 100.0 * cm.counts[i][i] as f64 / sup as f64;
                    report.per_class.insert(l.clone(), r);
                    recalls.push(r);
                }
            }
            report.balanced_accuracy = Some(recalls.iter().sum::<f64>() / recalls.len() as f64);
            report.confusion = Some(cm);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lbl(s: &str) -> MaturityLabel {
        MaturityLabel::new(s).unwrap()
    }

    fn sample(id: usize, x: Vec<f32>, len: u32, class: &str) -> PreparedSample {
        let mut v = vec![0.0; DESCRIPTOR_LEN];
        v[..x.len()].copy_from_slice(&x);
        PreparedSample {
            id: id.to_string(),
            length_mm: len,
            maturity: lbl(class),
            variants: vec![v],
        }
    }

    #[test]
    fn rmse_hand_case() {
        assert!((rmse(&[1.0, 2.0], &[3.0, 2.0]).unwrap() - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(rmse(&[4.0, 5.0], &[4.0, 5.0]).unwrap(), 0.0);
        assert!(rmse(&[], &[]).is_err());
    }

    #[test]
    fn unit_weights_match_plain_cross_entropy() {
        let logits = vec![
            vec![0.3, -1.2, 2.0],
            vec![1.0, 0.5, -0.5],
            vec![-0.2, 0.1, 0.0],
        ];
        let t = [2, 0, 1];
        let (lw, gw) = weighted_cross_entropy(&logits, &t, &[1.0, 1.0, 1.0]);
        let mut plain = 0.0;
        for (i, (z, &k)) in logits.iter().zip(&t).enumerate() {
            let p = softmax(z);
            plain -= (p[k] as f64).ln();
            for (j, g) in gw[i].iter().enumerate() {
                let expected = (p[j] - if j == k { 1.0 } else { 0.0 }) / 3.0;
                assert!((g - expected).abs() < 1e-6);
            }
        }
        assert!((lw - plain / 3.0).abs() < 1e-6);
    }

    #[test]
    fn constant_target_regression_converges() {
        let train: Vec<PreparedSample> = (0..40)
            .map(|i| sample(i, vec![i as f32, (i % 3) as f32], 33, "J"))
            .collect();
        let mut cfg = EstimatorConfig::new(Task::Length, View::Lateral, Resolution::new(340, 100));
        cfg.epochs = 20;
        let m = train_estimator(&train, None, &[], &cfg).unwrap();
        let r = evaluate(&m, &train).unwrap();
        assert!(r.metric < 0.5, "rmse {}", r.metric);
    }

    #[test]
    fn separable_classes_learned_and_deterministic() {
        let classes = [lbl("J"), lbl("FS1"), lbl("MA1")];
        let train: Vec<PreparedSample> = (0..90)
            .map(|i| {
                let k = i % 3;
                let jitter = ((i * 37) % 11) as f32 / 11.0;
                sample(
                    i,
                    vec![k as f32 * 2.0 + jitter, -(k as f32) + jitter],
                    30,
                    classes[k].as_str(),
                )
            })
            .collect();
        let mut counts = BTreeMap::new();
        for c in &classes {
            counts.insert(c.to_string(), 30);
        }
        let mut cfg = EstimatorConfig::new(Task::Maturity, View::Dorsal, Resolution::new(340, 100));
        cfg.weights = Some(crate::curation::class_weights(&counts).unwrap());
        let a = train_estimator(&train, Some(&train), &classes, &cfg).unwrap();
        let b = train_estimator(&train, Some(&train), &classes, &cfg).unwrap();
        assert_eq!(a.curves, b.curves);
        assert!(a.curves.train.last() < a.curves.train.first());
        let r = evaluate(&a, &train).unwrap();
        let cm = r.confusion.as_ref().unwrap();
        for i in 0..3 {
            assert_eq!(cm.support(i), 30);
        }
        assert!((r.metric - 100.0 * cm.trace() as f64 / cm.total() as f64).abs() < 1e-9);
        assert!(r.metric > 90.0);
    }

    #[test]
    fn maturity_requires_weights_for_every_class() {
        let train = vec![
            sample(0, vec![1.0], 30, "J"),
            sample(1, vec![2.0], 30, "FS1"),
        ];
        let mut cfg = EstimatorConfig::new(Task::Maturity, View::Dorsal, Resolution::new(340, 100));
        assert!(train_estimator(&train, None, &[lbl("J"), lbl("FS1")], &cfg).is_err());
        let mut w = BTreeMap::new();
        w.insert("J".to_string(), 1.0);
        cfg.weights = Some(ClassWeights { weights: w });
        let err = train_estimator(&train, None, &[lbl("J"), lbl("FS1")], &cfg).unwrap_err();
        assert!(err.to_string().contains("FS1"));
    }

    #[test]
    fn split_is_seeded() {
        let keys: Vec<String> = (0..10).map(|i| format!("s{i}")).collect();
        let a = test_specimens(keys.iter().map(|s| s.as_str()), 4);
        assert_eq!(a.len(), 2);
        assert_eq!(a, test_specimens(keys.iter().map(|s| s.as_str()), 4));
    }
}
