//! Resolution x view x task grid: train, evaluate and summarise every cell.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::{
    evaluate, prepare, present_classes, test_specimens, train_estimator, ColorJitter,
    EstimationItem, Estimator, EstimatorConfig, EvalReport, PreparedSample, Task,
};
use crate::curation::{class_weights, Resolution};
use crate::data::{MaturityLabel, View};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LadderConfig {
    pub resolutions: Vec<Resolution>,
    pub views: Vec<View>,
    pub tasks: Vec<Task>,
    /// Output order of the classifier; classes absent from a cell's
    /// training data are skipped.
    pub class_order: Vec<MaturityLabel>,
    pub epochs: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub augment: ColorJitter,
    pub augment_variants: usize,
    pub seed: u64,
}

impl Default for LadderConfig {
    fn default() -> Self {
        let base = EstimatorConfig::new(Task::Length, View::Lateral, Resolution::new(340, 100));
        Self {
            resolutions: crate::curation::DEFAULT_LADDER.to_vec(),
            views: View::ALL.to_vec(),
            tasks: vec![Task::Length, Task::Maturity],
            class_order: Vec::new(),
            epochs: base.epochs,
            learning_rate: base.learning_rate,
            momentum: base.momentum,
            batch_size: base.batch_size,
            hidden: base.hidden,
            blocks: base.blocks,
            augment: base.augment,
            augment_variants: base.augment_variants,
            seed: base.seed,
        }
    }
}

impl LadderConfig {
    pub fn estimator_config(
        &self,
        task: Task,
        view: View,
        resolution: Resolution,
    ) -> EstimatorConfig {
        EstimatorConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            hidden: self.hidden,
            blocks: self.blocks,
            augment: self.augment,
            augment_variants: self.augment_variants,
            seed: self.seed,
            ..EstimatorConfig::new(task, view, resolution)
        }
    }
}

/// Items of one dataset cell, streamed so whole datasets never sit in memory.
pub type ItemStream<'a> = Box<dyn Iterator<Item = Result<EstimationItem>> + 'a>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub view: View,
    pub resolution: Resolution,
    pub task: Task,
    /// `None` when the dataset cell was missing or could not be trained.
    pub report: Option<EvalReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderRow {
    pub resolution: Resolution,
    pub lateral_length_mm: Option<f64>,
    pub dorsal_length_mm: Option<f64>,
    pub lateral_maturity_pct: Option<f64>,
    pub dorsal_maturity_pct: Option<f64>,
}

/// A step up in resolution that made a cell worse.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendFlag {
    pub view: View,
    pub task: Task,
    pub from: Resolution,
    pub to: Resolution,
    pub before: f64,
    pub after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LadderReport {
    pub rows: Vec<LadderRow>,
    pub cells: Vec<CellOutcome>,
    /// Mean metric per view and task over the resolutions present,
    /// keyed like `lateral_length_mm`.
    pub view_means: BTreeMap<String, f64>,
    pub trend_exceptions: Vec<TrendFlag>,
}

impl LadderReport {
    pub fn cell(&self, view: View, resolution: Resolution, task: Task) -> Option<&EvalReport> {
        self.cells
            .iter()
            .find(|c| c.view == view && c.resolution == resolution && c.task == task)
            .and_then(|c| c.report.as_ref())
    }

    pub fn table_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.2}"));
        let mut s = String::from("resolution,lateral_length_mm,dorsal_length_mm,lateral_maturity_pct,dorsal_maturity_pct\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.resolution,
                f(r.lateral_length_mm),
                f(r.dorsal_length_mm),
                f(r.lateral_maturity_pct),
                f(r.dorsal_maturity_pct)
            ));
        }
        let m = |k: &str| self.view_means.get(k).copied();
        s.push_str(&format!(
            "mean,{},{},{},{}\n",
            f(m("lateral_length_mm")),
            f(m("dorsal_length_mm")),
            f(m("lateral_maturity_pct")),
            f(m("dorsal_maturity_pct"))
        ));
        s
    }
}

fn metric_key(view: View, task: Task) -> String {
    let unit = match task {
        Task::Length => "mm",
        Task::Maturity => "pct",
    };
    format!("{}_{}_{unit}", view.as_str().to_lowercase(), task.as_str())
}

/// Train and evaluate one cell on an already split dataset. Maturity class
/// weights come from the training counts.
pub fn train_cell(
    cfg: &LadderConfig,
    view: View,
    res: Resolution,
    train: &[PreparedSample],
    test: &[PreparedSample],
    task: Task,
) -> Result<(Estimator, EvalReport)> {
    let mut ecfg = cfg.estimator_config(task, view, res);
    let classes = if task == Task::Maturity {
        let order = if cfg.class_order.is_empty() {
            let mut seen: Vec<MaturityLabel> = train.iter().map(|s| s.maturity.clone()).collect();
            seen.sort();
            seen.dedup();
            seen
        } else {
            cfg.class_order.clone()
        };
        let classes = present_classes(&order, train);
        let mut counts = BTreeMap::new();
        for s in train {
            *counts.entry(s.maturity.to_string()).or_insert(0usize) += 1;
        }
        ecfg.weights = Some(class_weights(&counts)?);
        // Test-only classes cannot be scored by this model.
        classes
    } else {
        Vec::new()
    };
    let test: Vec<PreparedSample> = if task == Task::Maturity {
        let (kept, dropped): (Vec<_>, Vec<_>) = test
            .iter()
            .cloned()
            .partition(|s| classes.contains(&s.maturity));
        if !dropped.is_empty() {
            warn!(
                "{view} {res}: {} test samples have classes unseen in training",
                dropped.len()
            );
        }
        kept
    } else {
        test.to_vec()
    };
    let model = train_estimator(train, Some(&test), &classes, &ecfg)?;
    let report = evaluate(&model, &test)?;
    Ok((model, report))
}

/// Run every (resolution, view, task) cell. `source` yields a cell's items
/// or `None` when that cell was not built; missing or failing cells are
/// recorded and the run continues.
pub fn run_ladder<F>(cfg: &LadderConfig, mut source: F) -> Result<LadderReport>
where
    F: FnMut(View, Resolution) -> Result<Option<ItemStream<'static>>>,
{
    if cfg.resolutions.is_empty() || cfg.views.is_empty() || cfg.tasks.is_empty() {
        return Err(Error::InvalidConfig("ladder grid is empty".into()));
    }
    let mut cells = Vec::new();
    for &res in &cfg.resolutions {
        for &view in &cfg.views {
            let absent = |note: String| {
                cfg.tasks
                    .iter()
                    .map(|&task| CellOutcome {
                        view,
                        resolution: res,
                        task,
                        report: None,
                        note: Some(note.clone()),
                    })
                    .collect::<Vec<_>>()
            };
            let Some(items) = source(view, res)? else {
                warn!("{view} {res}: dataset not built; cell skipped");
                cells.extend(absent("dataset not built".into()));
                continue;
            };
            let mut prepared = Vec::new();
            for item in items {
                prepared.push(prepare(
                    &item?,
                    &cfg.augment,
                    cfg.augment_variants,
                    cfg.seed,
                ));
            }
            let test_ids = test_specimens(prepared.iter().map(|s| s.id.as_str()), cfg.seed);
            let (test, train): (Vec<_>, Vec<_>) =
                prepared.into_iter().partition(|s| test_ids.contains(&s.id));
            if train.is_empty() || test.is_empty() {
                cells.extend(absent(format!(
                    "too few samples ({} train, {} test)",
                    train.len(),
                    test.len()
                )));
                continue;
            }
            for &task in &cfg.tasks {
                info!("ladder cell {view} {res} {}", task.as_str());
                let outcome = match train_cell(cfg, view, res, &train, &test, task) {
                    Ok((_, r)) => CellOutcome {
                        view,
                        resolution: res,
                        task,
                        report: Some(r),
                        note: None,
                    },
                    Err(e) => {
                        warn!("{view} {res} {}: {e}", task.as_str());
                        CellOutcome {
                            view,
                            resolution: res,
                            task,
                            report: None,
                            note: Some(e.to_string()),
                        }
                    }
                };
                cells.push(outcome);
            }
        }
    }
    Ok(summarise(cfg, cells))
}

fn summarise(cfg: &LadderConfig, cells: Vec<CellOutcome>) -> LadderReport {
    let metric = |v: View, r: Resolution, t: Task| {
        cells
            .iter()
            .find(|c| c.view == v && c.resolution == r && c.task == t)
            .and_then(|c| c.report.as_ref())
            .map(|r| r.metric)
    };
    let rows = cfg
        .resolutions
        .iter()
        .map(|&r| LadderRow {
            resolution: r,
            lateral_length_mm: metric(View::Lateral, r, Task::Length),
            dorsal_length_mm: metric(View::Dorsal, r, Task::Length),
            lateral_maturity_pct: metric(View::Lateral, r, Task::Maturity),
            dorsal_maturity_pct: metric(View::Dorsal, r, Task::Maturity),
        })
        .collect();
    let mut view_means = BTreeMap::new();
    let mut trend_exceptions = Vec::new();
    let mut ascending = cfg.resolutions.clone();
    ascending.sort_by_key(|r| (r.width as u64) * (r.height as u64));
    for &view in &cfg.views {
        for &task in &cfg.tasks {
            let series: Vec<(Resolution, f64)> = ascending
                .iter()
                .filter_map(|&r| metric(view, r, task).map(|m| (r, m)))
                .collect();
            if !series.is_empty() {
                let mean = series.iter().map(|s| s.1).sum::<f64>() / series.len() as f64;
                view_means.insert(metric_key(view, task), mean);
            }
            for w in series.windows(2) {
                let worse = match task {
                    Task::Length => w[1].1 > w[0].1,
                    Task::Maturity => w[1].1 < w[0].1,
                };
                if worse {
                    trend_exceptions.push(TrendFlag {
                        view,
                        task,
                        from: w[0].0,
                        to: w[1].0,
                        before: w[0].1,
                        after: w[1].1,
                    });
                }
            }
        }
    }
    LadderReport {
        rows,
        cells,
        view_means,
        trend_exceptions,
    }
}

/// Write `table2.csv`, `confusion_{view}_{res}.csv`, `curves_{cell}.csv`
/// and `ladder.json` into `dir`.
pub fn write_ladder_reports(report: &LadderReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: String, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("table2.csv".into(), report.table_csv())?;
    for c in &report.cells {
        let Some(r) = &c.report else { continue };
        let view = c.view.as_str().to_lowercase();
        if let Some(cm) = &r.confusion {
            write(
                format!("confusion_{view}_{}.csv", c.resolution),
                cm.to_csv(),
            )?;
        }
        let mut s = String::from("epoch,train_loss,test_loss\n");
        for (i, tr) in r.loss_curves.train.iter().enumerate() {
            let te = r
                .loss_curves
                .test
                .get(i)
                .map_or(String::new(), |v| format!("{v:.6}"));
            s.push_str(&format!("{},{tr:.6},{te}\n", i + 1));
        }
        write(
            format!("curves_{view}_{}_{}.csv", c.resolution, c.task.as_str()),
            s,
        )?;
    }
    write("ladder.json".into(), serde_json::to_string_pretty(report)?)?;
    Ok(())
}
