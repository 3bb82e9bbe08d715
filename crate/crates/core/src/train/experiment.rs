//! Cross-validation and the six-variant ablation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{train_fold, EventLog, FoldData, RunOptions, RunRecord, TrainConfig};
use crate::data::{FoldPlan, Volume};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::metrics::{fold_mean, fold_std, MetricRecord};
use crate::model::{ModelConfig, Variant};

#[derive(Clone, Debug, Default)]
pub struct CvOptions {
    /// Train folds on separate threads.
    pub parallel: bool,
    /// Directory for per-fold best checkpoints.
    pub checkpoint_dir: Option<PathBuf>,
    pub eval_train: bool,
}

/// Fold statistics of one epoch across the folds that reached it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub folds: usize,
    pub val_dsc_mean: f64,
    pub val_dsc_std: f64,
    pub loss_mean: f64,
    pub loss_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub runs: Vec<RunRecord>,
    /// Test metrics of each fold's best model.
    pub per_fold: Vec<MetricRecord>,
    pub mean: MetricRecord,
    pub std: MetricRecord,
    pub curves: Vec<CurvePoint>,
}

impl CvReport {
    pub fn curves_csv(&self) -> String {
        let mut s = String::from("epoch,folds,val_dsc_mean,val_dsc_std,val_dsc_low,val_dsc_high,loss_mean,loss_std\n");
        for c in &self.curves {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                c.epoch,
                c.folds,
                c.val_dsc_mean,
                c.val_dsc_std,
                c.val_dsc_mean - c.val_dsc_std,
                c.val_dsc_mean + c.val_dsc_std,
                c.loss_mean,
                c.loss_std
            ));
        }
        s
    }

    pub fn folds_csv(&self) -> String {
        let mut s = String::from("fold,dsc,iou,precision,recall\n");
        for (k, m) in self.per_fold.iter().enumerate() {
            s.push_str(&format!("{},{},{},{},{}\n", k, m.dsc, m.iou, m.precision, m.recall));
        }
        s.push_str(&format!("mean,{},{},{},{}\n", self.mean.dsc, self.mean.iou, self.mean.precision, self.mean.recall));
        s.push_str(&format!("std,{},{},{},{}\n", self.std.dsc, self.std.iou, self.std.precision, self.std.recall));
        s
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn curves(runs: &[RunRecord]) -> Vec<CurvePoint> {
    let longest = runs.iter().map(|r| r.epochs.len()).max().unwrap_or(0);
    (0..longest)
        .map(|i| {
            let reached: Vec<_> = runs.iter().filter_map(|r| r.epochs.get(i)).collect();
            let (val_dsc_mean, val_dsc_std) = mean_std(&reached.iter().map(|e| e.val.dsc).collect::<Vec<_>>());
            let (loss_mean, loss_std) = mean_std(&reached.iter().map(|e| e.loss_total).collect::<Vec<_>>());
            CurvePoint { epoch: i + 1, folds: reached.len(), val_dsc_mean, val_dsc_std, loss_mean, loss_std }
        })
        .collect()
}

/// Trains one model per fold of `plan` and aggregates the test metrics.
pub fn cross_validate(
    volumes: &[Volume],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    plan: &FoldPlan,
    opts: &CvOptions,
    log: &EventLog,
) -> Result<CvReport> {
    if plan.folds.is_empty() {
        return Err(Error::Config("fold plan is empty".into()));
    }
    let run_one = |k: usize| -> Result<RunRecord> {
        let data = FoldData::build(volumes, &plan.folds[k], model_cfg.context_depth, cfg.balance, cfg.seed)?;
        let run_opts = RunOptions {
            label: format!("{}/fold{k}", model_cfg.variant),
            checkpoint: opts.checkpoint_dir.as_ref().map(|d| d.join(format!("{}-fold{k}.ckpt", model_cfg.variant))),
            eval_train: opts.eval_train,
        };
        train_fold(model_cfg, cfg, loss_cfg, &data, &run_opts, log).map(|(r, _)| r)
    };
    let results: Vec<Result<RunRecord>> = if opts.parallel && plan.folds.len() > 1 {
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..plan.folds.len()).map(|k| s.spawn(move || run_one(k))).collect();
            handles.into_iter().map(|h| h.join().expect("fold thread panicked")).collect()
        })
    } else {
        (0..plan.folds.len()).map(run_one).collect()
    };
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;
    let per_fold: Vec<MetricRecord> = runs
        .iter()
        .map(|r| r.test.as_ref().map(|t| t.mean).unwrap_or(r.best_val))
        .collect();
    let report = CvReport {
        mean: fold_mean(&per_fold)?,
        std: fold_std(&per_fold)?,
        curves: curves(&runs),
        per_fold,
        runs,
    };
    log.emit("cv_end", json!({"variant": model_cfg.variant.name(), "mean": report.mean, "std": report.std}));
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub label: String,
    pub parameters: usize,
    pub metrics: MetricRecord,
    pub cv: CvReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<24} {:>8} {:>8} {:>10} {:>8} {:>10}\n", "Model", "DSC", "IoU", "Precision", "Recall", "Params");
        for r in &self.rows {
            let m = r.metrics;
            s.push_str(&format!(
                "{:<24} {:>8.4} {:>8.4} {:>10.4} {:>8.4} {:>10}\n",
                r.label, m.dsc, m.iou, m.precision, m.recall, r.parameters
            ));
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("variant,label,parameters,dsc,iou,precision,recall\n");
        for r in &self.rows {
            let m = r.metrics;
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.variant, r.label, r.parameters, m.dsc, m.iou, m.precision, m.recall
            ));
        }
        s
    }
}

/// Cross-validates every variant under identical data, seeds and budget, in
/// table order.
pub fn run_ablation(
    volumes: &[Volume],
    base: &ModelConfig,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    plan: &FoldPlan,
    opts: &CvOptions,
    log: &EventLog,
) -> Result<AblationReport> {
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let model_cfg = base.with_variant(v);
        let cv = cross_validate(volumes, &model_cfg, cfg, loss_cfg, plan, opts, log)?;
        rows.push(AblationRow {
            variant: v,
            label: v.label().to_string(),
            parameters: cv.runs[0].parameters,
            metrics: cv.mean,
            cv,
        });
    }
    Ok(AblationReport { rows })
}
