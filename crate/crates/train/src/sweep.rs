//! Cartesian sweeps of one injector or normalization parameter against seeds.

use std::fmt::Write as _;

use ghostnoise_core::Injector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Splits;
use crate::error::{Result, TrainError};
use crate::experiment::{run_experiment, Metrics, TrainConfig};
use crate::mlp::{MlpSpec, NormKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisKind {
    /// Ghost size of GNI/AGNI injectors and of ghost or exclusive normalization.
    GhostSize,
    /// Dropout probability.
    P,
    /// EAGN standard deviation.
    Sigma,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepAxis {
    pub kind: AxisKind,
    pub values: Vec<f64>,
}

/// `spec` with every parameter of kind `kind` set to `value`. Errors when the
/// spec has no such parameter.
pub fn apply_axis(spec: &MlpSpec, kind: AxisKind, value: f64) -> Result<MlpSpec> {
    let mut out = spec.clone();
    let mut touched = false;
    let ghost = || -> Result<usize> {
        if value >= 1.0 && value.fract() == 0.0 {
            Ok(value as usize)
        } else {
            Err(TrainError::Config(format!("ghost size must be a positive integer, got {value}")))
        }
    };
    for inj in out.injectors.iter_mut() {
        match (kind, inj) {
            (AxisKind::GhostSize, Injector::Gni(cfg)) => cfg.ghost_size = ghost()?,
            (AxisKind::GhostSize, Injector::Agni { ghost_size, .. }) => *ghost_size = ghost()?,
            (AxisKind::P, Injector::GaussianDropout { p, .. } | Injector::BernoulliDropout { p, .. }) => *p = value,
            (AxisKind::Sigma, Injector::Eagn { sigma }) => *sigma = value,
            _ => continue,
        }
        touched = true;
    }
    if kind == AxisKind::GhostSize {
        for norm in out.norms.iter_mut() {
            match norm {
                NormKind::GhostBatchNorm { ghost_size } | NormKind::ExclusiveBatchNorm { ghost_size } => *ghost_size = ghost()?,
                _ => continue,
            }
            touched = true;
        }
    }
    if !touched {
        return Err(TrainError::Config(format!("sweep axis {kind:?} does not match any layer of the model")));
    }
    out.validate()?;
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct SweepRun {
    pub run_id: usize,
    pub axis_value: f64,
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub run_id: usize,
    pub axis_value: f64,
    pub seed: u64,
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub axis_value: f64,
    pub mean_val_acc: f64,
    pub std_val_acc: f64,
    pub mean_test_acc: f64,
    pub std_test_acc: f64,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub runs: Vec<SweepRun>,
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl SweepResult {
    /// One row per (run, epoch).
    pub fn run_rows(&self) -> Vec<RunRow> {
        self.runs
            .iter()
            .flat_map(|r| {
                r.metrics.epochs.iter().map(move |e| RunRow {
                    run_id: r.run_id,
                    axis_value: r.axis_value,
                    seed: r.seed,
                    epoch: e.epoch,
                    lr: e.lr,
                    train_loss: e.train_loss,
                    train_acc: e.train_acc,
                    val_acc: e.val_acc,
                    diverged: r.metrics.diverged,
                })
            })
            .collect()
    }

    /// Final validation and test accuracy over seeds, per axis value in sweep order.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let mut values: Vec<f64> = Vec::new();
        for r in &self.runs {
            if !values.iter().any(|v| v.to_bits() == r.axis_value.to_bits()) {
                values.push(r.axis_value);
            }
        }
        values
            .into_iter()
            .map(|v| {
                let cell: Vec<&SweepRun> = self.runs.iter().filter(|r| r.axis_value.to_bits() == v.to_bits()).collect();
                let val: Vec<f64> = cell.iter().map(|r| r.metrics.final_val_acc()).collect();
                let test: Vec<f64> = cell.iter().map(|r| r.metrics.test_acc).collect();
                let (mean_val_acc, std_val_acc) = mean_std(&val);
                let (mean_test_acc, std_test_acc) = mean_std(&test);
                SummaryRow { axis_value: v, mean_val_acc, std_val_acc, mean_test_acc, std_test_acc }
            })
            .collect()
    }

    pub fn runs_csv(&self) -> Result<String> {
        to_csv(&self.run_rows())
    }

    pub fn summary_csv(&self) -> Result<String> {
        to_csv(&self.summary())
    }

    /// `{"runs": [...], "summary": [...]}`. Non-finite numbers become `null`.
    pub fn to_json(&self) -> String {
        let doc = serde_json::json!({ "runs": self.run_rows(), "summary": self.summary() });
        serde_json::to_string_pretty(&doc).expect("rows always serialize")
    }

    /// Per-run divergence count for each axis value, in sweep order.
    pub fn divergence_counts(&self) -> Vec<(f64, usize, usize)> {
        self.summary()
            .iter()
            .map(|s| {
                let cell = self.runs.iter().filter(|r| r.axis_value.to_bits() == s.axis_value.to_bits());
                let (n, d) = cell.fold((0, 0), |(n, d), r| (n + 1, d + usize::from(r.metrics.diverged)));
                (s.axis_value, d, n)
            })
            .collect()
    }
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| TrainError::Csv(e.into_error().into()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Runs every `(label, spec)` cell once per seed. Run ids follow cell-major
/// order and results come back in that order whatever `parallel` is.
pub fn run_cells(cells: &[(f64, MlpSpec)], cfg: &TrainConfig, data: &Splits, seeds: &[u64], parallel: usize) -> Result<SweepResult> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(TrainError::Config("a sweep needs at least one axis value and one seed".into()));
    }
    let jobs: Vec<(usize, f64, &MlpSpec, u64)> =
        cells.iter().flat_map(|(v, s)| seeds.iter().map(move |&seed| (*v, s, seed))).enumerate().map(|(i, (v, s, seed))| (i, v, s, seed)).collect();
    let run = |&(run_id, axis_value, spec, seed): &(usize, f64, &MlpSpec, u64)| -> Result<SweepRun> {
        let cfg = TrainConfig { seed, ..cfg.clone() };
        Ok(SweepRun { run_id, axis_value, seed, metrics: run_experiment(spec, &cfg, data)? })
    };
    let runs: Result<Vec<SweepRun>> = if parallel <= 1 {
        jobs.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(parallel)
            .build()
            .map_err(|e| TrainError::Config(format!("cannot start {parallel} worker threads: {e}")))?;
        pool.install(|| jobs.par_iter().map(run).collect())
    };
    Ok(SweepResult { runs: runs? })
}

/// Sweeps `axis` over `base`, each value crossed with every seed.
pub fn sweep(base: &MlpSpec, cfg: &TrainConfig, data: &Splits, axis: &SweepAxis, seeds: &[u64], parallel: usize) -> Result<SweepResult> {
    let cells = axis.values.iter().map(|&v| Ok((v, apply_axis(base, axis.kind, v)?))).collect::<Result<Vec<_>>>()?;
    run_cells(&cells, cfg, data, seeds, parallel)
}

/// Plain-text table of a summary, for reports.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut out = String::from("axis_value  mean_val_acc  std_val_acc  mean_test_acc  std_test_acc\n");
    for r in rows {
        let _ = writeln!(out, "{:>10}  {:>12.4}  {:>11.4}  {:>13.4}  {:>12.4}", r.axis_value, r.mean_val_acc, r.std_val_acc, r.mean_test_acc, r.std_test_acc);
    }
    out
}
