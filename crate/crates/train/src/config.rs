//! The JSON experiment document: model, optimizer, dataset and optional sweep.
//! Unknown keys are rejected at every level so that a misspelled field cannot
//! silently fall back to its default.

use std::path::{Path, PathBuf};

use ghostnoise_core::{Injector, RngStream};
use serde::{Deserialize, Serialize};

use crate::data::{load_idx, make_blobs, split, BlobsConfig, Splits};
use crate::error::{Result, TrainError};
use crate::experiment::TrainConfig;
use crate::mlp::{EagnPlacement, MlpSpec, NormKind, DEFAULT_HIDDEN};
use crate::sweep::SweepAxis;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Blobs {
        #[serde(flatten)]
        blobs: BlobsConfig,
        #[serde(default)]
        seed: u64,
    },
    Idx {
        images: PathBuf,
        labels: PathBuf,
        /// Keep only the first `limit` examples.
        #[serde(default)]
        limit: Option<usize>,
        #[serde(default)]
        seed: u64,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::Blobs { blobs: BlobsConfig::default(), seed: 0 }
    }
}

impl DatasetConfig {
    /// Builds or loads the data and splits it 80/10/10. Relative IDX paths
    /// resolve against `base_dir`.
    pub fn load(&self, base_dir: &Path) -> Result<Splits> {
        match self {
            Self::Blobs { blobs, seed } => {
                let rng = RngStream::new(*seed, 0);
                let data = make_blobs(blobs, &mut rng.derive(0))?;
                Ok(split(&data, &mut rng.derive(1)))
            }
            Self::Idx { images, labels, limit, seed } => {
                let mut data = load_idx(base_dir.join(images), base_dir.join(labels))?;
                if let Some(n) = limit {
                    data = data.head(*n);
                }
                Ok(split(&data, &mut RngStream::new(*seed, 1)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(flatten)]
    pub axis: SweepAxis,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub hidden: Vec<usize>,
    /// Applied to every hidden layer.
    pub norm: NormKind,
    /// Applied to every hidden layer.
    pub injector: Injector,
    pub eagn_placement: EagnPlacement,
    pub norm_eps: f64,
    pub ema_decay: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub eval_fraction: f64,
    pub trace_epochs: Vec<usize>,
    pub sweep: Option<SweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = MlpSpec::new(1, &DEFAULT_HIDDEN, 2);
        Self {
            dataset: DatasetConfig::default(),
            hidden: DEFAULT_HIDDEN.to_vec(),
            norm: NormKind::BatchNorm,
            injector: Injector::None,
            eagn_placement: EagnPlacement::PreAffine,
            norm_eps: s.norm_eps,
            ema_decay: s.ema_decay,
            lr: t.lr,
            momentum: t.momentum,
            weight_decay: t.weight_decay,
            epochs: t.epochs,
            warmup_epochs: t.warmup_epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            eval_fraction: t.eval_fraction,
            trace_epochs: t.trace_epochs,
            sweep: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text).map_err(|e| TrainError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config always serializes")
    }

    pub fn spec(&self, input_dim: usize, classes: usize) -> MlpSpec {
        MlpSpec {
            norm_eps: self.norm_eps,
            ema_decay: self.ema_decay,
            eagn_placement: self.eagn_placement,
            ..MlpSpec::new(input_dim, &self.hidden, classes).with_norm(self.norm).with_injector(self.injector)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            eval_fraction: self.eval_fraction,
            trace_epochs: self.trace_epochs.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), c);
    }

    #[test]
    fn misspelled_keys_are_rejected() {
        let top = ExperimentConfig::from_json(r#"{"ghost_sise": 4}"#).unwrap_err().to_string();
        assert!(top.contains("ghost_sise"), "{top}");
        let nested = ExperimentConfig::from_json(r#"{"injector": {"kind": "gni", "ghost_sise": 4}}"#).unwrap_err().to_string();
        assert!(nested.contains("ghost_sise"), "{nested}");
        let data = ExperimentConfig::from_json(r#"{"dataset": {"kind": "blobs", "n": 10, "dim": 2, "classes": 2, "separation": 1, "label_noise": 0, "sead": 1}}"#);
        assert!(data.is_err());
        let ok = ExperimentConfig::from_json(r#"{"dataset": {"kind": "blobs", "n": 10, "dim": 2, "classes": 2, "separation": 1, "label_noise": 0, "seed": 1}}"#);
        assert!(ok.is_ok(), "{ok:?}");
        let idx = ExperimentConfig::from_json(r#"{"dataset": {"kind": "idx", "images": "a", "labels": "b", "limit": 2000}}"#);
        assert!(idx.is_ok(), "{idx:?}");
    }

    #[test]
    fn parses_sweep_and_injector() {
        let c = ExperimentConfig::from_json(
            r#"{"injector": {"kind": "gni", "ghost_size": 16}, "sweep": {"kind": "ghost_size", "values": [16, 256], "seeds": [1, 2, 3]}}"#,
        )
        .unwrap();
        let s = c.sweep.unwrap();
        assert_eq!(s.axis.values, vec![16.0, 256.0]);
        assert_eq!(s.seeds, vec![1, 2, 3]);
        assert!(matches!(c.injector, Injector::Gni(g) if g.ghost_size == 16));
    }
}
