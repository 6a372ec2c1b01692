//! Single training runs.

use ghostnoise_core::analytics::NoiseTrace;
use ghostnoise_core::{Error as CoreError, RngStream};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Splits};
use crate::error::{Result, TrainError};
use crate::mlp::{accuracy, softmax_cross_entropy, Mlp, MlpSpec, Mode, NoiseSource};
use crate::optim::{cosine_lr, sgd_step};

const EVAL_CHUNK: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Fraction of the validation split evaluated after each epoch.
    pub eval_fraction: f64,
    /// Epochs (1-based) whose ghost noise is traced.
    pub trace_epochs: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 20,
            warmup_epochs: 1,
            batch_size: 128,
            seed: 0,
            eval_fraction: 1.0,
            trace_epochs: vec![],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, spec: &MlpSpec) -> Result<()> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.batch_size == 0 || (spec.needs_batch_stats() && self.batch_size < 2) {
            return bad(format!("batch_size {} too small for this model", self.batch_size));
        }
        let m = spec.batch_multiple();
        if self.batch_size % m != 0 {
            return bad(format!("batch_size {} is not a multiple of the ghost sizes' lcm {m}", self.batch_size));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if !(self.eval_fraction > 0.0 && self.eval_fraction <= 1.0) {
            return bad(format!("eval_fraction must lie in (0, 1], got {}", self.eval_fraction));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Learning rate of the epoch's last step; 0 before training.
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone)]
pub struct Metrics {
    /// Epoch 0 is the evaluation of the untrained model.
    pub epochs: Vec<EpochRecord>,
    pub test_acc: f64,
    pub diverged: bool,
    pub traces: Vec<NoiseTrace>,
}

impl Metrics {
    pub fn final_val_acc(&self) -> f64 {
        self.epochs.last().map_or(f64::NAN, |r| r.val_acc)
    }
}

/// Eval-mode loss and accuracy over a whole dataset.
pub fn evaluate(model: &Mlp, data: &Dataset) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Ok((f64::NAN, 0.0));
    }
    let logits = model.predict(&data.as_tensor()?, EVAL_CHUNK)?;
    let (loss, _) = softmax_cross_entropy(&logits, &data.labels, model.classes())?;
    Ok((loss, accuracy(&logits, &data.labels, model.classes())))
}

fn is_divergence(e: &TrainError) -> bool {
    matches!(e, TrainError::Core(CoreError::NonFinite(_)))
}

/// Like [`evaluate`], but a model whose activations overflow scores (NaN, 0).
fn evaluate_lenient(model: &Mlp, data: &Dataset) -> Result<(f64, f64)> {
    match evaluate(model, data) {
        Err(e) if is_divergence(&e) => Ok((f64::NAN, 0.0)),
        r => r,
    }
}

/// Trains `spec` on `data.train` with shuffled mini-batches (trailing partial
/// batch dropped), evaluating on the validation split after every epoch and on
/// the test split at the end. A non-finite loss or activation stops the run and
/// marks it diverged.
pub fn run_experiment(spec: &MlpSpec, cfg: &TrainConfig, data: &Splits) -> Result<Metrics> {
    cfg.validate(spec)?;
    if data.train.dim != spec.input_dim {
        return Err(TrainError::Config(format!("dataset has {} features, model expects {}", data.train.dim, spec.input_dim)));
    }
    let steps_per_epoch = data.train.len() / cfg.batch_size;
    if cfg.epochs > 0 && steps_per_epoch == 0 {
        return Err(TrainError::Config(format!("{} training samples cannot fill a batch of {}", data.train.len(), cfg.batch_size)));
    }
    let root = RngStream::new(cfg.seed, 0);
    let mut model = Mlp::new(spec.clone(), &mut root.derive(1))?;
    let mut shuffle = root.derive(2);
    let mut noise = root.derive(3);
    let val = data.val.head((cfg.eval_fraction * data.val.len() as f64).ceil() as usize);

    let mut velocity: Vec<Vec<f64>> = model.params_mut().iter().map(|p| vec![0.0; p.values.len()]).collect();
    let total = cfg.epochs * steps_per_epoch;
    let warmup = cfg.warmup_epochs * steps_per_epoch;

    let (loss0, acc0) = evaluate(&model, &data.train)?;
    let mut epochs = vec![EpochRecord { epoch: 0, lr: 0.0, train_loss: loss0, train_acc: acc0, val_acc: evaluate(&model, &val)?.1 }];
    let mut traces: Vec<NoiseTrace> = Vec::new();
    let mut diverged = false;

    for epoch in 1..=cfg.epochs {
        let traced = cfg.trace_epochs.contains(&epoch);
        let first_trace = traces.len();
        let perm = shuffle.permutation(data.train.len());
        let (mut loss_sum, mut hits, mut seen, mut lr) = (0.0, 0.0, 0usize, 0.0);
        for s in 0..steps_per_epoch {
            let step = (epoch - 1) * steps_per_epoch + s;
            lr = cosine_lr(step, total, warmup, cfg.lr);
            let (x, labels) = data.train.batch(&perm[s * cfg.batch_size..(s + 1) * cfg.batch_size])?;
            let cache = match model.forward(&x, Mode::Train, NoiseSource::Sample(&mut noise)) {
                Ok(c) => c,
                Err(e) if is_divergence(&e) => {
                    diverged = true;
                    loss_sum = f64::NAN;
                    break;
                }
                Err(e) => return Err(e),
            };
            let (loss, grads) = model.backward(&cache, &labels)?;
            loss_sum += loss * labels.len() as f64;
            seen += labels.len();
            if !loss.is_finite() {
                diverged = true;
                break;
            }
            hits += accuracy(&cache.logits, &labels, model.classes()) * labels.len() as f64;
            if traced {
                for (l, d) in cache.draws() {
                    let name = format!("hidden{l}");
                    let t = match traces[first_trace..].iter().position(|t| t.layer == name) {
                        Some(i) => &mut traces[first_trace + i],
                        None => {
                            traces.push(NoiseTrace::new(name, epoch as u64));
                            traces.last_mut().expect("just pushed")
                        }
                    };
                    t.record(d);
                }
            }
            model.update_running(&cache)?;
            let flat = grads.flat();
            for ((p, g), v) in model.params_mut().into_iter().zip(flat).zip(velocity.iter_mut()) {
                let decay = if p.decay { cfg.weight_decay } else { 0.0 };
                sgd_step(p.values, g, v, lr, cfg.momentum, decay);
            }
        }
        let train_loss = if seen == 0 { f64::NAN } else { loss_sum / seen as f64 };
        let train_acc = if seen == 0 { 0.0 } else { hits / seen as f64 };
        epochs.push(EpochRecord { epoch, lr, train_loss, train_acc, val_acc: evaluate_lenient(&model, &val)?.1 });
        if diverged {
            break;
        }
    }
    let test_acc = evaluate_lenient(&model, &data.test)?.1;
    Ok(Metrics { epochs, test_acc, diverged, traces })
}
