//! Fully connected network with per-layer normalization and noise injection,
//! trained with hand-written reverse mode.
//!
//! A hidden layer computes
//!
//! ```text
//! z = W x + b  ->  norm(z)  ->  injector  ->  gain * . + bias  ->  relu
//! ```
//!
//! EAGN may instead sit after the gain and bias. Injector draws are constants
//! to the backward pass.

use ghostnoise_core::noise::{AffineNoise, Injector, NoiseDraw};
use ghostnoise_core::normalization::{self, update_running, RunningStats};
use ghostnoise_core::tensor::ChannelStats;
use ghostnoise_core::{RngStream, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};
use crate::linalg;

pub const DEFAULT_HIDDEN: [usize; 2] = [512, 300];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum NormKind {
    #[default]
    BatchNorm,
    GhostBatchNorm {
        ghost_size: usize,
    },
    ExclusiveBatchNorm {
        ghost_size: usize,
    },
    LayerNorm,
    None,
}

impl NormKind {
    /// Whether training depends on other samples in the batch (and inference on running statistics).
    pub fn uses_batch_stats(&self) -> bool {
        matches!(self, Self::BatchNorm | Self::GhostBatchNorm { .. } | Self::ExclusiveBatchNorm { .. })
    }

    pub fn ghost_size(&self) -> Option<usize> {
        match *self {
            Self::GhostBatchNorm { ghost_size } | Self::ExclusiveBatchNorm { ghost_size } => Some(ghost_size),
            _ => None,
        }
    }
}

/// Where EAGN is applied relative to the learned gain and bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EagnPlacement {
    #[default]
    PreAffine,
    PostAffine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub norms: Vec<NormKind>,
    pub injectors: Vec<Injector>,
    pub eagn_placement: EagnPlacement,
    pub norm_eps: f64,
    pub ema_decay: f64,
}

impl MlpSpec {
    /// Batch-normalized network without injectors.
    pub fn new(input_dim: usize, hidden: &[usize], classes: usize) -> Self {
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            classes,
            norms: vec![NormKind::BatchNorm; hidden.len()],
            injectors: vec![Injector::None; hidden.len()],
            eagn_placement: EagnPlacement::PreAffine,
            norm_eps: 1e-5,
            ema_decay: 0.9,
        }
    }

    pub fn with_norm(mut self, norm: NormKind) -> Self {
        self.norms = vec![norm; self.hidden.len()];
        self
    }

    pub fn with_injector(mut self, injector: Injector) -> Self {
        self.injectors = vec![injector; self.hidden.len()];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::Spec(m));
        if self.input_dim == 0 {
            return bad("input dimension must be positive".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if let Some(w) = self.hidden.iter().position(|&w| w == 0) {
            return bad(format!("hidden layer {w} has width 0"));
        }
        if self.norms.len() != self.hidden.len() || self.injectors.len() != self.hidden.len() {
            return bad(format!(
                "{} hidden layers but {} norms and {} injectors",
                self.hidden.len(),
                self.norms.len(),
                self.injectors.len()
            ));
        }
        for (l, norm) in self.norms.iter().enumerate() {
            match *norm {
                NormKind::GhostBatchNorm { ghost_size: 0 } => return bad(format!("layer {l}: ghost size must be positive")),
                NormKind::ExclusiveBatchNorm { ghost_size } if ghost_size < 2 => {
                    return bad(format!("layer {l}: exclusive normalization needs ghost size >= 2"))
                }
                _ => {}
            }
        }
        for inj in &self.injectors {
            inj.validate()?;
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return bad(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema_decay must lie in (0, 1), got {}", self.ema_decay));
        }
        Ok(())
    }

    pub fn needs_batch_stats(&self) -> bool {
        self.norms.iter().any(NormKind::uses_batch_stats)
    }

    /// Least common multiple of the ghost sizes of ghost and exclusive layers;
    /// training batches must be a multiple of it.
    pub fn batch_multiple(&self) -> usize {
        self.norms.iter().filter_map(NormKind::ghost_size).fold(1, lcm)
    }

    fn post_affine(&self, l: usize) -> bool {
        self.eagn_placement == EagnPlacement::PostAffine && matches!(self.injectors[l], Injector::Eagn { .. })
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

/// `y = x W^T + b` with `W` stored (outputs, inputs) row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Weights `Normal(0, gain / inputs)`, zero bias.
    pub fn init(inputs: usize, outputs: usize, gain: f64, rng: &mut RngStream) -> Self {
        let std = (gain / inputs as f64).sqrt();
        let weight = (0..inputs * outputs).map(|_| rng.normal() * std).collect();
        Self { inputs, outputs, weight, bias: vec![0.0; outputs] }
    }

    fn forward(&self, x: &[f64], batch: usize) -> Vec<f64> {
        let mut y: Vec<f64> = (0..batch).flat_map(|_| self.bias.iter().copied()).collect();
        linalg::gemm_nt(batch, self.inputs, self.outputs, x, &self.weight, &mut y, 1.0);
        y
    }

    /// Returns `(dW, db, dx)`.
    fn backward(&self, x: &[f64], dy: &[f64], batch: usize, need_dx: bool) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut dw = vec![0.0; self.weight.len()];
        linalg::gemm_tn(self.outputs, batch, self.inputs, dy, x, &mut dw);
        let mut db = vec![0.0; self.outputs];
        for row in dy.chunks_exact(self.outputs) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        let mut dx = Vec::new();
        if need_dx {
            dx = vec![0.0; batch * self.inputs];
            linalg::gemm_nn(batch, self.outputs, self.inputs, dy, &self.weight, &mut dx);
        }
        (dw, db, dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub linear: Linear,
    pub norm: NormKind,
    pub injector: Injector,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
    /// Used at inference by batch-statistic norms. Starts at mean 0, variance 1;
    /// the first training step overwrites it.
    pub running: RunningStats<f64>,
}

impl HiddenLayer {
    pub fn width(&self) -> usize {
        self.linear.outputs
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Where training-mode injectors get their noise.
pub enum NoiseSource<'a> {
    Sample(&'a mut RngStream),
    /// Reuse the per-layer noise of an earlier pass, e.g. [`ForwardCache::noise`].
    Replay(&'a [AffineNoise<f64>]),
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<f64>,
    z: Vec<f64>,
    xhat: Vec<f64>,
    noise: AffineNoise<f64>,
    draw: Option<NoiseDraw<f64>>,
    affine_in: Vec<f64>,
    pre_relu: Vec<f64>,
    batch_stats: Option<ChannelStats<f64>>,
}

/// Intermediates of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub batch: usize,
    pub mode: Mode,
    layers: Vec<LayerCache>,
    head_input: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ForwardCache {
    /// The elementwise affine noise each hidden layer applied, identity where none was.
    pub fn noise(&self) -> Vec<AffineNoise<f64>> {
        self.layers.iter().map(|l| l.noise.clone()).collect()
    }

    /// Ghost-noise draws per hidden layer, for layers with GNI or AGNI.
    pub fn draws(&self) -> impl Iterator<Item = (usize, &NoiseDraw<f64>)> {
        self.layers.iter().enumerate().filter_map(|(l, c)| c.draw.as_ref().map(|d| (l, d)))
    }

    /// ReLU activation pattern, used to detect kinks in finite differences.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.layers.iter().flat_map(|l| l.pre_relu.iter().map(|&v| v > 0.0)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Vec<f64>,
    pub linear_bias: Vec<f64>,
    pub gain: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub hidden: Vec<LayerGrads>,
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
    /// Gradient with respect to the network input.
    pub input: Vec<f64>,
}

impl Gradients {
    /// Same order as [`Mlp::params_mut`].
    pub fn flat(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(4 * self.hidden.len() + 2);
        for g in &self.hidden {
            out.extend([&g.weight[..], &g.linear_bias, &g.gain, &g.bias]);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }
}

/// One parameter tensor and whether weight decay applies to it.
pub struct ParamMut<'a> {
    pub name: String,
    pub values: &'a mut [f64],
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    pub hidden: Vec<HiddenLayer>,
    pub head: Linear,
}

impl Mlp {
    /// He-initialized hidden layers, unit gains, zero biases.
    pub fn new(spec: MlpSpec, rng: &mut RngStream) -> Result<Self> {
        spec.validate()?;
        let mut inputs = spec.input_dim;
        let mut hidden = Vec::with_capacity(spec.hidden.len());
        for (l, &w) in spec.hidden.iter().enumerate() {
            hidden.push(HiddenLayer {
                linear: Linear::init(inputs, w, 2.0, rng),
                norm: spec.norms[l],
                injector: spec.injectors[l],
                gain: vec![1.0; w],
                bias: vec![0.0; w],
                running: RunningStats::new(w),
            });
            inputs = w;
        }
        let head = Linear::init(inputs, spec.classes, 1.0, rng);
        Ok(Self { spec, hidden, head })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = Vec::with_capacity(4 * self.hidden.len() + 2);
        for (l, h) in self.hidden.iter_mut().enumerate() {
            out.push(ParamMut { name: format!("hidden{l}.weight"), values: &mut h.linear.weight, decay: true });
            out.push(ParamMut { name: format!("hidden{l}.linear_bias"), values: &mut h.linear.bias, decay: false });
            out.push(ParamMut { name: format!("hidden{l}.gain"), values: &mut h.gain, decay: false });
            out.push(ParamMut { name: format!("hidden{l}.bias"), values: &mut h.bias, decay: false });
        }
        out.push(ParamMut { name: "head.weight".into(), values: &mut self.head.weight, decay: true });
        out.push(ParamMut { name: "head.bias".into(), values: &mut self.head.bias, decay: false });
        out
    }

    pub fn param_count(&self) -> usize {
        self.hidden.iter().map(|h| h.linear.weight.len() + h.linear.bias.len() + 2 * h.width()).sum::<usize>()
            + self.head.weight.len()
            + self.head.bias.len()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.channels != self.spec.input_dim || s.spatial() != 1 {
            return Err(TrainError::InputShape { expected: self.spec.input_dim, got: s.dims() });
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor, mode: Mode, mut noise: NoiseSource<'_>) -> Result<ForwardCache> {
        self.check_input(x)?;
        let batch = x.batch();
        if let NoiseSource::Replay(r) = noise {
            if mode == Mode::Train && r.len() != self.hidden.len() {
                return Err(TrainError::ReplayLength { expected: self.hidden.len(), got: r.len() });
            }
        }
        let eps = self.spec.norm_eps;
        let mut h = x.data().to_vec();
        let mut layers = Vec::with_capacity(self.hidden.len());
        for (l, layer) in self.hidden.iter().enumerate() {
            let w = layer.width();
            let z = layer.linear.forward(&h, batch);
            let zt = Tensor::new([batch, w, 1, 1], z.clone())?;
            let (xhat, batch_stats) = match (mode, layer.norm) {
                (_, NormKind::None) => (z.clone(), None),
                (_, NormKind::LayerNorm) => (normalization::layer_norm(&zt, eps)?.into_data(), None),
                (Mode::Eval, _) => (normalize_with(&z, w, &layer.running.mean, &layer.running.var, eps), None),
                (Mode::Train, NormKind::BatchNorm) => {
                    let (y, stats) = normalization::batch_norm_train(&zt, eps)?;
                    (y.into_data(), Some(stats))
                }
                (Mode::Train, NormKind::GhostBatchNorm { ghost_size }) => {
                    (normalization::ghost_batch_norm(&zt, ghost_size, eps)?.into_data(), Some(zt.channel_stats()))
                }
                (Mode::Train, NormKind::ExclusiveBatchNorm { ghost_size }) => {
                    (normalization::exclusive_batch_norm(&zt, ghost_size, eps)?.into_data(), Some(zt.channel_stats()))
                }
            };
            let post = self.spec.post_affine(l);
            let affine = |v: &[f64]| -> Vec<f64> {
                v.chunks_exact(w).flat_map(|row| row.iter().zip(&layer.gain).zip(&layer.bias).map(|((&v, &g), &b)| g * v + b)).collect()
            };
            let inject = |v: Vec<f64>, noise: &mut NoiseSource<'_>| -> Result<(Vec<f64>, AffineNoise<f64>, Option<NoiseDraw<f64>>)> {
                if mode == Mode::Eval || layer.injector.is_none() {
                    return Ok((v, AffineNoise::identity(batch * w), None));
                }
                let t = Tensor::new([batch, w, 1, 1], v)?;
                match noise {
                    NoiseSource::Sample(rng) => {
                        let inj = layer.injector.inject(&t, true, rng)?;
                        Ok((inj.output.into_data(), inj.noise, inj.draw))
                    }
                    NoiseSource::Replay(r) => {
                        let n = r[l].clone();
                        Ok((n.apply(&t)?.into_data(), n, None))
                    }
                }
            };
            let (affine_in, pre_relu, layer_noise, draw) = if post {
                let a = affine(&xhat);
                let (out, n, d) = inject(a.clone(), &mut noise)?;
                (xhat.clone(), out, n, d)
            } else {
                let (u, n, d) = inject(xhat.clone(), &mut noise)?;
                let a = affine(&u);
                (u, a, n, d)
            };
            let out: Vec<f64> = pre_relu.iter().map(|&v| v.max(0.0)).collect();
            layers.push(LayerCache { input: std::mem::replace(&mut h, out), z, xhat, noise: layer_noise, draw, affine_in, pre_relu, batch_stats });
        }
        let logits = self.head.forward(&h, batch);
        Ok(ForwardCache { batch, mode, layers, head_input: h, logits })
    }

    /// Inference logits, evaluated in chunks of `chunk` samples.
    pub fn predict(&self, x: &Tensor, chunk: usize) -> Result<Vec<f64>> {
        self.check_input(x)?;
        let d = self.spec.input_dim;
        let mut logits = Vec::with_capacity(x.batch() * self.spec.classes);
        for rows in x.data().chunks(chunk.max(1) * d) {
            let t = Tensor::new([rows.len() / d, d, 1, 1], rows.to_vec())?;
            // eval mode never reads the noise source
            let mut unused = RngStream::new(0, 0);
            logits.extend(self.forward(&t, Mode::Eval, NoiseSource::Sample(&mut unused))?.logits);
        }
        Ok(logits)
    }

    /// Softmax cross-entropy loss of a forward pass and its exact gradients.
    pub fn backward(&self, cache: &ForwardCache, labels: &[usize]) -> Result<(f64, Gradients)> {
        let batch = cache.batch;
        let (loss, dlogits) = softmax_cross_entropy(&cache.logits, labels, self.spec.classes)?;
        let (head_weight, head_bias, mut dh) = self.head.backward(&cache.head_input, &dlogits, batch, true);
        let eps = self.spec.norm_eps;
        let mut hidden = Vec::with_capacity(self.hidden.len());
        for (l, layer) in self.hidden.iter().enumerate().rev() {
            let c = &cache.layers[l];
            let w = layer.width();
            let da: Vec<f64> = dh.iter().zip(&c.pre_relu).map(|(&g, &a)| if a > 0.0 { g } else { 0.0 }).collect();
            let post = self.spec.post_affine(l);
            // gradient at the affine output
            let d_aff: Vec<f64> = if post { da.iter().zip(&c.noise.gain).map(|(&g, &k)| g * k).collect() } else { da };
            let mut gain = vec![0.0; w];
            let mut bias = vec![0.0; w];
            let mut d_in = vec![0.0; batch * w];
            for ((g_row, x_row), d_row) in d_aff.chunks_exact(w).zip(c.affine_in.chunks_exact(w)).zip(d_in.chunks_exact_mut(w)) {
                for j in 0..w {
                    gain[j] += g_row[j] * x_row[j];
                    bias[j] += g_row[j];
                    d_row[j] = g_row[j] * layer.gain[j];
                }
            }
            let dxhat: Vec<f64> = if post { d_in } else { d_in.iter().zip(&c.noise.gain).map(|(&g, &k)| g * k).collect() };
            let dz = match (cache.mode, layer.norm) {
                (_, NormKind::None) => dxhat,
                (_, NormKind::LayerNorm) => layer_norm_backward(&c.xhat, &c.z, &dxhat, w, eps),
                (Mode::Eval, _) => {
                    let inv: Vec<f64> = layer.running.var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
                    dxhat.chunks_exact(w).flat_map(|r| r.iter().zip(&inv).map(|(&g, &k)| g * k)).collect()
                }
                (Mode::Train, NormKind::BatchNorm) => batch_norm_backward(&c.xhat, &c.z, &dxhat, w, batch, eps),
                (Mode::Train, NormKind::GhostBatchNorm { ghost_size }) => batch_norm_backward(&c.xhat, &c.z, &dxhat, w, ghost_size, eps),
                (Mode::Train, NormKind::ExclusiveBatchNorm { ghost_size }) => exclusive_norm_backward(&c.z, &dxhat, w, ghost_size, eps),
            };
            let (weight, linear_bias, dx) = layer.linear.backward(&c.input, &dz, batch, true);
            dh = dx;
            hidden.push(LayerGrads { weight, linear_bias, gain, bias });
        }
        hidden.reverse();
        Ok((loss, Gradients { hidden, head_weight, head_bias, input: dh }))
    }

    /// Folds the full-batch statistics of a training pass into each batch-statistic
    /// layer's running averages.
    pub fn update_running(&mut self, cache: &ForwardCache) -> Result<()> {
        let decay = self.spec.ema_decay;
        for (layer, c) in self.hidden.iter_mut().zip(&cache.layers) {
            if let Some(stats) = &c.batch_stats {
                layer.running = update_running(&layer.running, stats, decay)?;
            }
        }
        Ok(())
    }
}

fn normalize_with(z: &[f64], w: usize, mean: &[f64], var: &[f64], eps: f64) -> Vec<f64> {
    let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    z.chunks_exact(w).flat_map(|row| row.iter().zip(mean).zip(&inv).map(|((&v, &m), &k)| (v - m) * k)).collect()
}

/// Mean cross-entropy over the batch and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> Result<(f64, Vec<f64>)> {
    let batch = logits.len() / classes;
    if labels.len() != batch {
        return Err(TrainError::LabelCount { batch, labels: labels.len() });
    }
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let scale = 1.0 / batch as f64;
    for ((row, g), &y) in logits.chunks_exact(classes).zip(grad.chunks_exact_mut(classes)).zip(labels) {
        if y >= classes {
            return Err(TrainError::LabelRange { label: y, classes });
        }
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + sum.ln();
        loss += lse - row[y];
        for (gi, &v) in g.iter_mut().zip(row) {
            *gi = (v - lse).exp() * scale;
        }
        g[y] -= scale;
    }
    Ok((loss * scale, grad))
}

/// Row-wise argmax; NaN entries never win.
pub fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] || row[best].is_nan() {
                    best = k;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(logits, classes).iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// `dz = (g - mean(g) - xhat * mean(g * xhat)) / sqrt(var + eps)` per channel,
/// with means over each contiguous group of `group` samples.
fn batch_norm_backward(xhat: &[f64], z: &[f64], g: &[f64], w: usize, group: usize, eps: f64) -> Vec<f64> {
    let mut dz = vec![0.0; g.len()];
    let n = group as f64;
    for start in (0..g.len() / w).step_by(group) {
        let rows = start * w..(start + group) * w;
        let (xs, zs, gs) = (&xhat[rows.clone()], &z[rows.clone()], &g[rows.clone()]);
        for c in 0..w {
            let col = |v: &[f64], i: usize| v[i * w + c];
            let mean = (0..group).map(|i| col(zs, i)).sum::<f64>() / n;
            let var = (0..group).map(|i| (col(zs, i) - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            let mg = (0..group).map(|i| col(gs, i)).sum::<f64>() / n;
            let mgx = (0..group).map(|i| col(gs, i) * col(xs, i)).sum::<f64>() / n;
            for i in 0..group {
                dz[rows.start + i * w + c] = inv * (col(gs, i) - mg - col(xs, i) * mgx);
            }
        }
    }
    dz
}

fn layer_norm_backward(xhat: &[f64], z: &[f64], g: &[f64], w: usize, eps: f64) -> Vec<f64> {
    let n = w as f64;
    let mut dz = Vec::with_capacity(g.len());
    for ((xs, zs), gs) in xhat.chunks_exact(w).zip(z.chunks_exact(w)).zip(g.chunks_exact(w)) {
        let mean = zs.iter().sum::<f64>() / n;
        let var = zs.iter().map(|&v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        let mg = gs.iter().sum::<f64>() / n;
        let mgx = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<f64>() / n;
        dz.extend(gs.iter().zip(xs).map(|(&gi, &xi)| inv * (gi - mg - xi * mgx)));
    }
    dz
}

/// Backward of leave-one-out normalization. Sample `k`'s output depends on
/// every other sample of its ghost batch through `mu_k` and `sigma_k`:
///
/// ```text
/// d y_k / d x_k = 1 / sigma_k
/// d y_k / d x_j = -1 / (M sigma_k) - y_k (x_j - mu_k) / (M sigma_k^2),  j != k,  M = N - 1
/// ```
///
/// Summing over `k` with values centered on the ghost mean gives every
/// `d / d x_j` from three ghost-wide totals, O(N) per ghost batch.
fn exclusive_norm_backward(z: &[f64], g: &[f64], w: usize, group: usize, eps: f64) -> Vec<f64> {
    let mut dz = vec![0.0; g.len()];
    let m = (group - 1) as f64;
    let zeros = vec![0.0; group];
    let (mut d, mut mu, mut sigma) = (vec![0.0; group], vec![0.0; group], vec![0.0; group]);
    let (mut a, mut b) = (vec![0.0; group], vec![0.0; group]);
    for start in (0..g.len() / w).step_by(group) {
        for c in 0..w {
            let at = |i: usize| (start + i) * w + c;
            let ghost_mean = (0..group).map(|i| z[at(i)]).sum::<f64>() / group as f64;
            for i in 0..group {
                d[i] = z[at(i)] - ghost_mean;
            }
            let (mut sum_a, mut sum_b, mut sum_c) = (0.0, 0.0, 0.0);
            for (k, (mean, var)) in normalization::leave_one_out(&d, &zeros, 1).into_iter().enumerate() {
                mu[k] = mean;
                sigma[k] = (var + eps).sqrt();
                let y = (d[k] - mu[k]) / sigma[k];
                a[k] = g[at(k)] / (m * sigma[k]);
                b[k] = g[at(k)] * y / (m * sigma[k] * sigma[k]);
                sum_a += a[k];
                sum_b += b[k];
                sum_c += b[k] * mu[k];
            }
            for j in 0..group {
                dz[at(j)] = g[at(j)] / sigma[j] - (sum_a - a[j]) - d[j] * (sum_b - b[j]) + (sum_c - b[j] * mu[j]);
            }
        }
    }
    dz
}
