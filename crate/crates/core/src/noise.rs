//! Training-time noise injectors.
//!
//! Ghost noise injection resamples a ghost batch (with replacement) for every
//! output sample and applies `(x - (m - mu)) / sqrt((s^2 + eps) / (sigma^2 + eps))`,
//! where `m`, `s^2` are the ghost statistics and `mu`, `sigma^2` the batch
//! statistics. Drawn statistics are constants under differentiation: every
//! injector is an elementwise affine map `y = gain * x + offset` whose
//! coefficients are returned alongside the output for the backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{ChannelStats, Tensor4};

pub const DEFAULT_GNI_EPS: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    #[default]
    Full,
    ShiftOnly,
    ScaleOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Empirical,
    Analytical,
}

/// How many independent analytical draws are made per batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgniGranularity {
    /// One draw per channel shared by the whole batch.
    PerChannel,
    /// An independent draw for every (sample, channel).
    #[default]
    PerSampleChannel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutGranularity {
    #[default]
    Elementwise,
    /// One draw per (sample, channel), shared across spatial positions.
    Channelwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GhostNoiseConfig {
    pub ghost_size: usize,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default)]
    pub mode: NoiseMode,
    #[serde(default)]
    pub sampling: Sampling,
}

fn default_eps() -> f64 {
    DEFAULT_GNI_EPS
}

impl GhostNoiseConfig {
    pub fn new(ghost_size: usize) -> Self {
        Self { ghost_size, eps: DEFAULT_GNI_EPS, mode: NoiseMode::Full, sampling: Sampling::Empirical }
    }

    pub fn with_mode(self, mode: NoiseMode) -> Self {
        Self { mode, ..self }
    }

    pub fn with_sampling(self, sampling: Sampling) -> Self {
        Self { sampling, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ghost_size == 0 {
            return Err(Error::InvalidGhostSize { ghost: 0, reason: "must be at least 1" });
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return Err(Error::InvalidEps(self.eps));
        }
        Ok(())
    }
}

/// Statistics of one resampled ghost batch per output sample, B×C row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GhostStats<T> {
    pub batch: usize,
    pub channels: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub indices: Vec<Vec<usize>>,
}

/// For every output sample, draws `ghost_size` indices uniformly with
/// replacement and computes the biased channel statistics of that ghost batch.
pub fn draw_ghost_stats<T: Scalar>(x: &Tensor4<T>, ghost_size: usize, rng: &mut RngStream) -> Result<GhostStats<T>> {
    if ghost_size == 0 {
        return Err(Error::InvalidGhostSize { ghost: 0, reason: "must be at least 1" });
    }
    let (batch, channels) = (x.batch(), x.channels());
    let mut mean = Vec::with_capacity(batch * channels);
    let mut var = Vec::with_capacity(batch * channels);
    let mut indices = Vec::with_capacity(batch);
    for _ in 0..batch {
        let picks: Vec<usize> = (0..ghost_size).map(|_| rng.index(batch)).collect();
        let s = x.stats_over(picks.iter().copied());
        mean.extend(s.mean);
        var.extend(s.var);
        indices.push(picks);
    }
    Ok(GhostStats { batch, channels, mean, var, indices })
}

/// Per-(sample, channel) shift and scale noise, B×C row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw<T> {
    pub batch: usize,
    pub channels: usize,
    /// `m - mu`
    pub shift: Vec<T>,
    /// `sqrt((s^2 + eps) / (sigma^2 + eps))`, always positive.
    pub scale: Vec<T>,
    /// Ghost batch drawn for each sample; empty for analytical draws.
    pub ghost_indices: Vec<Vec<usize>>,
}

impl<T: Scalar> NoiseDraw<T> {
    pub fn identity(batch: usize, channels: usize) -> Self {
        Self { batch, channels, shift: vec![T::zero(); batch * channels], scale: vec![T::one(); batch * channels], ghost_indices: vec![] }
    }

    pub fn from_ghost_stats(batch_stats: &ChannelStats<T>, ghost: &GhostStats<T>, eps: f64, mode: NoiseMode) -> Self {
        let eps = T::of(eps);
        let c_count = ghost.channels;
        let mut shift = Vec::with_capacity(ghost.mean.len());
        let mut scale = Vec::with_capacity(ghost.mean.len());
        for (i, (&m, &s2)) in ghost.mean.iter().zip(&ghost.var).enumerate() {
            let c = i % c_count;
            shift.push(m - batch_stats.mean[c]);
            scale.push(((s2 + eps) / (batch_stats.var[c] + eps)).sqrt());
        }
        Self { batch: ghost.batch, channels: c_count, shift, scale, ghost_indices: ghost.indices.clone() }.with_mode(mode)
    }

    /// Drops the component `mode` excludes: shift-only forces unit scale,
    /// scale-only forces zero shift.
    pub fn with_mode(mut self, mode: NoiseMode) -> Self {
        match mode {
            NoiseMode::Full => {}
            NoiseMode::ShiftOnly => self.scale.iter_mut().for_each(|s| *s = T::one()),
            NoiseMode::ScaleOnly => self.shift.iter_mut().for_each(|s| *s = T::zero()),
        }
        self
    }

    #[inline]
    pub fn shift_at(&self, b: usize, c: usize) -> T {
        self.shift[b * self.channels + c]
    }

    #[inline]
    pub fn scale_at(&self, b: usize, c: usize) -> T {
        self.scale[b * self.channels + c]
    }

    /// `(x - shift) / scale`, broadcast over spatial positions.
    pub fn apply(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        self.check_shape(x)?;
        Ok(x.map_indexed(|v, b, c| (v - self.shift_at(b, c)) / self.scale_at(b, c)))
    }

    /// The draw as an elementwise affine map over `x`'s shape.
    pub fn to_affine(&self, x: &Tensor4<T>) -> Result<AffineNoise<T>> {
        self.check_shape(x)?;
        let s = x.shape().spatial();
        let mut gain = Vec::with_capacity(x.shape().len());
        let mut offset = Vec::with_capacity(x.shape().len());
        for (&sh, &sc) in self.shift.iter().zip(&self.scale) {
            let g = T::one() / sc;
            gain.extend(std::iter::repeat_n(g, s));
            offset.extend(std::iter::repeat_n(-sh * g, s));
        }
        Ok(AffineNoise { gain, offset })
    }

    fn check_shape(&self, x: &Tensor4<T>) -> Result<()> {
        if x.batch() != self.batch || x.channels() != self.channels {
            return Err(Error::ChannelMismatch { expected: self.batch * self.channels, got: x.batch() * x.channels() });
        }
        Ok(())
    }
}

/// Ghost noise injection. Returns the noisy tensor and the draw that produced it.
pub fn gni_with_draw<T: Scalar>(x: &Tensor4<T>, cfg: &GhostNoiseConfig, rng: &mut RngStream) -> Result<(Tensor4<T>, NoiseDraw<T>)> {
    cfg.validate()?;
    let draw = match cfg.sampling {
        Sampling::Empirical => {
            let ghost = draw_ghost_stats(x, cfg.ghost_size, rng)?;
            NoiseDraw::from_ghost_stats(&x.channel_stats(), &ghost, cfg.eps, cfg.mode)
        }
        Sampling::Analytical => {
            agni_draw(x.batch(), x.channels(), cfg.ghost_size, rng, AgniGranularity::PerSampleChannel).with_mode(cfg.mode)
        }
    };
    Ok((draw.apply(x)?, draw))
}

pub fn gni<T: Scalar>(x: &Tensor4<T>, cfg: &GhostNoiseConfig, rng: &mut RngStream) -> Result<Tensor4<T>> {
    gni_with_draw(x, cfg, rng).map(|(y, _)| y)
}

/// Analytical ghost noise: shift ~ Normal(0, 1/N) and squared scale ~ chi2(N)/N.
pub fn agni_draw<T: Scalar>(batch: usize, channels: usize, ghost_size: usize, rng: &mut RngStream, granularity: AgniGranularity) -> NoiseDraw<T> {
    let n = ghost_size as f64;
    let shift_sd = n.recip().sqrt();
    let mut draw_one = || {
        let mu = rng.normal() * shift_sd;
        let v = rng.chi_squared(n) / n;
        (T::of(mu), T::of(v.sqrt()))
    };
    let per_cell: Vec<(T, T)> = match granularity {
        AgniGranularity::PerSampleChannel => (0..batch * channels).map(|_| draw_one()).collect(),
        AgniGranularity::PerChannel => {
            let shared: Vec<(T, T)> = (0..channels).map(|_| draw_one()).collect();
            (0..batch).flat_map(|_| shared.iter().copied()).collect()
        }
    };
    let (shift, scale) = per_cell.into_iter().unzip();
    NoiseDraw { batch, channels, shift, scale, ghost_indices: vec![] }
}

/// Analytical ghost noise on (approximately) standardized input.
pub fn agni<T: Scalar>(xhat: &Tensor4<T>, ghost_size: usize, rng: &mut RngStream, granularity: AgniGranularity) -> Result<Tensor4<T>> {
    if ghost_size == 0 {
        return Err(Error::InvalidGhostSize { ghost: 0, reason: "must be at least 1" });
    }
    agni_draw(xhat.batch(), xhat.channels(), ghost_size, rng, granularity).apply(xhat)
}

/// Elementwise `y = gain * x + offset` with constant coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineNoise<T> {
    pub gain: Vec<T>,
    pub offset: Vec<T>,
}

impl<T: Scalar> AffineNoise<T> {
    pub fn identity(len: usize) -> Self {
        Self { gain: vec![T::one(); len], offset: vec![T::zero(); len] }
    }

    pub fn apply(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        if self.gain.len() != x.shape().len() {
            return Err(Error::LengthMismatch { shape: x.shape().dims(), len: self.gain.len(), expected: x.shape().len() });
        }
        let data = x.data().iter().zip(&self.gain).zip(&self.offset).map(|((&v, &g), &o)| g * v + o).collect();
        Ok(Tensor4::from_raw(x.shape(), data))
    }
}

fn check_p(p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidProbability(p))
    }
}

/// Draws one multiplier per unit at `granularity` and expands it over `x`'s shape.
fn multiplicative<T: Scalar>(x: &Tensor4<T>, granularity: DropoutGranularity, mut draw: impl FnMut() -> f64) -> Vec<T> {
    match granularity {
        DropoutGranularity::Elementwise => (0..x.shape().len()).map(|_| T::of(draw())).collect(),
        DropoutGranularity::Channelwise => {
            let s = x.shape().spatial();
            (0..x.batch() * x.channels()).flat_map(|_| std::iter::repeat_n(T::of(draw()), s)).collect()
        }
    }
}

pub fn gaussian_dropout_noise<T: Scalar>(x: &Tensor4<T>, p: f64, rng: &mut RngStream, granularity: DropoutGranularity) -> Result<AffineNoise<T>> {
    check_p(p)?;
    let sd = (p / (1.0 - p)).sqrt();
    let gain = if p == 0.0 { vec![T::one(); x.shape().len()] } else { multiplicative(x, granularity, || rng.gaussian(1.0, sd)) };
    Ok(AffineNoise { offset: vec![T::zero(); gain.len()], gain })
}

/// Multiplies by `t ~ Normal(1, p / (1 - p))`.
pub fn gaussian_dropout<T: Scalar>(x: &Tensor4<T>, p: f64, rng: &mut RngStream, granularity: DropoutGranularity) -> Result<Tensor4<T>> {
    gaussian_dropout_noise(x, p, rng, granularity)?.apply(x)
}

pub fn bernoulli_dropout_noise<T: Scalar>(x: &Tensor4<T>, p: f64, rng: &mut RngStream, granularity: DropoutGranularity) -> Result<AffineNoise<T>> {
    check_p(p)?;
    let keep = 1.0 / (1.0 - p);
    let gain = if p == 0.0 {
        vec![T::one(); x.shape().len()]
    } else {
        multiplicative(x, granularity, || if rng.bernoulli(p) { 0.0 } else { keep })
    };
    Ok(AffineNoise { offset: vec![T::zero(); gain.len()], gain })
}

/// Inverted dropout: zero each unit with probability `p`, scale survivors by `1 / (1 - p)`.
pub fn bernoulli_dropout<T: Scalar>(x: &Tensor4<T>, p: f64, rng: &mut RngStream, granularity: DropoutGranularity) -> Result<Tensor4<T>> {
    bernoulli_dropout_noise(x, p, rng, granularity)?.apply(x)
}

pub fn eagn_noise<T: Scalar>(x: &Tensor4<T>, sigma: f64, rng: &mut RngStream) -> Result<AffineNoise<T>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidSigma(sigma));
    }
    let len = x.shape().len();
    let offset = if sigma == 0.0 { vec![T::zero(); len] } else { (0..len).map(|_| T::of(rng.normal() * sigma)).collect() };
    Ok(AffineNoise { gain: vec![T::one(); len], offset })
}

/// Elementwise additive Gaussian noise `x + Normal(0, sigma^2)`.
pub fn eagn<T: Scalar>(x: &Tensor4<T>, sigma: f64, rng: &mut RngStream) -> Result<Tensor4<T>> {
    eagn_noise(x, sigma, rng)?.apply(x)
}

/// Any one of the injectors, as configured on a network layer.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Injector {
    #[default]
    None,
    Gni(GhostNoiseConfig),
    Agni {
        ghost_size: usize,
        #[serde(default)]
        granularity: AgniGranularity,
        #[serde(default)]
        mode: NoiseMode,
    },
    GaussianDropout {
        p: f64,
        #[serde(default)]
        granularity: DropoutGranularity,
    },
    BernoulliDropout {
        p: f64,
        #[serde(default)]
        granularity: DropoutGranularity,
    },
    Eagn {
        sigma: f64,
    },
}

/// Output of one injector application.
#[derive(Debug, Clone, PartialEq)]
pub struct Injection<T> {
    pub output: Tensor4<T>,
    pub noise: AffineNoise<T>,
    /// Shift/scale draw for ghost-noise injectors.
    pub draw: Option<NoiseDraw<T>>,
}

impl Injector {
    pub fn is_none(&self) -> bool {
        matches!(self, Self::None)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::None => Ok(()),
            Self::Gni(cfg) => cfg.validate(),
            Self::Agni { ghost_size, .. } if ghost_size == 0 => Err(Error::InvalidGhostSize { ghost: 0, reason: "must be at least 1" }),
            Self::Agni { .. } => Ok(()),
            Self::GaussianDropout { p, .. } | Self::BernoulliDropout { p, .. } => check_p(p),
            Self::Eagn { sigma } if !(sigma >= 0.0 && sigma.is_finite()) => Err(Error::InvalidSigma(sigma)),
            Self::Eagn { .. } => Ok(()),
        }
    }

    /// Applies the injector. Outside training every injector is the identity and
    /// consumes no randomness.
    pub fn inject<T: Scalar>(&self, x: &Tensor4<T>, training: bool, rng: &mut RngStream) -> Result<Injection<T>> {
        self.validate()?;
        let len = x.shape().len();
        if !training || self.is_none() {
            return Ok(Injection { output: x.clone(), noise: AffineNoise::identity(len), draw: None });
        }
        let (noise, draw) = match *self {
            Self::None => unreachable!(),
            Self::Gni(cfg) => {
                let (_, d) = gni_with_draw(x, &cfg, rng)?;
                (d.to_affine(x)?, Some(d))
            }
            Self::Agni { ghost_size, granularity, mode } => {
                let d = agni_draw(x.batch(), x.channels(), ghost_size, rng, granularity).with_mode(mode);
                (d.to_affine(x)?, Some(d))
            }
            Self::GaussianDropout { p, granularity } => (gaussian_dropout_noise(x, p, rng, granularity)?, None),
            Self::BernoulliDropout { p, granularity } => (bernoulli_dropout_noise(x, p, rng, granularity)?, None),
            Self::Eagn { sigma } => (eagn_noise(x, sigma, rng)?, None),
        };
        let output = match &draw {
            // keep the reference arithmetic (x - shift) / scale for ghost noise
            Some(d) => d.apply(x)?,
            None => noise.apply(x)?,
        };
        Ok(Injection { output, noise, draw })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn normal_tensor(shape: [usize; 4], rng: &mut RngStream) -> Tensor4<f64> {
        Tensor4::from_fn(shape, |_, _, _, _| rng.normal()).unwrap()
    }

    #[test]
    fn degenerate_batch_gives_exact_batch_stats() {
        let x = Tensor4::from_fn([6, 2, 2, 2], |_, c, h, w| c as f64 + 0.5 * h as f64 - w as f64).unwrap();
        let bs = x.channel_stats();
        let mut rng = RngStream::new(1, 0);
        let g = draw_ghost_stats(&x, 3, &mut rng).unwrap();
        for b in 0..6 {
            for c in 0..2 {
                assert_eq!(g.mean[b * 2 + c], bs.mean[c]);
                assert_eq!(g.var[b * 2 + c], bs.var[c]);
            }
        }
    }

    #[test]
    fn single_sample_batch() {
        let x = Tensor4::new([1, 1, 1, 3], vec![1.0, 2.0, 6.0]).unwrap();
        let mut rng = RngStream::new(2, 0);
        let g = draw_ghost_stats(&x, 4, &mut rng).unwrap();
        assert_eq!(g.indices, vec![vec![0; 4]]);
        assert_eq!(g.mean, vec![3.0]);
    }

    #[test]
    fn ghost_stats_replay() {
        let mut r = RngStream::new(3, 0);
        let x = normal_tensor([10, 3, 2, 1], &mut r);
        let a = draw_ghost_stats(&x, 4, &mut RngStream::new(5, 5)).unwrap();
        let b = draw_ghost_stats(&x, 4, &mut RngStream::new(5, 5)).unwrap();
        assert_eq!(a, b);
        assert!(a.indices.iter().all(|ix| ix.len() == 4 && ix.iter().all(|&i| i < 10)));
    }

    #[test]
    fn ghost_stats_match_gathered_batch() {
        let mut r = RngStream::new(4, 0);
        let x = normal_tensor([7, 2, 2, 2], &mut r);
        let g = draw_ghost_stats(&x, 5, &mut r).unwrap();
        for b in 0..7 {
            let s = x.gather_samples(&g.indices[b]).unwrap().channel_stats();
            for c in 0..2 {
                assert!((g.mean[b * 2 + c] - s.mean[c]).abs() < 1e-14);
                assert!((g.var[b * 2 + c] - s.var[c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn gni_identity_on_identical_samples() {
        let x = Tensor4::from_fn([5, 3, 2, 2], |_, c, h, w| (c * 4 + h * 2 + w) as f64).unwrap();
        for mode in [NoiseMode::Full, NoiseMode::ShiftOnly, NoiseMode::ScaleOnly] {
            for n in [1, 2, 5, 9] {
                let y = gni(&x, &GhostNoiseConfig::new(n).with_mode(mode), &mut RngStream::new(6, n as u64)).unwrap();
                assert_eq!(y, x);
            }
        }
    }

    #[test]
    fn gni_hand_example() {
        let x = Tensor4::new([2, 1, 1, 1], vec![0.0, 2.0]).unwrap();
        let bs = x.channel_stats();
        let ghost = GhostStats { batch: 2, channels: 1, mean: vec![2.0, 2.0], var: vec![0.0, 0.0], indices: vec![vec![1], vec![1]] };
        let d = NoiseDraw::from_ghost_stats(&bs, &ghost, 1e-3, NoiseMode::Full);
        assert_eq!(d.shift, vec![1.0, 1.0]);
        let scale = (0.001f64 / 1.001).sqrt();
        assert!((d.scale[0] - scale).abs() < 1e-15);
        assert!((scale - 0.03161).abs() < 1e-5);
        let y = d.apply(&x).unwrap();
        assert!((y.data()[0] + 31.64).abs() < 0.01 && (y.data()[1] - 31.64).abs() < 0.01);
    }

    #[test]
    fn modes_compose_to_full() {
        let mut r = RngStream::new(7, 0);
        let x = normal_tensor([12, 3, 2, 2], &mut r);
        let ghost = draw_ghost_stats(&x, 4, &mut r).unwrap();
        let bs = x.channel_stats();
        let full = NoiseDraw::from_ghost_stats(&bs, &ghost, 1e-3, NoiseMode::Full).apply(&x).unwrap();
        let shifted = NoiseDraw::from_ghost_stats(&bs, &ghost, 1e-3, NoiseMode::ShiftOnly).apply(&x).unwrap();
        let both = NoiseDraw::from_ghost_stats(&bs, &ghost, 1e-3, NoiseMode::ScaleOnly).apply(&shifted).unwrap();
        assert_eq!(full, both);
    }

    #[test]
    fn gni_is_deterministic() {
        let mut r = RngStream::new(8, 0);
        let x = normal_tensor([9, 2, 1, 3], &mut r);
        let cfg = GhostNoiseConfig::new(3);
        let a = gni(&x, &cfg, &mut RngStream::new(1, 2)).unwrap();
        let b = gni(&x, &cfg, &mut RngStream::new(1, 2)).unwrap();
        assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn frozen_draw_jacobian_is_diagonal_inverse_scale() {
        let mut r = RngStream::new(9, 0);
        let x = normal_tensor([4, 2, 1, 2], &mut r);
        let (_, draw) = gni_with_draw(&x, &GhostNoiseConfig::new(2), &mut r).unwrap();
        let h = 1e-6;
        let len = x.shape().len();
        for j in 0..len {
            let mut plus = x.data().to_vec();
            let mut minus = x.data().to_vec();
            plus[j] += h;
            minus[j] -= h;
            let yp = draw.apply(&Tensor4::new(x.shape(), plus).unwrap()).unwrap();
            let ym = draw.apply(&Tensor4::new(x.shape(), minus).unwrap()).unwrap();
            for i in 0..len {
                let fd = (yp.data()[i] - ym.data()[i]) / (2.0 * h);
                let (b, c) = (i / 4, (i / 2) % 2);
                let want = if i == j { 1.0 / draw.scale_at(b, c) } else { 0.0 };
                assert!((fd - want).abs() <= 1e-6 * want.abs().max(1.0), "{i} {j} {fd} {want}");
            }
        }
    }

    #[test]
    fn affine_form_matches_reference_arithmetic() {
        let mut r = RngStream::new(10, 0);
        let x = normal_tensor([6, 3, 2, 1], &mut r);
        let (y, draw) = gni_with_draw(&x, &GhostNoiseConfig::new(3), &mut r).unwrap();
        let z = draw.to_affine(&x).unwrap().apply(&x).unwrap();
        assert!(y.max_abs_diff(&z) < 1e-12);
    }

    #[test]
    fn inference_is_identity() {
        let mut r = RngStream::new(11, 0);
        let x = normal_tensor([4, 2, 1, 1], &mut r);
        let injectors = [
            Injector::Gni(GhostNoiseConfig::new(2)),
            Injector::Agni { ghost_size: 2, granularity: AgniGranularity::PerChannel, mode: NoiseMode::Full },
            Injector::GaussianDropout { p: 0.3, granularity: DropoutGranularity::Elementwise },
            Injector::BernoulliDropout { p: 0.3, granularity: DropoutGranularity::Channelwise },
            Injector::Eagn { sigma: 0.5 },
        ];
        for inj in injectors {
            let before = r.clone();
            let out = inj.inject(&x, false, &mut r).unwrap();
            assert_eq!(out.output, x);
            assert_eq!(r, before, "{inj:?} consumed randomness at inference");
        }
    }

    #[test]
    fn zero_strength_injectors_are_identity() {
        let mut r = RngStream::new(12, 0);
        let x = normal_tensor([4, 2, 2, 1], &mut r);
        assert_eq!(gaussian_dropout(&x, 0.0, &mut r, DropoutGranularity::Elementwise).unwrap(), x);
        assert_eq!(bernoulli_dropout(&x, 0.0, &mut r, DropoutGranularity::Elementwise).unwrap(), x);
        assert_eq!(eagn(&x, 0.0, &mut r).unwrap(), x);
    }

    #[test]
    fn invalid_parameters_rejected() {
        let x = Tensor4::<f64>::zeros([2, 1, 1, 1]).unwrap();
        let mut r = RngStream::new(0, 0);
        assert_eq!(gaussian_dropout(&x, 1.0, &mut r, DropoutGranularity::Elementwise), Err(Error::InvalidProbability(1.0)));
        assert_eq!(bernoulli_dropout(&x, 1.5, &mut r, DropoutGranularity::Elementwise), Err(Error::InvalidProbability(1.5)));
        assert_eq!(eagn(&x, -0.1, &mut r), Err(Error::InvalidSigma(-0.1)));
        assert!(gni(&x, &GhostNoiseConfig::new(0), &mut r).is_err());
    }

    #[test]
    fn channelwise_masks_share_spatial_bit() {
        let x = Tensor4::filled([20, 3, 4, 4], 1.0f64).unwrap();
        let mut r = RngStream::new(13, 0);
        let y = bernoulli_dropout(&x, 0.5, &mut r, DropoutGranularity::Channelwise).unwrap();
        for b in 0..20 {
            for c in 0..3 {
                let s = y.slice(b, c);
                assert!(s.iter().all(|&v| v == s[0]));
                assert!(s[0] == 0.0 || s[0] == 2.0);
            }
        }
    }

    #[test]
    fn bernoulli_survivor_fraction() {
        let x = Tensor4::filled([1000, 1, 1, 1000], 1.0f64).unwrap();
        let y = bernoulli_dropout(&x, 0.5, &mut RngStream::new(14, 0), DropoutGranularity::Elementwise).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / 1e6;
        // binomial sd = 0.0005, so 0.002 is four sd
        assert!((kept - 0.5).abs() < 0.002, "{kept}");
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn gaussian_dropout_is_unbiased() {
        let x = Tensor4::from_fn([1, 1, 1, 4], |_, _, _, w| w as f64 - 1.5).unwrap();
        let mut r = RngStream::new(15, 0);
        let trials = 10_000;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..trials {
            let y = gaussian_dropout(&x, 0.2, &mut r, DropoutGranularity::Elementwise).unwrap();
            for i in 0..4 {
                sum[i] += y.data()[i];
                sq[i] += y.data()[i] * y.data()[i];
            }
        }
        for i in 0..4 {
            let m = sum[i] / trials as f64;
            let v = sq[i] / trials as f64 - m * m;
            let se = (v / trials as f64).sqrt();
            assert!((m - x.data()[i]).abs() < 3.0 * se + 1e-12, "{i}: {m}");
        }
    }

    #[test]
    fn eagn_residuals_have_requested_variance() {
        let x = Tensor4::filled([1000, 1, 1, 1000], 3.0f64).unwrap();
        let y = eagn(&x, 0.7, &mut RngStream::new(16, 0)).unwrap();
        let n = 1e6;
        let res: Vec<f64> = y.data().iter().map(|v| v - 3.0).collect();
        let m = res.iter().sum::<f64>() / n;
        let v = res.iter().map(|r| (r - m).powi(2)).sum::<f64>() / n;
        assert!(m.abs() < 3.0 * (v / n).sqrt());
        assert!((v / 0.49 - 1.0).abs() < 0.02);
    }

    #[test]
    fn agni_per_channel_shares_draws() {
        let x = Tensor4::filled([5, 3, 1, 1], 0.0f64).unwrap();
        let d: NoiseDraw<f64> = agni_draw(5, 3, 8, &mut RngStream::new(17, 0), AgniGranularity::PerChannel);
        for b in 1..5 {
            for c in 0..3 {
                assert_eq!(d.shift_at(b, c), d.shift_at(0, c));
                assert_eq!(d.scale_at(b, c), d.scale_at(0, c));
            }
        }
        assert!(d.scale.iter().all(|&s| s > 0.0));
        assert_eq!(agni(&x, 8, &mut RngStream::new(1, 1), AgniGranularity::PerSampleChannel).unwrap().shape(), x.shape());
    }

    #[test]
    fn agni_vanishes_for_huge_ghost_size() {
        let mut r = RngStream::new(18, 0);
        let x = normal_tensor([64, 4, 2, 2], &mut r);
        let y = agni(&x, 1_000_000, &mut r, AgniGranularity::PerSampleChannel).unwrap();
        let rms_diff = (x.data().iter().zip(y.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / x.data().len() as f64).sqrt();
        let rms = (x.data().iter().map(|a| a * a).sum::<f64>() / x.data().len() as f64).sqrt();
        assert!(rms_diff < 0.01 * rms, "{rms_diff} vs {rms}");
    }

    #[test]
    fn injector_config_round_trips_through_json() {
        let inj = Injector::Gni(GhostNoiseConfig::new(16).with_mode(NoiseMode::ShiftOnly));
        let text = serde_json::to_string(&inj).unwrap();
        assert_eq!(serde_json::from_str::<Injector>(&text).unwrap(), inj);
        let parsed: Injector = serde_json::from_str(r#"{"kind":"gaussian_dropout","p":0.1}"#).unwrap();
        assert_eq!(parsed, Injector::GaussianDropout { p: 0.1, granularity: DropoutGranularity::Elementwise });
        assert!(serde_json::from_str::<Injector>(r#"{"kind":"eagn","sigma":0.1,"extra":1}"#).is_err());
    }
}
