//! Analytical ghost-noise laws and the measurement apparatus used to check them.
//!
//! In a convolutional channel each sample has a true mean drawn from
//! `Normal(0, inter_var)` and every spatial position is drawn around it with
//! `intra_var`. A ghost batch of `N` samples over `I` positions then has
//!
//! * shift noise `~ Normal(0, intra_var / (N I) + inter_var / N)`
//! * squared scale `~ (intra_var / (N I)) chi2(N I) + (inter_var / N) chi2(N)`
//!
//! With `intra_var = 0` (fully connected layers) these reduce to
//! `Normal(0, 1/N)` and `chi2(N) / N`.

mod ks;
mod moments;
mod trace;

pub use ks::{fit_effective_ghost_size, ks_statistic, normal_cdf, scaled_chi_squared_cdf};
pub use moments::{histogram, HistogramBin, Moments};
pub use trace::{NoiseKind, NoiseTrace, TraceRecord, DEFAULT_TRACE_CAPACITY};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{agni_draw, draw_ghost_stats, AgniGranularity, GhostStats, Sampling};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::{ChannelStats, Tensor4};

/// Two-level Gaussian model of one post-normalization channel.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvNoiseModel {
    pub ghost_size: usize,
    /// Spatial positions per sample, `H * W`.
    pub spatial: usize,
    pub inter_var: f64,
    pub intra_var: f64,
}

impl ConvNoiseModel {
    /// The fully connected case: all variance is between samples.
    pub fn fully_connected(ghost_size: usize) -> Self {
        Self { ghost_size, spatial: 1, inter_var: 1.0, intra_var: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ghost_size == 0 || self.spatial == 0 {
            return Err(Error::InvalidModel(format!("ghost size and spatial size must be positive: {self:?}")));
        }
        let ok = |v: f64| v >= 0.0 && v.is_finite();
        if !ok(self.inter_var) || !ok(self.intra_var) {
            return Err(Error::InvalidModel(format!("variances must be finite and non-negative: {self:?}")));
        }
        Ok(())
    }

    /// Whether the channel is unit-variance, as it is right after batch normalization.
    pub fn is_standardized(&self, tol: f64) -> bool {
        (self.inter_var + self.intra_var - 1.0).abs() <= tol
    }

    /// `intra_var / (N I) + inter_var / N`
    pub fn shift_noise_variance(&self) -> f64 {
        let n = self.ghost_size as f64;
        self.intra_var / (n * self.spatial as f64) + self.inter_var / n
    }

    /// Mean and variance of the squared scale noise. The two chi-squared
    /// components are independent.
    pub fn scale_noise_moments(&self) -> (f64, f64) {
        let n = self.ghost_size as f64;
        let ni = n * self.spatial as f64;
        let mean = self.intra_var + self.inter_var;
        let var = 2.0 * self.intra_var.powi(2) / ni + 2.0 * self.inter_var.powi(2) / n;
        (mean, var)
    }
}

/// Draws a (batch, channels, height, width) tensor from the two-level model,
/// every channel sharing the model's variances.
pub fn sample_conv_model<T: Scalar>(
    model: &ConvNoiseModel,
    batch: usize,
    channels: usize,
    height: usize,
    width: usize,
    rng: &mut RngStream,
) -> Result<Tensor4<T>> {
    model.validate()?;
    if height * width != model.spatial {
        return Err(Error::InvalidModel(format!("{height}x{width} does not factor spatial size {}", model.spatial)));
    }
    let (sb, si) = (model.inter_var.sqrt(), model.intra_var.sqrt());
    let mut data = Vec::with_capacity(batch * channels * model.spatial);
    for _ in 0..batch * channels {
        let mu = rng.normal() * sb;
        for _ in 0..model.spatial {
            data.push(T::of(mu + rng.normal() * si));
        }
    }
    Tensor4::new([batch, channels, height, width], data)
}

/// Per-channel split of total variance into between-sample and within-sample parts.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceDecomposition<T> {
    pub inter: Vec<T>,
    pub intra: Vec<T>,
}

/// `inter[c]` is the biased variance over samples of the per-sample spatial
/// means; `intra[c]` is the mean over samples of the spatial variances. They sum
/// to the channel variance.
pub fn variance_decomposition<T: Scalar>(x: &Tensor4<T>) -> Result<VarianceDecomposition<T>> {
    let (b, c) = (x.batch(), x.channels());
    if b < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: b });
    }
    let s = x.spatial_stats();
    let nb = T::of_usize(b);
    let mut inter = Vec::with_capacity(c);
    let mut intra = Vec::with_capacity(c);
    for ch in 0..c {
        let grand = (0..b).map(|i| s.mean_at(i, ch)).sum::<T>() / nb;
        inter.push((0..b).map(|i| (s.mean_at(i, ch) - grand).powi(2)).sum::<T>() / nb);
        intra.push((0..b).map(|i| s.var_at(i, ch)).sum::<T>() / nb);
    }
    Ok(VarianceDecomposition { inter, intra })
}

impl<T: Scalar> VarianceDecomposition<T> {
    /// Bias-corrected estimates of the generative model's `(inter_var, intra_var)`
    /// from a decomposition of `batch` samples with `spatial` positions each.
    ///
    /// The spatial variance underestimates `intra_var` by `(I - 1) / I`, and the
    /// variance of per-sample means carries an extra `intra_var / I` and the
    /// `(B - 1) / B` factor.
    pub fn model_estimate(&self, batch: usize, spatial: usize) -> (Vec<T>, Vec<T>) {
        let (b, i) = (T::of_usize(batch), T::of_usize(spatial));
        let intra: Vec<T> = if spatial > 1 {
            self.intra.iter().map(|&v| v * i / (i - T::one())).collect()
        } else {
            vec![T::zero(); self.intra.len()]
        };
        let inter = self.inter.iter().zip(&intra).map(|(&v, &w)| v * b / (b - T::one()) - w / i).collect();
        (inter, intra)
    }
}

/// Noise realizations gathered from repeated ghost draws, one value per (sample, channel).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoiseSamples {
    /// `m - mu`
    pub shift: Vec<f64>,
    /// Ghost second moment about the batch mean over the batch variance,
    /// `(s^2 + (m - mu)^2) / sigma^2`. This is the quantity the chi-squared laws describe.
    pub second_moment: Vec<f64>,
    /// Ghost variance about the ghost mean over the batch variance, `s^2 / sigma^2`,
    /// the squared GNI scale without epsilon.
    pub centered_var: Vec<f64>,
}

impl NoiseSamples {
    fn extend_from_ghost(&mut self, batch: &ChannelStats<f64>, ghost: &GhostStats<f64>) {
        for (i, (&m, &s2)) in ghost.mean.iter().zip(&ghost.var).enumerate() {
            let c = i % ghost.channels;
            let shift = m - batch.mean[c];
            self.shift.push(shift);
            self.second_moment.push((s2 + shift * shift) / batch.var[c]);
            self.centered_var.push(s2 / batch.var[c]);
        }
    }
}

/// Repeatedly draws a fresh batch from `model`, resamples one ghost batch per
/// sample and records the resulting noise until at least `draws` values exist.
/// Analytical sampling skips the data and draws the noise laws directly.
pub fn measure_ghost_noise(
    model: &ConvNoiseModel,
    batch: usize,
    channels: usize,
    draws: usize,
    sampling: Sampling,
    rng: &mut RngStream,
) -> Result<NoiseSamples> {
    model.validate()?;
    if batch == 0 || channels == 0 {
        return Err(Error::InvalidModel("batch and channel counts must be positive".into()));
    }
    let mut out = NoiseSamples::default();
    while out.shift.len() < draws {
        match sampling {
            Sampling::Empirical => {
                let x: Tensor4<f64> = sample_conv_model(model, batch, channels, 1, model.spatial, rng)?;
                let ghost = draw_ghost_stats(&x, model.ghost_size, rng)?;
                out.extend_from_ghost(&x.channel_stats(), &ghost);
            }
            Sampling::Analytical => {
                let d = agni_draw::<f64>(batch, channels, model.ghost_size, rng, AgniGranularity::PerSampleChannel);
                for (&sh, &sc) in d.shift.iter().zip(&d.scale) {
                    out.shift.push(sh);
                    out.second_moment.push(sc * sc);
                    out.centered_var.push(sc * sc);
                }
            }
        }
    }
    Ok(out)
}
