//! Measured ghost-noise distributions against their analytical laws.

use ghostnoise_core::analytics::{
    histogram, ks_statistic, measure_ghost_noise, normal_cdf, scaled_chi_squared_cdf, ConvNoiseModel, HistogramBin, Moments, NoiseSamples,
};
use ghostnoise_core::noise::Sampling;
use ghostnoise_core::RngStream;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    /// Maximum `|mean| / SE` of the shift noise.
    pub shift_mean_se: f64,
    pub shift_var_rel: f64,
    pub s2_mean_rel: f64,
    pub s2_var_rel: f64,
    pub shift_ks: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { shift_mean_se: 3.0, shift_var_rel: 0.05, s2_mean_rel: 0.02, s2_var_rel: 0.10, shift_ks: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistConfig {
    pub model: ConvNoiseModel,
    /// Samples per freshly drawn batch.
    pub batch: usize,
    pub channels: usize,
    /// Minimum number of (sample, channel) noise values to collect.
    pub draws: usize,
    pub sampling: Sampling,
    pub bins: usize,
    pub thresholds: Thresholds,
}

impl Default for DistConfig {
    fn default() -> Self {
        Self {
            model: ConvNoiseModel::fully_connected(32),
            batch: 256,
            channels: 8,
            draws: 100_000,
            sampling: Sampling::Empirical,
            bins: 50,
            thresholds: Thresholds::default(),
        }
    }
}

/// One line of the distribution table. `statistic` is what gets compared with
/// `threshold`; rows without a threshold are informational and always pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DistRow {
    pub quantity: &'static str,
    pub analytical: f64,
    pub empirical: f64,
    pub rel_error: f64,
    pub ks_d: f64,
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl DistRow {
    fn new(quantity: &'static str, analytical: f64, empirical: f64, ks_d: f64, statistic: f64, threshold: Option<f64>) -> Self {
        let rel_error = if analytical != 0.0 { (empirical - analytical).abs() / analytical.abs() } else { f64::NAN };
        let threshold = threshold.unwrap_or(f64::NAN);
        let passed = threshold.is_nan() || statistic < threshold;
        Self { quantity, analytical, empirical, rel_error, ks_d, statistic, threshold, passed }
    }
}

#[derive(Debug, Clone)]
pub struct DistReport {
    pub rows: Vec<DistRow>,
    pub draws: usize,
    pub shift_histogram: Vec<HistogramBin>,
    pub s2_histogram: Vec<HistogramBin>,
}

impl DistReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn row(&self, quantity: &str) -> Option<&DistRow> {
        self.rows.iter().find(|r| r.quantity == quantity)
    }
}

/// Compares measured noise with the analytical laws of `model`, all variances
/// taken relative to the model's total channel variance.
///
/// `s2` is the ghost second moment about the batch mean, whose law is the
/// chi-squared mixture. The ghost variance about its own mean (`centered_s2`)
/// is smaller by the shift variance on average and is reported for information.
pub fn analyze(cfg: &DistConfig, samples: &NoiseSamples) -> anyhow::Result<DistReport> {
    let m = &cfg.model;
    let t = &cfg.thresholds;
    let total = m.inter_var + m.intra_var;
    anyhow::ensure!(total > 0.0, "model has zero total variance");
    let shift_var = m.shift_noise_variance() / total;
    let (s2_mean, s2_var) = m.scale_noise_moments();
    let (s2_mean, s2_var) = (s2_mean / total, s2_var / (total * total));

    let shift = Moments::of(&samples.shift);
    let s2 = Moments::of(&samples.second_moment);
    let centered = Moments::of(&samples.centered_var);
    let shift_ks = ks_statistic(&samples.shift, normal_cdf(0.0, shift_var * total))?;

    let rel = |e: f64, a: f64| (e - a).abs() / a.abs();
    let mut rows = vec![
        DistRow::new("shift_mean", 0.0, shift.mean, f64::NAN, shift.mean.abs() / shift.se_mean(), Some(t.shift_mean_se)),
        DistRow::new("shift_var", shift_var, shift.var / total, f64::NAN, rel(shift.var / total, shift_var), Some(t.shift_var_rel)),
        DistRow::new("shift_ks", f64::NAN, f64::NAN, shift_ks, shift_ks, Some(t.shift_ks)),
        DistRow::new("s2_mean", s2_mean, s2.mean, f64::NAN, rel(s2.mean, s2_mean), Some(t.s2_mean_rel)),
        DistRow::new("s2_var", s2_var, s2.var, f64::NAN, rel(s2.var, s2_var), Some(t.s2_var_rel)),
    ];
    if m.intra_var == 0.0 {
        let n = m.ghost_size as f64;
        let d = ks_statistic(&samples.second_moment, scaled_chi_squared_cdf(n))?;
        rows.push(DistRow::new("s2_ks", f64::NAN, f64::NAN, d, d, None));
    }
    rows.push(DistRow::new("centered_s2_mean", s2_mean - shift_var, centered.mean, f64::NAN, f64::NAN, None));
    Ok(DistReport {
        rows,
        draws: samples.shift.len(),
        shift_histogram: histogram(&samples.shift, cfg.bins),
        s2_histogram: histogram(&samples.second_moment, cfg.bins),
    })
}

pub fn run_dist(cfg: &DistConfig, seed: u64) -> anyhow::Result<DistReport> {
    let mut rng = RngStream::new(seed, 0);
    let samples = measure_ghost_noise(&cfg.model, cfg.batch, cfg.channels, cfg.draws, cfg.sampling, &mut rng)?;
    analyze(cfg, &samples)
}
