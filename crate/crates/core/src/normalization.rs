//! Batch, ghost-batch, exclusive (leave-one-out) and layer normalization.
//!
//! None of these carry a learned affine transform; callers own gain and bias.
//! All variances are biased (divisor = element count).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ChannelStats, Tensor4};

/// Minimum per-ghost-batch channel variance required by [`gbn_decomposition_residuals`].
pub const VARIANCE_FLOOR: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormConfig {
    pub eps: f64,
    pub ghost_size: usize,
    pub ema_decay: f64,
}

impl Default for NormConfig {
    fn default() -> Self {
        Self { eps: 1e-5, ghost_size: 1, ema_decay: 0.9 }
    }
}

impl NormConfig {
    /// Checks the config against an accelerator batch of `batch` samples.
    pub fn validate(&self, batch: usize) -> Result<()> {
        check_eps(self.eps)?;
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::InvalidDecay(self.ema_decay));
        }
        if self.ghost_size == 0 || self.ghost_size > batch {
            return Err(Error::InvalidGhostSize { ghost: self.ghost_size, reason: "must lie in 1..=batch" });
        }
        Ok(())
    }
}

/// Exponential moving averages of batch statistics, used at inference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub update_count: u64,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self { mean: vec![T::zero(); channels], var: vec![T::one(); channels], update_count: 0 }
    }

    /// Running statistics pinned to `stats`, as if they had been observed once.
    pub fn from_stats(stats: &ChannelStats<T>) -> Self {
        Self { mean: stats.mean.clone(), var: stats.var.clone(), update_count: 1 }
    }

    pub fn is_initialized(&self) -> bool {
        self.update_count > 0
    }
}

/// `new = decay * old + (1 - decay) * batch`; the first update copies the batch statistics.
pub fn update_running<T: Scalar>(running: &RunningStats<T>, stats: &ChannelStats<T>, decay: f64) -> Result<RunningStats<T>> {
    if !(decay > 0.0 && decay < 1.0) {
        return Err(Error::InvalidDecay(decay));
    }
    if running.mean.len() != stats.channels() {
        return Err(Error::ChannelMismatch { expected: running.mean.len(), got: stats.channels() });
    }
    if running.update_count == 0 {
        return Ok(RunningStats::from_stats(stats));
    }
    let d = T::of(decay);
    let blend = |old: &[T], new: &[T]| -> Vec<T> { old.iter().zip(new).map(|(&o, &n)| d * o + (T::one() - d) * n).collect() };
    Ok(RunningStats {
        mean: blend(&running.mean, &stats.mean),
        var: blend(&running.var, &stats.var),
        update_count: running.update_count + 1,
    })
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidEps(eps))
    }
}

fn check_ghost_partition(batch: usize, ghost: usize) -> Result<()> {
    if ghost == 0 {
        return Err(Error::InvalidGhostSize { ghost, reason: "must be at least 1" });
    }
    if batch % ghost != 0 {
        return Err(Error::NotDivisible { batch, ghost });
    }
    Ok(())
}

/// Where epsilon enters the normalization denominator.
///
/// Only `UnderRoot` is correct. `OutsideRoot` computes `sqrt(var) + sqrt(eps)` and
/// exists so the verification harness can be mutation-tested.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EpsPlacement {
    #[default]
    UnderRoot,
    OutsideRoot,
}

impl EpsPlacement {
    #[inline]
    fn denom<T: Scalar>(self, var: T, eps: T) -> T {
        match self {
            Self::UnderRoot => (var + eps).sqrt(),
            Self::OutsideRoot => var.sqrt() + eps.sqrt(),
        }
    }
}

/// Normalizes samples `range` of `x` with `stats`, writing into `out`.
fn normalize_range<T: Scalar>(
    x: &Tensor4<T>,
    range: std::ops::Range<usize>,
    stats: &ChannelStats<T>,
    eps: T,
    placement: EpsPlacement,
    out: &mut Vec<T>,
) {
    let inv: Vec<T> = stats.var.iter().map(|&v| T::one() / placement.denom(v, eps)).collect();
    for b in range {
        for c in 0..x.channels() {
            let (mu, k) = (stats.mean[c], inv[c]);
            out.extend(x.slice(b, c).iter().map(|&v| (v - mu) * k));
        }
    }
}

/// Training-mode batch normalization: `(x - mean) / sqrt(var + eps)` per channel.
/// Also returns the batch statistics for running-stat updates.
pub fn batch_norm_train<T: Scalar>(x: &Tensor4<T>, eps: f64) -> Result<(Tensor4<T>, ChannelStats<T>)> {
    check_eps(eps)?;
    let stats = x.channel_stats();
    let mut out = Vec::with_capacity(x.shape().len());
    normalize_range(x, 0..x.batch(), &stats, T::of(eps), EpsPlacement::UnderRoot, &mut out);
    Ok((Tensor4::from_raw(x.shape(), out), stats))
}

/// Inference-mode batch normalization using population statistics.
pub fn batch_norm_infer<T: Scalar>(x: &Tensor4<T>, running: &RunningStats<T>, eps: f64) -> Result<Tensor4<T>> {
    check_eps(eps)?;
    if !running.is_initialized() {
        return Err(Error::UninitializedRunningStats);
    }
    if running.mean.len() != x.channels() {
        return Err(Error::ChannelMismatch { expected: running.mean.len(), got: x.channels() });
    }
    let stats = ChannelStats { mean: running.mean.clone(), var: running.var.clone() };
    let mut out = Vec::with_capacity(x.shape().len());
    normalize_range(x, 0..x.batch(), &stats, T::of(eps), EpsPlacement::UnderRoot, &mut out);
    Ok(Tensor4::from_raw(x.shape(), out))
}

/// Splits the batch into contiguous ghost batches of `ghost_size` samples and
/// batch-normalizes each with its own statistics.
pub fn ghost_batch_norm<T: Scalar>(x: &Tensor4<T>, ghost_size: usize, eps: f64) -> Result<Tensor4<T>> {
    ghost_batch_norm_with(x, ghost_size, eps, EpsPlacement::UnderRoot)
}

fn ghost_batch_norm_with<T: Scalar>(x: &Tensor4<T>, ghost_size: usize, eps: f64, placement: EpsPlacement) -> Result<Tensor4<T>> {
    check_eps(eps)?;
    check_ghost_partition(x.batch(), ghost_size)?;
    let mut out = Vec::with_capacity(x.shape().len());
    for start in (0..x.batch()).step_by(ghost_size) {
        let range = start..start + ghost_size;
        let stats = x.stats_over(range.clone());
        normalize_range(x, range, &stats, T::of(eps), placement, &mut out);
    }
    Ok(Tensor4::from_raw(x.shape(), out))
}

/// Ghost-batch statistics for each contiguous ghost batch.
pub fn ghost_batch_stats<T: Scalar>(x: &Tensor4<T>, ghost_size: usize) -> Result<Vec<ChannelStats<T>>> {
    check_ghost_partition(x.batch(), ghost_size)?;
    Ok((0..x.batch()).step_by(ghost_size).map(|s| x.stats_over(s..s + ghost_size)).collect())
}

/// Leave-one-out statistics of sample `k` within ghost batch `start..start+n`, per channel.
pub fn exclusive_stats<T: Scalar>(x: &Tensor4<T>, start: usize, n: usize, k: usize) -> ChannelStats<T> {
    x.stats_over((start..start + n).filter(move |&b| b != k))
}

/// Count, mean and sum of squared deviations of a set of values.
#[derive(Debug, Clone, Copy)]
struct Summary<T> {
    n: T,
    mean: T,
    m2: T,
}

impl<T: Scalar> Summary<T> {
    fn empty() -> Self {
        Self { n: T::zero(), mean: T::zero(), m2: T::zero() }
    }

    fn merge(self, o: Self) -> Self {
        if self.n == T::zero() {
            return o;
        }
        if o.n == T::zero() {
            return self;
        }
        let n = self.n + o.n;
        let delta = o.mean - self.mean;
        Self { n, mean: self.mean + delta * o.n / n, m2: self.m2 + o.m2 + delta * delta * self.n * o.n / n }
    }
}

/// Leave-one-out `(mean, biased variance)` for every member of a group, where
/// member `i` contributes `count` values with mean `means[i]` and squared
/// deviation sum `m2s[i]`. Prefix and suffix summaries are merged, so no
/// step subtracts one large sum from another.
pub fn leave_one_out<T: Scalar>(means: &[T], m2s: &[T], count: usize) -> Vec<(T, T)> {
    let k = means.len();
    let parts: Vec<Summary<T>> = (0..k).map(|i| Summary { n: T::of_usize(count), mean: means[i], m2: m2s[i] }).collect();
    let mut suffix = vec![Summary::empty(); k + 1];
    for i in (0..k).rev() {
        suffix[i] = parts[i].merge(suffix[i + 1]);
    }
    let mut prefix = Summary::empty();
    let mut out = Vec::with_capacity(k);
    for i in 0..k {
        let rest = prefix.merge(suffix[i + 1]);
        let var = if rest.n > T::zero() { rest.m2 / rest.n } else { T::zero() };
        out.push((rest.mean, var));
        prefix = prefix.merge(parts[i]);
    }
    out
}

/// Exclusive batch normalization: within each ghost batch, sample `k` is
/// normalized by the statistics of the other `N - 1` samples. Not clamped, so
/// outputs are unbounded when the other samples nearly coincide.
pub fn exclusive_batch_norm<T: Scalar>(x: &Tensor4<T>, ghost_size: usize, eps: f64) -> Result<Tensor4<T>> {
    check_eps(eps)?;
    if ghost_size < 2 {
        return Err(Error::InvalidGhostSize { ghost: ghost_size, reason: "exclusive statistics need at least 2 samples" });
    }
    check_ghost_partition(x.batch(), ghost_size)?;
    let eps = T::of(eps);
    let s = x.shape().spatial();
    let count = T::of_usize(s);
    let mut out = vec![T::zero(); x.shape().len()];
    let (mut means, mut m2s) = (vec![T::zero(); ghost_size], vec![T::zero(); ghost_size]);
    for start in (0..x.batch()).step_by(ghost_size) {
        for c in 0..x.channels() {
            for i in 0..ghost_size {
                let v = x.slice(start + i, c);
                means[i] = v.iter().copied().sum::<T>() / count;
                m2s[i] = v.iter().map(|&x| (x - means[i]) * (x - means[i])).sum();
            }
            for (i, (mu, var)) in leave_one_out(&means, &m2s, s).into_iter().enumerate() {
                let inv = T::one() / (var + eps).sqrt();
                let at = ((start + i) * x.channels() + c) * s;
                for (o, &v) in out[at..at + s].iter_mut().zip(x.slice(start + i, c)) {
                    *o = (v - mu) * inv;
                }
            }
        }
    }
    Ok(Tensor4::from_raw(x.shape(), out))
}

/// Normalizes each sample by the mean and variance of its own (C, H, W) slice.
pub fn layer_norm<T: Scalar>(x: &Tensor4<T>, eps: f64) -> Result<Tensor4<T>> {
    check_eps(eps)?;
    let eps = T::of(eps);
    let n = T::of_usize(x.shape().sample_len());
    let mut out = Vec::with_capacity(x.shape().len());
    for b in 0..x.batch() {
        let s = x.sample(b);
        let mu = s.iter().copied().sum::<T>() / n;
        let var = s.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / n;
        let k = T::one() / (var + eps).sqrt();
        out.extend(s.iter().map(|&v| (v - mu) * k));
    }
    Ok(Tensor4::from_raw(x.shape(), out))
}

/// Worst-case residuals of the double-normalization decomposition of GBN.
#[derive(Debug, Clone, PartialEq)]
pub struct DoubleNormResiduals<T> {
    /// max |GBN(X) - GBN(BN(X))|
    pub equivalence: T,
    /// max |mu_g - (mu + sigma * mu_hat_g)|
    pub mean: T,
    /// max |sigma_g - sigma * sigma_hat_g|
    pub std: T,
    /// Ghost-batch statistics of BN(X), one entry per ghost batch.
    pub normalized_ghost_stats: Vec<ChannelStats<T>>,
}

impl<T: Scalar> DoubleNormResiduals<T> {
    pub fn worst(&self) -> T {
        self.equivalence.max(self.mean).max(self.std)
    }
}

/// Computes GBN directly and through a preceding full-batch normalization, and
/// checks that ghost statistics decompose as `mu_g = mu + sigma * mu_hat_g`,
/// `sigma_g = sigma * sigma_hat_g`. Every ghost-batch channel variance must be at
/// least [`VARIANCE_FLOOR`].
pub fn gbn_decomposition_residuals<T: Scalar>(x: &Tensor4<T>, ghost_size: usize, eps: f64) -> Result<DoubleNormResiduals<T>> {
    gbn_decomposition_residuals_with(x, ghost_size, eps, EpsPlacement::UnderRoot)
}

/// [`gbn_decomposition_residuals`] with epsilon placement in the ghost-of-normalized
/// route overridden.
#[doc(hidden)]
pub fn gbn_decomposition_residuals_with<T: Scalar>(
    x: &Tensor4<T>,
    ghost_size: usize,
    eps: f64,
    placement: EpsPlacement,
) -> Result<DoubleNormResiduals<T>> {
    check_eps(eps)?;
    let ghost_stats = ghost_batch_stats(x, ghost_size)?;
    for (g, s) in ghost_stats.iter().enumerate() {
        for (c, &v) in s.var.iter().enumerate() {
            if v < T::of(VARIANCE_FLOOR) {
                return Err(Error::VarianceFloor { ghost_batch: g, channel: c, var: v.to_f64_lossy(), floor: VARIANCE_FLOOR });
            }
        }
    }

    let direct = ghost_batch_norm(x, ghost_size, eps)?;
    let (normalized, batch_stats) = batch_norm_train(x, eps)?;
    let double = ghost_batch_norm_with(&normalized, ghost_size, eps, placement)?;
    let equivalence = direct.max_abs_diff(&double);

    // BN divides by sqrt(var + eps), so that is the sigma of the decomposition.
    let sigma = batch_stats.std(T::of(eps));
    let hat_stats = ghost_batch_stats(&normalized, ghost_size)?;
    let mut mean_res = T::zero();
    let mut std_res = T::zero();
    for (gs, hs) in ghost_stats.iter().zip(&hat_stats) {
        for c in 0..x.channels() {
            let mu_rebuilt = batch_stats.mean[c] + sigma[c] * hs.mean[c];
            mean_res = mean_res.max((gs.mean[c] - mu_rebuilt).abs());
            let sd_rebuilt = sigma[c] * hs.var[c].sqrt();
            std_res = std_res.max((gs.var[c].sqrt() - sd_rebuilt).abs());
        }
    }
    Ok(DoubleNormResiduals { equivalence, mean: mean_res, std: std_res, normalized_ghost_stats: hat_stats })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngStream;

    fn random(shape: [usize; 4], seed: u64, scale: f64, offset: f64) -> Tensor4<f64> {
        let mut r = RngStream::new(seed, 0);
        Tensor4::from_fn(shape, |_, c, _, _| offset + (c as f64) + scale * r.normal()).unwrap()
    }

    #[test]
    fn batch_norm_identity_on_standardized() {
        let (x, _) = batch_norm_train(&random([16, 3, 2, 2], 1, 2.0, 5.0), 1e-14).unwrap();
        let (y, _) = batch_norm_train(&x, 1e-14).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-8);
    }

    #[test]
    fn batch_norm_constant_channel_is_zero() {
        let x = Tensor4::filled([4, 2, 1, 1], 3.5).unwrap();
        let (y, _) = batch_norm_train(&x, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_norm_output_is_standardized() {
        let (y, _) = batch_norm_train(&random([16, 4, 2, 2], 2, 3.0, -1.0), 1e-10).unwrap();
        let s = y.channel_stats();
        for c in 0..4 {
            assert!(s.mean[c].abs() < 1e-8);
            assert!((s.var[c] - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn rejects_bad_eps() {
        let x = random([2, 1, 1, 1], 0, 1.0, 0.0);
        assert_eq!(batch_norm_train(&x, 0.0).unwrap_err(), Error::InvalidEps(0.0));
        assert!(layer_norm(&x, -1.0).is_err());
    }

    #[test]
    fn infer_with_identity_stats() {
        let x = random([5, 2, 1, 3], 3, 1.0, 0.0);
        let running = RunningStats { mean: vec![0.0; 2], var: vec![1.0; 2], update_count: 1 };
        let y = batch_norm_infer(&x, &running, 1e-3).unwrap();
        let expected = x.map(|v| v / (1.0f64 + 1e-3).sqrt());
        assert!(y.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn infer_is_per_sample() {
        let x = random([6, 2, 2, 2], 4, 1.0, 0.0);
        let running = RunningStats { mean: vec![0.3, -0.2], var: vec![2.0, 0.5], update_count: 3 };
        let full = batch_norm_infer(&x, &running, 1e-5).unwrap();
        let one = batch_norm_infer(&x.gather_samples(&[4]).unwrap(), &running, 1e-5).unwrap();
        assert_eq!(one.data(), full.sample(4));
    }

    #[test]
    fn infer_with_exact_batch_stats_matches_train() {
        let x = random([12, 3, 2, 2], 5, 2.0, 1.0);
        let (train, stats) = batch_norm_train(&x, 1e-5).unwrap();
        let infer = batch_norm_infer(&x, &RunningStats::from_stats(&stats), 1e-5).unwrap();
        assert!(train.max_abs_diff(&infer) < 1e-10);
    }

    #[test]
    fn infer_rejects_uninitialized() {
        let x = random([2, 2, 1, 1], 0, 1.0, 0.0);
        assert_eq!(batch_norm_infer(&x, &RunningStats::new(2), 1e-5), Err(Error::UninitializedRunningStats));
    }

    #[test]
    fn running_update_rules() {
        let stats = ChannelStats { mean: vec![2.0f64], var: vec![3.0] };
        let first = update_running(&RunningStats::new(1), &stats, 0.9).unwrap();
        assert_eq!(first, RunningStats { mean: vec![2.0], var: vec![3.0], update_count: 1 });

        let old = RunningStats { mean: vec![0.0f64], var: vec![1.0], update_count: 1 };
        let new = update_running(&old, &ChannelStats { mean: vec![1.0], var: vec![1.0] }, 0.9).unwrap();
        assert!((new.mean[0] - 0.1).abs() < 1e-15);
        assert_eq!(new.update_count, 2);

        let mut r = RunningStats { mean: vec![10.0], var: vec![10.0], update_count: 1 };
        for _ in 0..400 {
            r = update_running(&r, &stats, 0.9).unwrap();
        }
        assert!((r.mean[0] - 2.0).abs() < 1e-12 && (r.var[0] - 3.0).abs() < 1e-12);

        assert!(update_running(&r, &ChannelStats { mean: vec![0.0; 2], var: vec![0.0; 2] }, 0.9).is_err());
        assert_eq!(update_running(&r, &stats, 1.0), Err(Error::InvalidDecay(1.0)));
    }

    #[test]
    fn ghost_batch_norm_hand_example() {
        let x = Tensor4::new([4, 1, 1, 1], vec![1.0f64, 3.0, 5.0, 7.0]).unwrap();
        let y = ghost_batch_norm(&x, 2, 1e-12).unwrap();
        let expected = [-1.0, 1.0, -1.0, 1.0];
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn ghost_batch_norm_full_batch_is_batch_norm() {
        let x = random([8, 3, 2, 2], 6, 1.5, 0.5);
        let g = ghost_batch_norm(&x, 8, 1e-5).unwrap();
        let (b, _) = batch_norm_train(&x, 1e-5).unwrap();
        assert!(g.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn ghost_batch_norm_rejects_non_divisor() {
        let x = random([6, 1, 1, 1], 0, 1.0, 0.0);
        assert_eq!(ghost_batch_norm(&x, 4, 1e-5), Err(Error::NotDivisible { batch: 6, ghost: 4 }));
        assert!(ghost_batch_norm(&x, 0, 1e-5).is_err());
    }

    #[test]
    fn ghost_batches_are_standardized() {
        let x = random([32, 2, 2, 2], 7, 2.0, 3.0);
        let y = ghost_batch_norm(&x, 8, 1e-10).unwrap();
        for s in ghost_batch_stats(&y, 8).unwrap() {
            for c in 0..2 {
                assert!(s.mean[c].abs() < 1e-6);
                assert!((s.var[c] - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn exclusive_hand_examples() {
        let x = Tensor4::new([3, 1, 1, 1], vec![1.0f64, 3.0, 5.0]).unwrap();
        let y = exclusive_batch_norm(&x, 3, 1e-12).unwrap();
        // sample 0 uses {3, 5}: mean 4, var 1
        assert!((y.data()[0] + 3.0).abs() < 1e-9);

        let x = Tensor4::new([3, 1, 1, 1], vec![2.0, 5.0, 5.0]).unwrap();
        let y = exclusive_batch_norm(&x, 3, 1e-3).unwrap();
        let expected = -3.0 / 1e-3f64.sqrt();
        assert!((y.data()[0] - expected).abs() < 1e-9);
        assert!(y.data()[0].abs() > 94.0);
    }

    #[test]
    fn exclusive_identical_samples_are_zero() {
        let x = Tensor4::from_fn([4, 2, 1, 1], |_, c, _, _| 1.5 * c as f64 - 0.25).unwrap();
        let y = exclusive_batch_norm(&x, 2, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn exclusive_matches_direct_leave_one_out() {
        let mut rng = RngStream::new(44, 0);
        for (b, n, h) in [(6, 3, 1), (8, 4, 2), (4, 2, 1), (12, 6, 3)] {
            let x = Tensor4::from_fn([b, 3, h, 2], |i, c, _, _| 3.0 * c as f64 + (1.0 + i as f64 * 0.1) * rng.normal()).unwrap();
            let fast = exclusive_batch_norm(&x, n, 1e-5).unwrap();
            for k in 0..b {
                let start = k / n * n;
                let st = exclusive_stats(&x, start, n, k);
                for c in 0..3 {
                    let inv = 1.0 / (st.var[c] + 1e-5).sqrt();
                    for (j, &v) in x.slice(k, c).iter().enumerate() {
                        let want = (v - st.mean[c]) * inv;
                        assert!((fast.slice(k, c)[j] - want).abs() < 1e-10 * want.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn leave_one_out_survives_a_dominant_member() {
        let r = leave_one_out(&[1e9f64, 1.0, 2.0, 3.0], &[0.0; 4], 1);
        assert_eq!(r[0].0, 2.0);
        assert!((r[0].1 - 2.0 / 3.0).abs() < 1e-12);
        let pooled = leave_one_out(&[1.0, 3.0], &[2.0, 8.0], 2);
        assert_eq!(pooled, vec![(3.0, 4.0), (1.0, 1.0)]);
    }

    #[test]
    fn exclusive_rejects_small_ghost() {
        let x = random([4, 1, 1, 1], 0, 1.0, 0.0);
        assert!(matches!(exclusive_batch_norm(&x, 1, 1e-5), Err(Error::InvalidGhostSize { .. })));
        assert!(matches!(exclusive_batch_norm(&x, 3, 1e-5), Err(Error::NotDivisible { .. })));
    }

    #[test]
    fn exclusive_uses_spatial_divisor() {
        // brute force of the leave-one-out formula with H*W = 2
        let x = random([4, 1, 1, 2], 11, 1.0, 0.0);
        let y = exclusive_batch_norm(&x, 4, 1e-5).unwrap();
        let k = 1;
        let others: Vec<f64> = (0..4).filter(|&b| b != k).flat_map(|b| x.sample(b).to_vec()).collect();
        let m = others.iter().sum::<f64>() / 6.0;
        let v = others.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 6.0;
        let want = (x.get(k, 0, 0, 1) - m) / (v + 1e-5).sqrt();
        assert!((y.get(k, 0, 0, 1) - want).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_cases() {
        let x = random([8, 3, 2, 2], 12, 2.0, 1.0);
        let all = layer_norm(&x, 1e-10).unwrap();
        let one = layer_norm(&x.gather_samples(&[5]).unwrap(), 1e-10).unwrap();
        assert_eq!(one.data(), all.sample(5));

        let c = Tensor4::new([2, 2, 1, 1], vec![4.0, 4.0, -1.0, 2.0]).unwrap();
        let y = layer_norm(&c, 1e-5).unwrap();
        assert!(y.sample(0).iter().all(|&v| v == 0.0));

        let y = layer_norm(&random([4, 3, 2, 2], 13, 1.0, 0.0), 1e-10).unwrap();
        for b in 0..4 {
            let s = y.sample(b);
            let m = s.iter().sum::<f64>() / 12.0;
            let v = s.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 12.0;
            assert!(m.abs() < 1e-8 && (v - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn decomposition_residuals_small() {
        let x = random([32, 4, 2, 2], 14, 2.0, 3.0);
        let r = gbn_decomposition_residuals(&x, 8, 1e-10).unwrap();
        assert!(r.worst() < 1e-6, "{r:?}");
    }

    #[test]
    fn decomposition_on_standardized_input() {
        let (x, _) = batch_norm_train(&random([32, 2, 2, 2], 15, 1.0, 0.0), 1e-14).unwrap();
        let r = gbn_decomposition_residuals(&x, 8, 1e-10).unwrap();
        let ghost = ghost_batch_stats(&x, 8).unwrap();
        for (h, g) in r.normalized_ghost_stats.iter().zip(&ghost) {
            for c in 0..2 {
                assert!((h.mean[c] - g.mean[c]).abs() < 1e-8);
            }
        }
        assert!(r.worst() < 1e-8);
    }

    #[test]
    fn decomposition_single_ghost_batch() {
        let x = random([16, 3, 1, 2], 16, 2.0, -4.0);
        let r = gbn_decomposition_residuals(&x, 16, 1e-10).unwrap();
        let h = &r.normalized_ghost_stats[0];
        for c in 0..3 {
            assert!(h.mean[c].abs() < 1e-8);
            assert!((h.var[c].sqrt() - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn decomposition_rejects_low_variance() {
        let x = random([8, 1, 1, 1], 17, 0.01, 0.0);
        assert!(matches!(gbn_decomposition_residuals(&x, 4, 1e-10), Err(Error::VarianceFloor { .. })));
    }

    #[test]
    fn misplaced_eps_is_detected() {
        let x = random([32, 4, 2, 2], 18, 2.0, 0.0);
        let r = gbn_decomposition_residuals_with(&x, 8, 1e-10, EpsPlacement::OutsideRoot).unwrap();
        assert!(r.equivalence > 1e-6);
    }

    #[test]
    fn permutation_equivariance() {
        let x = random([6, 2, 1, 2], 19, 1.0, 0.0);
        let perm = [3, 0, 5, 1, 4, 2];
        let (y, _) = batch_norm_train(&x, 1e-5).unwrap();
        let (yp, _) = batch_norm_train(&x.gather_samples(&perm).unwrap(), 1e-5).unwrap();
        for (i, &p) in perm.iter().enumerate() {
            for (a, b) in yp.sample(i).iter().zip(y.sample(p)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_precision_ghost_norm() {
        let x = Tensor4::<f32>::new([4, 1, 1, 1], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let y = ghost_batch_norm(&x, 2, 1e-6).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-3);
    }
}
