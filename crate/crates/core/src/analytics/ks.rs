use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// One-sample Kolmogorov–Smirnov statistic of `samples` against `cdf`:
/// `max_i max(i/n - F(x_i), F(x_i) - (i-1)/n)` over the sorted sample.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples { needed: 2, got: samples.len() });
    }
    let mut xs = samples.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let d = xs.iter().enumerate().fold(0.0f64, |d, (i, &x)| {
        let f = cdf(x);
        let above = (i + 1) as f64 / n - f;
        let below = f - i as f64 / n;
        d.max(above).max(below)
    });
    Ok(d)
}

/// CDF of `Normal(mean, var)`. A zero variance gives a step at the mean.
pub fn normal_cdf(mean: f64, var: f64) -> impl Fn(f64) -> f64 {
    let dist = (var > 0.0).then(|| Normal::new(mean, var.sqrt()).expect("finite normal parameters"));
    move |x| match &dist {
        Some(d) => d.cdf(x),
        None => f64::from(x >= mean),
    }
}

/// CDF of `chi2(dof) / dof`.
pub fn scaled_chi_squared_cdf(dof: f64) -> impl Fn(f64) -> f64 {
    let dist = ChiSquared::new(dof).expect("positive degrees of freedom");
    move |x| if x <= 0.0 { 0.0 } else { dist.cdf(x * dof) }
}

/// Ghost size whose analytical shift law `Normal(0, 1/N)` is closest in KS
/// distance to measured shift noise. Ties resolve to the first candidate.
pub fn fit_effective_ghost_size(shift: &[f64], candidates: &[usize]) -> Result<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for &n in candidates.iter().filter(|&&n| n > 0) {
        let d = ks_statistic(shift, normal_cdf(0.0, 1.0 / n as f64))?;
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((n, d));
        }
    }
    best.ok_or(Error::TooFewSamples { needed: 1, got: 0 })
}
