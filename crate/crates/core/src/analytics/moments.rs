use serde::{Deserialize, Serialize};

/// Sample moments with the standard errors used by the Monte-Carlo checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: usize,
    pub mean: f64,
    /// Biased variance.
    pub var: f64,
    /// Fourth central moment.
    pub m4: f64,
}

impl Moments {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { n, mean: f64::NAN, var: f64::NAN, m4: f64::NAN };
        }
        let nf = n as f64;
        let mean = xs.iter().sum::<f64>() / nf;
        let (mut m2, mut m4) = (0.0, 0.0);
        for &x in xs {
            let d2 = (x - mean) * (x - mean);
            m2 += d2;
            m4 += d2 * d2;
        }
        Self { n, mean, var: m2 / nf, m4: m4 / nf }
    }

    pub fn se_mean(&self) -> f64 {
        (self.var / self.n as f64).sqrt()
    }

    /// Asymptotic standard error of the variance estimate, `sqrt((m4 - var^2) / n)`.
    pub fn se_var(&self) -> f64 {
        ((self.m4 - self.var * self.var) / self.n as f64).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub lo: f64,
    pub hi: f64,
    pub count: u64,
}

/// Equal-width histogram spanning the finite range of `xs`; non-finite values are skipped.
pub fn histogram(xs: &[f64], bins: usize) -> Vec<HistogramBin> {
    let finite = || xs.iter().copied().filter(|x| x.is_finite());
    let lo = finite().fold(f64::INFINITY, f64::min);
    let hi = finite().fold(f64::NEG_INFINITY, f64::max);
    if bins == 0 || !lo.is_finite() {
        return vec![];
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut out: Vec<HistogramBin> =
        (0..bins).map(|i| HistogramBin { lo: lo + i as f64 * width, hi: lo + (i + 1) as f64 * width, count: 0 }).collect();
    for x in finite() {
        let i = (((x - lo) / width) as usize).min(bins - 1);
        out[i].count += 1;
    }
    out
}
