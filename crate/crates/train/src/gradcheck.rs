//! Central finite-difference checks of [`Mlp::backward`].
//!
//! Noise is drawn once and replayed for every perturbed evaluation, which is
//! exactly the stop-gradient contract: draws are constants. Coordinates whose
//! perturbation flips a ReLU are skipped, since the loss is not differentiable
//! across the kink.

use ghostnoise_core::{RngStream, Tensor};

use crate::error::Result;
use crate::mlp::{Mlp, Mode, NoiseSource};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Denominator floor of the relative error. Central differences with step
/// `1e-5` in f64 carry an absolute error around `1e-10`, so gradients much
/// smaller than this floor are compared on an absolute scale instead.
pub const RELATIVE_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, RELATIVE_FLOOR)`
    pub max_rel: f64,
    /// Coordinate attaining `max_rel`.
    pub worst: String,
    pub checked: usize,
    pub skipped_kinks: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

/// Checks every parameter and input coordinate of `model` on one batch.
pub fn check_gradients(model: &Mlp, x: &Tensor, labels: &[usize], rng: &mut RngStream, step: f64) -> Result<GradCheckReport> {
    let cache = model.forward(x, Mode::Train, NoiseSource::Sample(rng))?;
    let noise = cache.noise();
    let pattern = cache.relu_pattern();
    let (_, grads) = model.backward(&cache, labels)?;

    let eval = |m: &Mlp, x: &Tensor| -> Result<(f64, bool)> {
        let c = m.forward(x, Mode::Train, NoiseSource::Replay(&noise))?;
        let same = c.relu_pattern() == pattern;
        Ok((m.backward(&c, labels)?.0, same))
    };
    let mut report = GradCheckReport { max_rel: 0.0, worst: String::new(), checked: 0, skipped_kinks: 0 };
    let note = |report: &mut GradCheckReport, name: String, a: f64, plus: (f64, bool), minus: (f64, bool)| {
        if !(plus.1 && minus.1) {
            report.skipped_kinks += 1;
            return;
        }
        let numeric = (plus.0 - minus.0) / (2.0 * step);
        let rel = relative_error(a, numeric);
        report.checked += 1;
        if rel > report.max_rel || !rel.is_finite() {
            report.max_rel = rel;
            report.worst = name;
        }
    };

    let mut m = model.clone();
    let flat: Vec<Vec<f64>> = grads.flat().into_iter().map(<[f64]>::to_vec).collect();
    let count = m.params_mut().len();
    for p in 0..count {
        for i in 0..flat[p].len() {
            let orig = m.params_mut()[p].values[i];
            m.params_mut()[p].values[i] = orig + step;
            let plus = eval(&m, x)?;
            m.params_mut()[p].values[i] = orig - step;
            let minus = eval(&m, x)?;
            m.params_mut()[p].values[i] = orig;
            let name = format!("{}[{i}]", m.params_mut()[p].name);
            note(&mut report, name, flat[p][i], plus, minus);
        }
    }
    for i in 0..x.data().len() {
        let mut d = x.data().to_vec();
        d[i] += step;
        let plus = eval(model, &Tensor::new(x.shape(), d.clone())?)?;
        d[i] -= 2.0 * step;
        let minus = eval(model, &Tensor::new(x.shape(), d)?)?;
        note(&mut report, format!("input[{i}]"), grads.input[i], plus, minus);
    }
    Ok(report)
}
