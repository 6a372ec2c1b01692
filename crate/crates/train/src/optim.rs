//! SGD with momentum and coupled weight decay, and the warmup + cosine schedule.

use std::f64::consts::PI;

/// `v <- momentum * v + (g + decay * w)`, then `w <- w - lr * v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    assert!(params.len() == grads.len() && params.len() == velocity.len(), "parameter, gradient and velocity lengths differ");
    for ((w, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *w;
        *w -= lr * *v;
    }
}

/// Linear ramp from 0 to `base` over `warmup` steps, then half a cosine down
/// to 0 over the remaining steps.
pub fn cosine_lr(step: usize, total: usize, warmup: usize, base: f64) -> f64 {
    if step < warmup {
        return base * step as f64 / warmup as f64;
    }
    let decay_steps = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / decay_steps as f64).min(1.0);
    base * 0.5 * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn plain_gradient_descent() {
        let mut w = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut w, &[0.5, 1.0], &mut v, 0.1, 0.0, 0.0);
        assert_eq!(w, vec![0.95, -2.1]);
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut w = vec![3.0, 4.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut w, &[0.0, 0.0], &mut v, 0.1, 0.9, 0.0);
        assert_eq!(w, vec![3.0, 4.0]);
    }

    #[test]
    fn two_momentum_steps() {
        let (lr, g) = (0.1, 2.0);
        let mut w = vec![0.0];
        let mut v = vec![0.0];
        sgd_step(&mut w, &[g], &mut v, lr, 0.9, 0.0);
        sgd_step(&mut w, &[g], &mut v, lr, 0.9, 0.0);
        assert!((w[0] + lr * g * (1.0 + 1.9)).abs() < 1e-15);
    }

    #[test]
    fn weight_decay_pulls_to_zero() {
        let mut w = vec![2.0];
        let mut v = vec![0.0];
        sgd_step(&mut w, &[0.0], &mut v, 0.5, 0.0, 0.1);
        assert!((w[0] - 1.9).abs() < 1e-15);
    }

    #[test]
    fn schedule_landmarks() {
        let (total, warmup, base) = (1000, 100, 0.4);
        assert_eq!(cosine_lr(0, total, warmup, base), 0.0);
        assert_eq!(cosine_lr(50, total, warmup, base), 0.2);
        assert_eq!(cosine_lr(warmup, total, warmup, base), base);
        assert!((cosine_lr(550, total, warmup, base) - base / 2.0).abs() < 1e-12);
        let increment = base * 0.5 * (1.0 - (PI / 900.0).cos());
        assert!(cosine_lr(total - 1, total, warmup, base) <= increment + 1e-15);
        assert_eq!(cosine_lr(0, 10, 0, base), base);
    }

    proptest! {
        #[test]
        fn schedule_stays_in_range(total in 2usize..5000, warm_frac in 0.0f64..0.9, step_frac in 0.0f64..1.0) {
            let warmup = (warm_frac * total as f64) as usize;
            let step = ((step_frac * total as f64) as usize).min(total - 1);
            let lr = cosine_lr(step, total, warmup, 1.0);
            prop_assert!((0.0..=1.0).contains(&lr));
            if step > warmup {
                prop_assert!(lr <= cosine_lr(step - 1, total, warmup, 1.0) + 1e-15);
            }
        }
    }
}
