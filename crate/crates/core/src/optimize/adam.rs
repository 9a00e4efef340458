//! Learning-rate warmup and Adam.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::FieldParams;
use crate::real::Real;

/// Geometric warmup from `start` to `peak` over `warmup_iters`, then constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub start: f64,
    pub peak: f64,
    pub warmup_iters: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { start: 1e-5, peak: 1e-4, warmup_iters: 1500 }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.start > 0.0 && self.peak > 0.0) {
            return Err(Error::Config(format!("learning rates must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn at(&self, iteration: u64) -> f64 {
        if self.warmup_iters == 0 || iteration >= self.warmup_iters {
            return self.peak;
        }
        let frac = iteration as f64 / self.warmup_iters as f64;
        self.start * (self.peak / self.start).powf(frac)
    }
}

/// The default schedule: `1e-5 · 10^(min(iter, 1500) / 1500)`.
pub fn lr_schedule(iteration: u64) -> f64 {
    LrSchedule::default().at(iteration)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, epsilon: 1e-5 }
    }
}

/// Moment estimates shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F> {
    pub m: FieldParams<F>,
    pub v: FieldParams<F>,
    pub step: u64,
}

impl<F: Real> AdamState<F> {
    pub fn new(params: &FieldParams<F>) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

fn same_layout<F>(a: &FieldParams<F>, b: &FieldParams<F>) -> bool {
    a.arch == b.arch
        && a.tensors.len() == b.tensors.len()
        && a.tensors.iter().zip(&b.tensors).all(|(x, y)| x.name == y.name && x.data.len() == y.data.len())
}

/// One bias-corrected Adam update in place.
///
/// Returns `Ok(false)` and leaves everything untouched when a gradient is not
/// finite.
pub fn adam_step<F: Real>(
    params: &mut FieldParams<F>,
    grads: &FieldParams<F>,
    state: &mut AdamState<F>,
    lr: f64,
    config: &AdamConfig,
) -> Result<bool> {
    if !same_layout(params, grads) || !same_layout(params, &state.m) || !same_layout(params, &state.v) {
        return Err(Error::Shape("parameters, gradients and optimizer state disagree".into()));
    }
    if !grads.is_finite() {
        log::warn!("non-finite gradient at optimizer step {}; update skipped", state.step + 1);
        return Ok(false);
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (F::lit(config.beta1), F::lit(config.beta2));
    let c1 = F::lit(1.0 - config.beta1.powi(t));
    let c2 = F::lit(1.0 - config.beta2.powi(t));
    let (lr, eps) = (F::lit(lr), F::lit(config.epsilon));
    let one = F::one();
    for (((p, g), m), v) in params.iter_mut().zip(grads.iter()).zip(state.m.iter_mut()).zip(state.v.iter_mut()) {
        let g = *g;
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::FieldArch;

    fn toy() -> FieldParams<f64> {
        // Smallest manifest: one block of width 1.
        FieldParams::zeros(FieldArch { input_dim: 1, width: 1, hidden: 1, blocks: 0 })
    }

    #[test]
    fn schedule_points() {
        assert_eq!(lr_schedule(0), 1e-5);
        assert!((lr_schedule(1500) - 1e-4).abs() < 1e-20);
        assert_eq!(lr_schedule(9000), 1e-4);
        assert!((lr_schedule(750) - 3.1623e-5).abs() < 1e-9);
        for k in 0..1500 {
            assert!(lr_schedule(k + 1) > lr_schedule(k));
        }
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = toy();
        p.iter_mut().enumerate().for_each(|(i, x)| *x = i as f64);
        let before = p.clone();
        let g = p.zeros_like();
        let mut s = AdamState::new(&p);
        assert!(adam_step(&mut p, &g, &mut s, 1e-3, &AdamConfig::default()).unwrap());
        assert_eq!(p, before);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn matches_hand_computed_recurrence() {
        let cfg = AdamConfig::default();
        let mut p = toy();
        let n = p.parameter_count();
        let grads_at = |step: usize| -> Vec<f64> { (0..n).map(|i| ((i + 1) as f64 * 0.3 - step as f64 * 0.2).sin()).collect() };
        let mut s = AdamState::new(&p);
        let (mut m, mut v, mut x) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for step in 1..=3 {
            let g = grads_at(step);
            let mut gp = p.zeros_like();
            gp.iter_mut().zip(&g).for_each(|(a, b)| *a = *b);
            adam_step(&mut p, &gp, &mut s, 0.01, &cfg).unwrap();
            for i in 0..n {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(step as i32));
                let vh = v[i] / (1.0 - 0.999f64.powi(step as i32));
                x[i] -= 0.01 * mh / (vh.sqrt() + 1e-5);
            }
        }
        for (a, b) in p.iter().zip(&x) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn constant_gradient_descends_monotonically() {
        let mut p = toy();
        let mut g = p.zeros_like();
        g.iter_mut().for_each(|x| *x = 0.7);
        let mut s = AdamState::new(&p);
        let mut last = 0.0;
        for _ in 0..1000 {
            adam_step(&mut p, &g, &mut s, 1e-3, &AdamConfig::default()).unwrap();
            let now = *p.iter().next().unwrap();
            assert!(now < last);
            last = now;
        }
    }

    #[test]
    fn non_finite_gradient_skips_the_step() {
        let mut p = toy();
        let mut g = p.zeros_like();
        *g.iter_mut().next().unwrap() = f64::NAN;
        let mut s = AdamState::new(&p);
        assert!(!adam_step(&mut p, &g, &mut s, 1e-3, &AdamConfig::default()).unwrap());
        assert_eq!(s.step, 0);
        assert!(p.is_finite());
    }
}
