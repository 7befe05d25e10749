use std::collections::HashMap;
use std::f64::consts::PI;

use ndarray::ArrayD;

use super::{Layer, Param};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// Adam with decoupled weight decay. Moment state is keyed by parameter name.
pub struct AdamW<F> {
    pub config: AdamWConfig,
    step: u64,
    moments: HashMap<String, (ArrayD<F>, ArrayD<F>)>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamW {
            config,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Starts a new optimisation step; call [`AdamW::update`] for each model
    /// component afterwards.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&mut self, prefix: &str, layer: &mut dyn Layer<F>, lr: f64) {
        let c = self.config;
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let moments = &mut self.moments;
        layer.visit_params(prefix, &mut |name, p: &mut Param<F>| {
            if !p.trainable {
                return;
            }
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| (ArrayD::zeros(p.value.raw_dim()), ArrayD::zeros(p.value.raw_dim())));
            let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
            let (lr_f, eps) = (F::of(lr), F::of(c.eps));
            let (bc1, bc2) = (F::of(bc1), F::of(bc2));
            let decay = if p.decay { F::one() - F::of(lr * c.weight_decay) } else { F::one() };
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (F::one() - b1) * g;
                    *v = b2 * *v + (F::one() - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *w = *w * decay - lr_f * mhat / (vhat.sqrt() + eps);
                });
        });
    }
}

/// Cosine annealing from `base` to 0 over `total` steps, after `warmup`
/// linear warm-up steps.
pub fn cosine_lr(base: f64, step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let span = total.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / span as f64).min(1.0);
    0.5 * base * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Linear, Mode};
    use ndarray::IxDyn;

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(1.0, 0, 10, 0), 1.0);
        assert!((cosine_lr(1.0, 5, 10, 0) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(1.0, 10, 10, 0).abs() < 1e-12);
        assert!((cosine_lr(1.0, 0, 10, 5) - 0.2).abs() < 1e-12);
        assert!((cosine_lr(1.0, 5, 10, 5) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // With bias correction, Adam's first step is lr * sign(g).
        let mut rng = crate::util::rng_stream(0, 0);
        let mut l: Linear<f64> = Linear::new(2, 1, false, &mut rng);
        let before = l.weight.value.clone();
        l.weight.grad = ArrayD::from_shape_vec(IxDyn(&[1, 2]), vec![3.0, -0.5]).unwrap();
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        opt.begin_step();
        opt.update("fc", &mut l, 0.1);
        let delta = &l.weight.value - &before;
        assert!((delta[[0, 0]] + 0.1).abs() < 1e-6);
        assert!((delta[[0, 1]] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut rng = crate::util::rng_stream(1, 0);
        let mut l: Linear<f64> = Linear::new(1, 1, true, &mut rng);
        let x = ArrayD::from_shape_vec(IxDyn(&[4, 1]), vec![-1.0, 0.0, 1.0, 2.0]).unwrap();
        let target = x.mapv(|v| 3.0 * v - 1.0);
        let mut opt = AdamW::new(AdamWConfig { weight_decay: 0.0, ..Default::default() });
        for _ in 0..2000 {
            crate::nn::zero_grads::<f64>(&mut l);
            let y = l.forward_train(&x);
            let _ = l.backward(&((&y - &target) * 0.5));
            opt.begin_step();
            opt.update("", &mut l, 0.05);
        }
        let y = l.forward(&x, Mode::Eval);
        assert!((&y - &target).iter().all(|e| e.abs() < 1e-2));
    }
}
