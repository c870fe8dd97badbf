use serde::{Deserialize, Serialize};

use super::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Sgd,
    Adamw,
    Adam,
}

/// Optimizer and schedule settings for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub method: Method,
    pub lr: f64,
    /// SGD only.
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// `lr · (1 − step/total)^power`; zero keeps the rate constant.
    #[serde(default)]
    pub poly_power: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl OptimizerConfig {
    /// SGD settings used for self-training the segmenter.
    pub fn sgd_refine() -> Self {
        Self {
            method: Method::Sgd,
            lr: 2.5e-4,
            momentum: 0.9,
            weight_decay: 0.0,
            poly_power: 0.9,
            batch_size: 4,
            epochs: 20,
        }
    }

    /// AdamW settings used for the label-diffusion model.
    pub fn adamw_diffusion() -> Self {
        Self {
            method: Method::Adamw,
            lr: 6e-5,
            momentum: 0.0,
            weight_decay: 0.01,
            poly_power: 0.0,
            batch_size: 4,
            epochs: 40,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        let bad = |m: &str| Err(crate::Error::Config(m.to_string()));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.poly_power < 0.0 {
            return bad("weight_decay and poly_power must be non-negative");
        }
        Ok(())
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

/// Stateful optimizer over a flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Optimizer<T> {
    cfg: OptimizerConfig,
    total_steps: usize,
    step: usize,
    first: Vec<T>,
    second: Vec<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig, num_params: usize, total_steps: usize) -> Self {
        let second = match cfg.method {
            Method::Sgd => Vec::new(),
            Method::Adamw | Method::Adam => vec![T::zero(); num_params],
        };
        Self { cfg, total_steps: total_steps.max(1), step: 0, first: vec![T::zero(); num_params], second }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    pub fn current_lr(&self) -> f64 {
        let frac = (self.step as f64 / self.total_steps as f64).min(1.0);
        if self.cfg.poly_power == 0.0 {
            self.cfg.lr
        } else {
            self.cfg.lr * (1.0 - frac).powf(self.cfg.poly_power)
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), grads.len());
        let lr = self.current_lr();
        self.step += 1;
        let wd = T::lit(self.cfg.weight_decay);
        match self.cfg.method {
            Method::Sgd => {
                let mu = T::lit(self.cfg.momentum);
                let lr = T::lit(lr);
                for ((p, g), b) in params.iter_mut().zip(grads).zip(self.first.iter_mut()) {
                    let g = *g + wd * *p;
                    *b = mu * *b + g;
                    *p -= lr * *b;
                }
            }
            Method::Adamw | Method::Adam => {
                let t = self.step as i32;
                let c1 = T::lit(1.0 - BETA1.powi(t));
                let c2 = T::lit(1.0 - BETA2.powi(t));
                let (b1, b2, eps) = (T::lit(BETA1), T::lit(BETA2), T::lit(EPS));
                let lr_t = T::lit(lr);
                let decoupled = self.cfg.method == Method::Adamw;
                let shrink = T::one() - lr_t * wd;
                for (((p, g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(self.first.iter_mut())
                    .zip(self.second.iter_mut())
                {
                    let g = if decoupled { *g } else { *g + wd * *p };
                    if decoupled {
                        *p *= shrink;
                    }
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr_t * mhat / (vhat.sqrt() + eps);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_momentum_matches_hand_iteration() {
        let cfg = OptimizerConfig { poly_power: 0.0, lr: 0.1, ..OptimizerConfig::sgd_refine() };
        let mut opt = Optimizer::<f64>::new(cfg, 1, 10);
        let mut p = [1.0];
        opt.step(&mut p, &[2.0]); // buf = 2, p = 1 - 0.2
        opt.step(&mut p, &[2.0]); // buf = 0.9*2 + 2 = 3.8, p = 0.8 - 0.38
        assert!((p[0] - 0.42).abs() < 1e-12);
    }

    #[test]
    fn poly_schedule_decays_to_zero() {
        let cfg = OptimizerConfig::sgd_refine();
        let mut opt = Optimizer::<f32>::new(cfg, 1, 4);
        assert_eq!(opt.current_lr(), 2.5e-4);
        let mut p = [0.0f32];
        for _ in 0..4 {
            opt.step(&mut p, &[0.0]);
        }
        assert_eq!(opt.current_lr(), 0.0);
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::adamw_diffusion() };
        let mut opt = Optimizer::<f64>::new(cfg, 2, 100);
        let mut p = [0.5, -0.5];
        opt.step(&mut p, &[3.0, -0.001]);
        assert!((p[0] - (0.5 - 6e-5)).abs() < 1e-9);
        assert!((p[1] - (-0.5 + 6e-5)).abs() < 1e-7);
    }

    #[test]
    fn adamw_decay_is_decoupled() {
        let cfg = OptimizerConfig { lr: 0.1, weight_decay: 0.5, ..OptimizerConfig::adamw_diffusion() };
        let mut opt = Optimizer::<f64>::new(cfg, 1, 100);
        let mut p = [2.0];
        opt.step(&mut p, &[0.0]);
        assert!((p[0] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }
}
