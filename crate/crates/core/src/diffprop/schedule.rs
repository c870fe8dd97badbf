//! Cosine signal-retention schedule and forward noising.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::types::{ClassField, DiffusionState};
use crate::{Error, Result};

/// Offset of the cosine schedule, keeping ᾱ well-behaved near t = 0.
const COSINE_OFFSET: f64 = 0.008;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    /// Lower clip of ᾱ; keeps the pure-noise end invertible.
    pub clip: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self { clip: 1e-5 }
    }
}

impl NoiseSchedule {
    /// Signal retention ᾱ(t) for t in [0, 1]; 1 at t = 0, `clip` at t = 1.
    pub fn alpha_bar(&self, t: f64) -> f64 {
        let f = |t: f64| ((t + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * std::f64::consts::FRAC_PI_2).cos().powi(2);
        (f(t.clamp(0.0, 1.0)) / f(0.0)).clamp(self.clip, 1.0)
    }

    /// (√ᾱ, √(1−ᾱ)).
    pub fn coefficients(&self, t: f64) -> (f64, f64) {
        let a = self.alpha_bar(t);
        (a.sqrt(), (1.0 - a).sqrt())
    }
}

pub fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Config(format!("diffusion time must be in [0, 1], got {t}")));
    }
    Ok(())
}

/// z = √ᾱ(t)·x0 + √(1−ᾱ(t))·ε with ε drawn from `rng`.
pub fn add_noise<R: Rng + ?Sized>(
    schedule: &NoiseSchedule,
    x0: &ClassField,
    t: f64,
    rng: &mut R,
) -> Result<DiffusionState> {
    check_time(t)?;
    if !x0.is_finite() {
        return Err(Error::Numeric("clean field contains non-finite values".into()));
    }
    let (signal, noise) = schedule.coefficients(t);
    let mut z = x0.clone();
    for v in &mut z.data {
        let e: f64 = rng.sample(StandardNormal);
        *v = (signal * *v as f64 + noise * e) as f32;
    }
    Ok(DiffusionState { z, t })
}
