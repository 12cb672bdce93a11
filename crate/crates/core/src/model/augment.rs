//! Vector-space augmentations standing in for image transforms.
//!
//! A view is `s · (m ⊙ (x + ε))` with `ε ~ N(0, σ²)`, `m` a Bernoulli keep
//! mask and `s ~ U(scale_range)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strength {
    Strong,
    Weak,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub strength: Strength,
    pub noise_sigma: f64,
    pub dropout_prob: f64,
    pub scale_range: (f64, f64),
}

impl AugmentPolicy {
    pub fn new(strength: Strength, noise_sigma: f64, dropout_prob: f64, scale_range: (f64, f64)) -> Result<Self> {
        let p = Self {
            strength,
            noise_sigma,
            dropout_prob,
            scale_range,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn strong() -> Self {
        Self {
            strength: Strength::Strong,
            noise_sigma: 0.25,
            dropout_prob: 0.2,
            scale_range: (0.8, 1.25),
        }
    }

    pub fn weak() -> Self {
        Self {
            strength: Strength::Weak,
            noise_sigma: 0.05,
            dropout_prob: 0.0,
            scale_range: (0.95, 1.05),
        }
    }

    pub fn preset(strength: Strength) -> Self {
        match strength {
            Strength::Strong => Self::strong(),
            Strength::Weak => Self::weak(),
        }
    }

    pub fn identity() -> Self {
        Self {
            strength: Strength::Weak,
            noise_sigma: 0.0,
            dropout_prob: 0.0,
            scale_range: (1.0, 1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(invalid("noise sigma must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout_prob) {
            return Err(invalid(format!("dropout probability {} not in [0, 1)", self.dropout_prob)));
        }
        if self.strength == Strength::Weak && self.dropout_prob != 0.0 {
            return Err(invalid("weak augmentation must not drop coordinates"));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(invalid(format!("bad scale range ({lo}, {hi})")));
        }
        Ok(())
    }

    pub fn apply<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Vec<f64> {
        let (lo, hi) = self.scale_range;
        let scale = if hi > lo { rng.random_range(lo..hi) } else { lo };
        let noise = Normal::new(0.0, self.noise_sigma.max(0.0)).expect("finite sigma");
        x.iter()
            .map(|&v| {
                let eps = if self.noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
                let keep = self.dropout_prob == 0.0 || rng.random::<f64>() >= self.dropout_prob;
                if keep {
                    scale * (v + eps)
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Augments `x` with a stream seeded by `seed`.
pub fn augment(x: &[f64], policy: &AugmentPolicy, seed: u64) -> Vec<f64> {
    let mut rng = <crate::rng::Rng as rand::SeedableRng>::seed_from_u64(seed);
    policy.apply(x, &mut rng)
}
