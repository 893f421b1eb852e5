//! Feature-space weak and strong views: additive isotropic Gaussian noise,
//! plus independent coordinate masking for the strong view.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewKind {
    Weak,
    Strong,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    /// Weak noise std in units of `feature_scale`.
    pub weak_std: f64,
    /// Strong noise std in units of `feature_scale`.
    pub strong_std: f64,
    pub mask_prob: f64,
    /// RMS coordinate of the raw samples; set by the generator.
    pub feature_scale: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            weak_std: 0.05,
            strong_std: 0.2,
            mask_prob: 0.1,
            feature_scale: 1.0,
        }
    }
}

impl AugmentationPolicy {
    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.weak_std) && ok(self.strong_std) && ok(self.feature_scale)) {
            return Err(Error::Config("augmentation scales must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Config(format!("mask_prob must lie in [0, 1], got {}", self.mask_prob)));
        }
        Ok(())
    }

    pub fn sigma(&self, kind: ViewKind) -> f64 {
        match kind {
            ViewKind::Weak => self.weak_std * self.feature_scale,
            ViewKind::Strong => self.strong_std * self.feature_scale,
        }
    }
}

/// Augmented copy of `sample`, a pure function of
/// `(seed, sample index, epoch, kind)`.
pub fn augment(
    sample: &[f64],
    policy: &AugmentationPolicy,
    kind: ViewKind,
    seed: u64,
    index: usize,
    epoch: usize,
) -> Vec<f64> {
    let tag = match kind {
        ViewKind::Weak => 0,
        ViewKind::Strong => 1,
    };
    let mut r = rng::stream(seed, "augment", &[index as u64, epoch as u64, tag]);
    let sigma = policy.sigma(kind);
    sample
        .iter()
        .map(|&x| {
            let z: f64 = StandardNormal.sample(&mut r);
            // draw the mask for every coordinate so the noise stream does not
            // depend on the mask probability
            let u: f64 = r.random();
            let v = x + sigma * z;
            if kind == ViewKind::Strong && u < policy.mask_prob {
                0.0
            } else {
                v
            }
        })
        .collect()
}

/// Root-mean-square coordinate over a set of rows.
pub fn feature_scale(rows: &[f64]) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    (rows.iter().map(|v| v * v).sum::<f64>() / rows.len() as f64).sqrt()
}
