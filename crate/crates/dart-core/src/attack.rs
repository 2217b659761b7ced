//! L-infinity evasion attacks against a classifier: single-step FGSM,
//! iterated FGSM, and PGD (iterated with a random start). Attacks maximize
//! cross-entropy against the labels they are handed; callers choose whether
//! those are ground-truth or pseudo-labels.

use crate::model::{Model, ModelError};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid attack config: {reason}")]
    Invalid { reason: String },
}

pub type AttackResult<T> = Result<T, AttackError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMethod {
    Fgsm,
    Ifgsm,
    Pgd,
}

impl AttackMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Ifgsm => "ifgsm",
            AttackMethod::Pgd => "pgd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    /// Clamp each feature to its dataset range widened by epsilon on both
    /// sides, so in-distribution points keep their full perturbation budget.
    FeatureBounds,
    None,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttackConfig {
    pub method: AttackMethod,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
    pub clamp: ClampMode,
    pub seed: u64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            method: AttackMethod::Fgsm,
            epsilon,
            step_size: epsilon,
            steps: 1,
            random_start: false,
            clamp: ClampMode::FeatureBounds,
            seed: 0,
        }
    }

    pub fn ifgsm(epsilon: f64, step_size: f64, steps: usize) -> Self {
        Self {
            method: AttackMethod::Ifgsm,
            epsilon,
            step_size,
            steps,
            random_start: false,
            clamp: ClampMode::FeatureBounds,
            seed: 0,
        }
    }

    pub fn pgd(epsilon: f64, step_size: f64, steps: usize, seed: u64) -> Self {
        Self {
            method: AttackMethod::Pgd,
            epsilon,
            step_size,
            steps,
            random_start: true,
            clamp: ClampMode::FeatureBounds,
            seed,
        }
    }

    fn validate(&self, input_dim: usize, bounds: &[(f64, f64)]) -> AttackResult<()> {
        if !self.epsilon.is_finite() || self.epsilon < 0.0 {
            return Err(AttackError::Invalid {
                reason: format!("epsilon must be finite and nonnegative, got {}", self.epsilon),
            });
        }
        if self.method != AttackMethod::Fgsm {
            if self.steps == 0 {
                return Err(AttackError::Invalid {
                    reason: "steps must be at least 1".into(),
                });
            }
            if !(self.step_size > 0.0) && self.epsilon > 0.0 {
                return Err(AttackError::Invalid {
                    reason: format!("step_size must be positive, got {}", self.step_size),
                });
            }
        }
        if self.clamp == ClampMode::FeatureBounds && bounds.len() != input_dim {
            return Err(AttackError::Invalid {
                reason: format!(
                    "clamp needs {} feature bounds, got {}",
                    input_dim,
                    bounds.len()
                ),
            });
        }
        Ok(())
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Projects every element into the L-infinity ball of `radius` around
/// `center`, then into the clamp region where one applies. The ball always
/// wins if the two regions fail to intersect.
fn project(
    adv: &mut Tensor,
    center: &Tensor,
    radius: f64,
    clamp: ClampMode,
    bounds: &[(f64, f64)],
) {
    let cols = adv.cols();
    for idx in 0..adv.data().len() {
        let c = center.data()[idx];
        let mut lo = c - radius;
        let mut hi = c + radius;
        if clamp == ClampMode::FeatureBounds {
            let (blo, bhi) = bounds[idx % cols];
            lo = lo.max(blo - radius);
            hi = hi.min(bhi + radius);
            if lo > hi {
                // Center sits too far outside the data range; keep the ball.
                lo = c - radius;
                hi = c + radius;
            }
        }
        let v = adv.data()[idx];
        adv.data_mut()[idx] = v.clamp(lo, hi);
    }
}

/// Crafts adversarial inputs for `inputs` under `cfg`. The epsilon-zero
/// budget returns the inputs bit-for-bit, and the model is never mutated.
pub fn perturb(
    model: &Model,
    inputs: &Tensor,
    labels: &[usize],
    cfg: &AttackConfig,
    bounds: &[(f64, f64)],
) -> AttackResult<Tensor> {
    cfg.validate(inputs.cols(), bounds)?;
    if cfg.epsilon == 0.0 {
        return Ok(inputs.clone());
    }
    let (steps, step_size, random_start) = match cfg.method {
        AttackMethod::Fgsm => (1, cfg.epsilon, false),
        AttackMethod::Ifgsm => (cfg.steps, cfg.step_size, false),
        AttackMethod::Pgd => (cfg.steps, cfg.step_size, cfg.random_start),
    };

    let mut adv = inputs.clone();
    if random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for v in adv.data_mut() {
            *v += rng.gen_range(-cfg.epsilon..=cfg.epsilon);
        }
        project(&mut adv, inputs, cfg.epsilon, cfg.clamp, bounds);
    }
    for _ in 0..steps {
        let pair = model.input_loss_grad(&adv, labels)?;
        for (v, g) in adv.data_mut().iter_mut().zip(pair.grad.data()) {
            *v += step_size * sign(*g);
        }
        project(&mut adv, inputs, cfg.epsilon, cfg.clamp, bounds);
    }
    Ok(adv)
}

/// Largest absolute elementwise deviation between two equally shaped
/// batches.
pub fn linf_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}
