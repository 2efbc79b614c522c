//! GRPO objective: group-relative advantages, clipped ratio surrogate and a
//! k3 KL penalty, with an analytic gradient and a finite-difference check.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("a group needs at least 2 samples, got {0}")]
    Arity(usize),
    #[error("sample {sample}: {reason}")]
    Shape { sample: usize, reason: String },
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("invalid config: {0}")]
    Config(String),
}

/// One sampled output `o_i` of a group: per-token log-probabilities under
/// the current, behaviour and reference policies, plus its reward.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub token_logp_theta: Vec<f64>,
    pub token_logp_old: Vec<f64>,
    pub token_logp_ref: Vec<f64>,
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub epsilon: f64,
    pub beta: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self { epsilon: 0.2, beta: 0.001 }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(GrpoError::Config(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(GrpoError::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }
}

/// Correctness reward for an MCQ rollout.
pub fn mcq_reward(choice: Option<u8>, answer_index: u8) -> f64 {
    if choice == Some(answer_index) {
        1.0
    } else {
        0.0
    }
}

/// `(r_i - mean) / std` with the population standard deviation; all zeros
/// when the rewards do not vary.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, GrpoError> {
    if rewards.len() < 2 {
        return Err(GrpoError::Arity(rewards.len()));
    }
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(GrpoError::NonFinite("reward"));
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return Ok(vec![0.0; rewards.len()]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// `exp(d) - d - 1` with `d = logp_ref - logp_theta`.
pub fn token_kl(logp_theta: f64, logp_ref: f64) -> Result<f64, GrpoError> {
    if !logp_theta.is_finite() || !logp_ref.is_finite() {
        return Err(GrpoError::NonFinite("log-probability"));
    }
    let d = logp_ref - logp_theta;
    Ok(d.exp_m1() - d)
}

/// `min(rho * adv, clip(rho, 1 - eps, 1 + eps) * adv)`.
pub fn clipped_surrogate(rho: f64, adv: f64, epsilon: f64) -> f64 {
    let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon);
    (rho * adv).min(clipped * adv)
}

fn check_samples(samples: &[GroupSample]) -> Result<(), GrpoError> {
    if samples.len() < 2 {
        return Err(GrpoError::Arity(samples.len()));
    }
    for (i, s) in samples.iter().enumerate() {
        let n = s.token_logp_theta.len();
        if n == 0 {
            return Err(GrpoError::Shape { sample: i, reason: "empty output".into() });
        }
        if s.token_logp_old.len() != n || s.token_logp_ref.len() != n {
            return Err(GrpoError::Shape {
                sample: i,
                reason: format!(
                    "token counts differ: theta {n}, old {}, ref {}",
                    s.token_logp_old.len(),
                    s.token_logp_ref.len()
                ),
            });
        }
        let all = s.token_logp_theta.iter().chain(&s.token_logp_old).chain(&s.token_logp_ref);
        for v in all {
            if !v.is_finite() {
                return Err(GrpoError::NonFinite("log-probability"));
            }
            if *v > 0.0 {
                return Err(GrpoError::Shape { sample: i, reason: format!("log-probability {v} > 0") });
            }
        }
    }
    Ok(())
}

fn advantages_of(samples: &[GroupSample]) -> Result<Vec<f64>, GrpoError> {
    let rewards: Vec<f64> = samples.iter().map(|s| s.reward).collect();
    group_advantages(&rewards)
}

/// `(1/G) sum_i (1/|o_i|) sum_t [clipped surrogate - beta * kl]`.
pub fn grpo_objective(samples: &[GroupSample], cfg: &GrpoConfig) -> Result<f64, GrpoError> {
    cfg.validate()?;
    check_samples(samples)?;
    let adv = advantages_of(samples)?;
    let g = samples.len() as f64;
    let mut total = 0.0;
    for (s, a) in samples.iter().zip(&adv) {
        let mut sum = 0.0;
        for t in 0..s.token_logp_theta.len() {
            let rho = (s.token_logp_theta[t] - s.token_logp_old[t]).exp();
            let kl = token_kl(s.token_logp_theta[t], s.token_logp_ref[t])?;
            sum += clipped_surrogate(rho, *a, cfg.epsilon) - cfg.beta * kl;
        }
        total += sum / s.token_logp_theta.len() as f64;
    }
    Ok(total / g)
}

/// Derivative of the clipped surrogate in `logp_theta`: `rho * adv` where
/// the unclipped branch is the minimum, else zero.
fn surrogate_grad(rho: f64, adv: f64, epsilon: f64) -> f64 {
    let unclipped_active = if rho > 1.0 + epsilon {
        adv < 0.0
    } else if rho < 1.0 - epsilon {
        adv > 0.0
    } else {
        true
    };
    if unclipped_active {
        rho * adv
    } else {
        0.0
    }
}

/// Analytic gradient of [`grpo_objective`] with respect to every
/// `token_logp_theta` entry, shaped like the samples.
pub fn grpo_gradient(samples: &[GroupSample], cfg: &GrpoConfig) -> Result<Vec<Vec<f64>>, GrpoError> {
    cfg.validate()?;
    check_samples(samples)?;
    let adv = advantages_of(samples)?;
    let g = samples.len() as f64;
    Ok(samples
        .iter()
        .zip(&adv)
        .map(|(s, a)| {
            let scale = 1.0 / (g * s.token_logp_theta.len() as f64);
            (0..s.token_logp_theta.len())
                .map(|t| {
                    let rho = (s.token_logp_theta[t] - s.token_logp_old[t]).exp();
                    let d = s.token_logp_ref[t] - s.token_logp_theta[t];
                    let kl_grad = -cfg.beta * (-d.exp_m1());
                    scale * (surrogate_grad(rho, *a, cfg.epsilon) + kl_grad)
                })
                .collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates skipped for lying within `10 h` of a clip boundary.
    pub skipped: usize,
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares [`grpo_gradient`] with central differences of step `h`.
pub fn gradient_check(samples: &[GroupSample], cfg: &GrpoConfig, h: f64) -> Result<GradCheck, GrpoError> {
    let analytic = grpo_gradient(samples, cfg)?;
    let kinks = [(1.0 - cfg.epsilon).ln(), (1.0 + cfg.epsilon).ln()];
    let mut work = samples.to_vec();
    let mut out = GradCheck { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for i in 0..samples.len() {
        for t in 0..samples[i].token_logp_theta.len() {
            let x = samples[i].token_logp_theta[t];
            let log_ratio = x - samples[i].token_logp_old[t];
            if kinks.iter().any(|k| (log_ratio - k).abs() < 10.0 * h) {
                out.skipped += 1;
                continue;
            }
            // Perturbations may push a log-probability slightly above zero;
            // the objective is smooth there, so evaluate it unchecked.
            work[i].token_logp_theta[t] = x + h;
            let plus = objective_unchecked(&work, cfg)?;
            work[i].token_logp_theta[t] = x - h;
            let minus = objective_unchecked(&work, cfg)?;
            work[i].token_logp_theta[t] = x;
            let numeric = (plus - minus) / (2.0 * h);
            out.max_rel_error = out.max_rel_error.max(relative_error(analytic[i][t], numeric));
            out.checked += 1;
        }
    }
    Ok(out)
}

fn objective_unchecked(samples: &[GroupSample], cfg: &GrpoConfig) -> Result<f64, GrpoError> {
    let adv = advantages_of(samples)?;
    let g = samples.len() as f64;
    let mut total = 0.0;
    for (s, a) in samples.iter().zip(&adv) {
        let mut sum = 0.0;
        for t in 0..s.token_logp_theta.len() {
            let rho = (s.token_logp_theta[t] - s.token_logp_old[t]).exp();
            sum += clipped_surrogate(rho, *a, cfg.epsilon) - cfg.beta * token_kl(s.token_logp_theta[t], s.token_logp_ref[t])?;
        }
        total += sum / s.token_logp_theta.len() as f64;
    }
    Ok(total / g)
}

/// A random group: old log-probabilities in `[-4, -0.6)`, current ones
/// within `±0.5` nats of them (so both clip regions are hit and every value
/// stays negative), reference ones in `[-4, -0.05)`, binary rewards.
pub fn random_group(rng: &mut impl Rng, group_size: usize, max_len: usize) -> Vec<GroupSample> {
    (0..group_size)
        .map(|_| {
            let len = rng.random_range(1..=max_len.max(1));
            let old: Vec<f64> = (0..len).map(|_| rng.random_range(-4.0..-0.6)).collect();
            let theta = old.iter().map(|o| o + rng.random_range(-0.5..0.5)).collect();
            let reference = (0..len).map(|_| rng.random_range(-4.0..-0.05)).collect();
            GroupSample {
                token_logp_theta: theta,
                token_logp_old: old,
                token_logp_ref: reference,
                reward: f64::from(u8::from(rng.random_bool(0.5))),
            }
        })
        .collect()
}
