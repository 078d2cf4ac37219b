//! Group-relative policy optimization for the denoiser and its threshold head.
//!
//! All objectives are returned as values to maximize together with their
//! gradients; the training loop performs ascent.

mod loss;
mod train;

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{forward, DenoiserParams};
use crate::error::{Error, Result};
use crate::mdm::TokenSeq;
use crate::rng::Rng;
use crate::samplers::Trajectory;

pub use loss::{
    capped_weight, d1_loss, importance_weights, diffpo_model_loss, joint_loss, prompt_features, sampler_loss, sampler_objective_frozen, tau_draws, LossOutput,
};
pub use train::{metrics_csv, rollout_group, train, MetricsRow, METRICS_HEADER};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    D1,
    TwoMf,
    TwoMfIs,
    Joint,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::D1 => "d1",
            Variant::TwoMf => "2mf",
            Variant::TwoMfIs => "2mf_is",
            Variant::Joint => "joint",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "d1" => Ok(Variant::D1),
            "2mf" | "two_mf" => Ok(Variant::TwoMf),
            "2mf_is" | "two_mf_is" => Ok(Variant::TwoMfIs),
            "joint" => Ok(Variant::Joint),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RLConfig {
    pub variant: Variant,
    pub group_size: usize,
    /// Prompts per iteration.
    pub batch_prompts: usize,
    pub clip_eps: f64,
    /// Cap `C` on the importance weight.
    pub is_cap: f64,
    pub sigma_explore: f64,
    pub gamma_max: f64,
    pub gamma_init: f64,
    pub lr: f64,
    pub grad_clip: f64,
    /// Total optimizer iterations.
    pub steps: usize,
    pub seed: u64,
    pub adv_eps: f64,
    /// Held-out greedy evaluation period in iterations (0 = final only).
    pub eval_every: usize,
}

impl RLConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            variant: Variant::TwoMfIs,
            group_size: 6,
            batch_prompts: 8,
            clip_eps: 0.2,
            is_cap: 2.0,
            sigma_explore: 0.25,
            gamma_max: 2.0 * (vocab_size as f64).ln(),
            gamma_init: 0.1,
            lr: 1e-4,
            grad_clip: 1.0,
            steps: 100,
            seed: 0,
            adv_eps: 1e-8,
            eval_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.group_size < 2 {
            return bad(format!("rl.group_size must be >= 2, got {}", self.group_size));
        }
        if self.batch_prompts == 0 {
            return bad("rl.batch_prompts must be >= 1".into());
        }
        if !(self.clip_eps > 0.0 && self.clip_eps < 1.0) {
            return bad(format!("rl.clip_eps must lie in (0,1), got {}", self.clip_eps));
        }
        if !(self.is_cap >= 1.0) {
            return bad(format!("rl.is_cap must be >= 1, got {}", self.is_cap));
        }
        if !(self.sigma_explore >= 0.0) {
            return bad(format!("rl.sigma_explore must be >= 0, got {}", self.sigma_explore));
        }
        if !(self.gamma_max > 0.0 && self.gamma_init > 0.0 && self.gamma_init < self.gamma_max) {
            return bad(format!("need 0 < rl.gamma_init ({}) < rl.gamma_max ({})", self.gamma_init, self.gamma_max));
        }
        if self.variant == Variant::Joint && !(self.sigma_explore > 0.0) {
            return bad("variant joint needs rl.sigma_explore > 0".into());
        }
        if !(self.lr >= 0.0 && self.adv_eps >= 0.0 && self.grad_clip > 0.0) {
            return bad("rl.lr, rl.adv_eps must be >= 0 and rl.grad_clip > 0".into());
        }
        Ok(())
    }

    /// Fixed offset `beta = ln(gamma_init / (gamma_max - gamma_init))`.
    pub fn beta(&self) -> f64 {
        (self.gamma_init / (self.gamma_max - self.gamma_init)).ln()
    }

    pub fn gamma_of(&self, logit: f64) -> f64 {
        self.gamma_max / (1.0 + (-logit).exp())
    }
}

/// Group-normalized advantages with population standard deviation.
pub fn advantages(rewards: &[f64], delta: f64) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::InvalidArgument(format!("advantages need >= 2 rewards, got {}", rewards.len())));
    }
    if let Some(i) = rewards.iter().position(|r| !r.is_finite()) {
        return Err(Error::NonFinite { what: "reward", index: i });
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(vec![0.0; rewards.len()]);
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(rewards.iter().map(|r| (r - mean) / (std + delta)).collect())
}

/// `min(ratio * a, clip(ratio, 1 - eps, 1 + eps) * a)`.
pub fn clipped_term(ratio: f64, a: f64, eps: f64) -> f64 {
    (ratio * a).min(ratio.clamp(1.0 - eps, 1.0 + eps) * a)
}

/// Derivative of [`clipped_term`] in `ratio`: `a` where the unclipped branch
/// is active, zero in the clipped region.
pub fn clipped_term_grad(ratio: f64, a: f64, eps: f64) -> f64 {
    if ratio * a <= ratio.clamp(1.0 - eps, 1.0 + eps) * a {
        a
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThresholdSample {
    /// Pre-sigmoid logit `u` used at decode time.
    pub logit: f64,
    pub gamma: f64,
    /// Pre-sigmoid mean under the behavior parameters.
    pub old_mean: f64,
}

/// Pooled prompt features, read from a pass on the prompt plus a fully
/// masked completion of `completion_len` positions.
pub fn threshold_features(params: &DenoiserParams, prompt: &TokenSeq, completion_len: usize) -> Result<Vec<f64>> {
    let mut seq = prompt.0.clone();
    seq.resize(prompt.len() + completion_len, params.config.vocab.mask_id);
    Ok(forward(params, &seq, prompt.len())?.pooled)
}

/// `m = w . pooled + beta`.
pub fn threshold_mean_from(params: &DenoiserParams, pooled: &[f64], cfg: &RLConfig) -> f64 {
    params.threshold_head().iter().zip(pooled).map(|(w, f)| w * f).sum::<f64>() + cfg.beta()
}

pub fn threshold_mean(params: &DenoiserParams, prompt: &TokenSeq, completion_len: usize, cfg: &RLConfig) -> Result<f64> {
    Ok(threshold_mean_from(params, &threshold_features(params, prompt, completion_len)?, cfg))
}

/// Gaussian exploration on the pre-sigmoid logit around `mean`.
pub fn sample_threshold(mean: f64, cfg: &RLConfig, rng: &mut Rng) -> ThresholdSample {
    let eps: f64 = StandardNormal.sample(rng);
    let logit = mean + cfg.sigma_explore * eps;
    ThresholdSample { logit, gamma: cfg.gamma_of(logit), old_mean: mean }
}

/// Log-density of `u` under `N(mean, sigma^2)`.
pub fn threshold_log_likelihood(mean: f64, sigma: f64, u: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("threshold density needs sigma > 0, got {sigma}")));
    }
    let z = (u - mean) / sigma;
    Ok(-0.5 * z * z - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln())
}

/// `G` completions of one prompt with their rewards and advantages.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutGroup {
    pub prompt: TokenSeq,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Present when the threshold head chose each completion's gamma.
    pub thresholds: Option<Vec<ThresholdSample>>,
}

impl RolloutGroup {
    pub fn new(prompt: TokenSeq, trajectories: Vec<Trajectory>, rewards: Vec<f64>, delta: f64) -> Result<Self> {
        if trajectories.len() != rewards.len() {
            return Err(Error::Shape(format!("{} trajectories but {} rewards", trajectories.len(), rewards.len())));
        }
        let advantages = advantages(&rewards, delta)?;
        Ok(Self { prompt, trajectories, rewards, advantages, thresholds: None })
    }

    pub fn with_thresholds(mut self, samples: Vec<ThresholdSample>) -> Result<Self> {
        if samples.len() != self.trajectories.len() {
            return Err(Error::Shape(format!("{} thresholds for {} trajectories", samples.len(), self.trajectories.len())));
        }
        self.thresholds = Some(samples);
        Ok(self)
    }

    pub fn size(&self) -> usize {
        self.trajectories.len()
    }
}
