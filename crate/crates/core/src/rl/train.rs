use rayon::prelude::*;

use crate::denoiser::{adam_step, clip_grad_norm, AdamConfig, AdamState, DenoiserParams};
use crate::error::{Error, Result};
use crate::eval::evaluate_instances;
use crate::rng::{derive_seed, substream, Rng};
use crate::samplers::{decode, SamplerConfig, Strategy};
use crate::tasks::{effective_tokens, reward, Instance};

use rand::SeedableRng;

use super::{
    d1_loss, diffpo_model_loss, joint_loss, sample_threshold, tau_draws, threshold_mean, LossOutput, RLConfig,
    RolloutGroup, ThresholdSample, Variant,
};

pub const METRICS_HEADER: &str = "iter,variant,reward_mean,reward_std,accuracy,nfe_mean,ets_mean,gamma_mean,loss";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub iter: usize,
    pub variant: Variant,
    pub reward_mean: f64,
    pub reward_std: f64,
    /// Greedy held-out accuracy; `NaN` on iterations without evaluation.
    pub accuracy: f64,
    pub nfe_mean: f64,
    pub ets_mean: f64,
    /// Mean decode threshold of the rollouts (`NaN` for non-EB samplers).
    pub gamma_mean: f64,
    pub loss: f64,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.8}",
            self.iter,
            self.variant,
            self.reward_mean,
            self.reward_std,
            self.accuracy,
            self.nfe_mean,
            self.ets_mean,
            self.gamma_mean,
            self.loss
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv_line());
        s.push('\n');
    }
    s
}

fn rollout_rng(seed: u64, iter: usize, slot: usize) -> Rng {
    Rng::seed_from_u64(derive_seed(derive_seed(seed, "rollout", iter as u64), "slot", slot as u64))
}

/// Roll out `G` completions of one prompt under `params`.
///
/// Each completion draws from its own substream keyed by `(iter, slot)`, so
/// results do not depend on how rollouts are scheduled across threads.
pub fn rollout_group(
    params: &DenoiserParams,
    instance: &Instance,
    rl: &RLConfig,
    sampler: &SamplerConfig,
    iter: usize,
    first_slot: usize,
) -> Result<RolloutGroup> {
    let head_mean = match rl.variant {
        Variant::Joint => Some(threshold_mean(params, &instance.prompt, sampler.max_len, rl)?),
        _ => None,
    };
    let mut trajs = Vec::with_capacity(rl.group_size);
    let mut samples: Vec<ThresholdSample> = Vec::new();
    for i in 0..rl.group_size {
        let mut rng = rollout_rng(rl.seed, iter, first_slot + i);
        let mut cfg = sampler.clone();
        let mut logit = None;
        if let Some(m) = head_mean {
            let ts = sample_threshold(m, rl, &mut rng);
            cfg.gamma = ts.gamma;
            logit = Some(ts.logit);
            samples.push(ts);
        }
        let mut traj = decode(params, &instance.prompt, &cfg, &mut rng)?;
        traj.threshold_logit = logit;
        trajs.push(traj);
    }
    let rewards = trajs.iter().map(|t| reward(instance, t.completion.tokens())).collect();
    let group = RolloutGroup::new(instance.prompt.clone(), trajs, rewards, rl.adv_eps)?;
    if head_mean.is_some() {
        group.with_thresholds(samples)
    } else {
        Ok(group)
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Run RL iterations until `state.step == rl.steps`.
///
/// Each iteration snapshots the behavior parameters, rolls out
/// `batch_prompts x group_size` completions, evaluates the variant objective
/// and takes one Adam ascent step. `on_iter` sees every logged row together
/// with the updated parameters and optimizer state (for checkpointing).
pub fn train(
    params: &mut DenoiserParams,
    state: &mut AdamState,
    train_set: &[Instance],
    eval_set: &[Instance],
    rl: &RLConfig,
    sampler: &SamplerConfig,
    on_iter: &mut dyn FnMut(&MetricsRow, &DenoiserParams, &AdamState) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    rl.validate()?;
    sampler.validate()?;
    if rl.variant == Variant::Joint && sampler.strategy != Strategy::Eb {
        return Err(Error::Config(format!("variant joint needs the eb sampler, got {}", sampler.strategy)));
    }
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty RL prompt set".into()));
    }
    if state.m.len() != params.len() {
        return Err(Error::Shape(format!("optimizer state for {} params, model has {}", state.m.len(), params.len())));
    }
    let adam = AdamConfig::default();
    let mut rows = Vec::new();
    let start = state.step as usize;
    for iter in start..rl.steps {
        let old = params.clone();
        let mut pick = substream(rl.seed, "batch", iter as u64);
        let batch: Vec<&Instance> =
            (0..rl.batch_prompts).map(|_| &train_set[rand::Rng::random_range(&mut pick, 0..train_set.len())]).collect();
        let groups: Vec<RolloutGroup> = batch
            .par_iter()
            .enumerate()
            .map(|(b, inst)| rollout_group(&old, inst, rl, sampler, iter, b * rl.group_size))
            .collect::<Result<_>>()?;
        let mut tau_rng = substream(rl.seed, "tau", iter as u64);
        let taus = tau_draws(&groups, &mut tau_rng);
        let LossOutput { objective, grads } = match rl.variant {
            Variant::D1 => d1_loss(&old, &old, &groups, rl)?,
            Variant::TwoMf => diffpo_model_loss(&old, &old, &groups, &taus, rl, false)?,
            Variant::TwoMfIs => diffpo_model_loss(&old, &old, &groups, &taus, rl, true)?,
            Variant::Joint => joint_loss(&old, &old, &groups, &taus, rl)?,
        };
        if !objective.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            let rewards: Vec<Vec<f64>> = groups.iter().map(|g| g.rewards.clone()).collect();
            return Err(Error::Diverged(format!(
                "iteration {iter}: objective {objective}, non-finite grads {}, rewards {rewards:?}, taus {taus:?}",
                grads.iter().filter(|g| !g.is_finite()).count()
            )));
        }
        let mut descent: Vec<f64> = grads.iter().map(|g| -g).collect();
        clip_grad_norm(&mut descent, rl.grad_clip);
        adam_step(&mut params.data, &descent, state, rl.lr, &adam)?;

        let all: Vec<&crate::samplers::Trajectory> = groups.iter().flat_map(|g| &g.trajectories).collect();
        let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
        let (reward_mean, reward_std) = mean_std(&rewards);
        let nfe: Vec<f64> = all.iter().map(|t| t.nfe as f64).collect();
        let ets: Vec<f64> = all.iter().map(|t| effective_tokens(t.completion.tokens()) as f64).collect();
        let gamma_mean = match (rl.variant, sampler.strategy) {
            (Variant::Joint, _) => mean_std(&groups.iter().flat_map(|g| g.thresholds.iter().flatten().map(|t| t.gamma)).collect::<Vec<_>>()).0,
            (_, Strategy::Eb) => sampler.gamma,
            _ => f64::NAN,
        };
        let last = iter + 1 == rl.steps;
        let due = rl.eval_every > 0 && (iter + 1) % rl.eval_every == 0;
        let accuracy = if !eval_set.is_empty() && (last || due) {
            let head = (rl.variant == Variant::Joint).then_some(rl);
            evaluate_instances(params, eval_set, sampler, head)?.accuracy
        } else {
            f64::NAN
        };
        let row = MetricsRow {
            iter,
            variant: rl.variant,
            reward_mean,
            reward_std,
            accuracy,
            nfe_mean: mean_std(&nfe).0,
            ets_mean: mean_std(&ets).0,
            gamma_mean,
            loss: objective,
        };
        on_iter(&row, params, state)?;
        rows.push(row);
    }
    Ok(rows)
}
