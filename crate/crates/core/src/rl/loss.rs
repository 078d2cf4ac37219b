use rand::Rng as _;
use rayon::prelude::*;

use crate::denoiser::{backward, DenoiserParams};
use crate::error::{Error, Result};
use crate::likelihood::{
    conditioning_plan, evaluate_plan, evaluate_plan_cached, recorded_likelihoods, Conditioning, LikelihoodMode,
};
use crate::rng::Rng;
use crate::samplers::Trajectory;

use super::{clipped_term, clipped_term_grad, threshold_features, threshold_log_likelihood, RLConfig, RolloutGroup};

/// Objective value (to maximize) and its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub objective: f64,
    pub grads: Vec<f64>,
}

#[derive(Clone, Copy)]
enum Unit {
    /// One ratio per unmasked position.
    Token,
    /// One ratio per decode step (product over its positions).
    Step,
}

#[derive(Clone, Copy)]
struct TermSpec {
    unit: Unit,
    eps: f64,
    is_cap: Option<f64>,
}

/// One uniformly drawn split step per completion, in `0..num_steps`.
pub fn tau_draws(groups: &[RolloutGroup], rng: &mut Rng) -> Vec<Vec<usize>> {
    groups
        .iter()
        .map(|g| g.trajectories.iter().map(|t| rng.random_range(0..t.num_steps().max(1))).collect())
        .collect()
}

/// `min(C, exp(log_ratio))`.
pub fn capped_weight(log_ratio: f64, cap: f64) -> f64 {
    cap.min(log_ratio.exp())
}

fn weights_from(surrogate_sums: &[f64], traj: &Trajectory, cap: f64) -> Result<Vec<f64>> {
    let rec = recorded_likelihoods(traj)?.step_sums();
    Ok(surrogate_sums.iter().zip(&rec).map(|(s, t)| capped_weight(s - t, cap)).collect())
}

/// Per-step importance weights `min(C, pi_old(o^t | c, z^{s_tau(t)}) / pi_old(o^t | c, z^{t-1}))`,
/// the denominator taken from the conditionals recorded at decode time.
pub fn importance_weights(old: &DenoiserParams, traj: &Trajectory, tau: usize, cap: f64) -> Result<Vec<f64>> {
    let lp = evaluate_plan(old, traj, &conditioning_plan(traj, LikelihoodMode::TwoMf { tau })?)?;
    weights_from(&lp.step_sums(), traj, cap)
}

fn check_groups(groups: &[RolloutGroup]) -> Result<()> {
    if groups.is_empty() {
        return Err(Error::InvalidArgument("no rollout groups".into()));
    }
    for (gi, g) in groups.iter().enumerate() {
        if g.trajectories.len() != g.advantages.len() || g.trajectories.len() != g.rewards.len() {
            return Err(Error::Shape(format!("group {gi}: trajectory/advantage count mismatch")));
        }
        if let Some(t) = g.trajectories.iter().find(|t| t.prompt != g.prompt) {
            return Err(Error::Shape(format!("group {gi}: trajectory prompt {:?} differs from group prompt", t.prompt.0)));
        }
    }
    Ok(())
}

fn same_params(a: &DenoiserParams, b: &DenoiserParams) -> bool {
    std::ptr::eq(a, b)
}

/// Clipped surrogate of one trajectory, scaled by `coef`; gradients for the
/// current parameters are accumulated into `grads`.
fn trajectory_term(
    params: &DenoiserParams,
    old: &DenoiserParams,
    traj: &Trajectory,
    mode: LikelihoodMode,
    adv: f64,
    coef: f64,
    spec: TermSpec,
    grads: &mut [f64],
) -> Result<f64> {
    if adv == 0.0 {
        return Ok(0.0);
    }
    let plan: Vec<Conditioning> = conditioning_plan(traj, mode)?.into_iter().filter(|c| !c.steps.is_empty()).collect();
    let cur = evaluate_plan_cached(params, traj, &plan)?;
    let old_lp = if same_params(params, old) { cur.likelihoods.clone() } else { evaluate_plan(old, traj, &plan)? };
    let weights: Vec<f64> = match spec.is_cap {
        None => vec![1.0; traj.num_steps()],
        Some(cap) => weights_from(&old_lp.step_sums(), traj, cap)?,
    };
    let mut pass_of = vec![0; traj.num_steps()];
    for (pi, c) in plan.iter().enumerate() {
        for &s in &c.steps {
            pass_of[s] = pi;
        }
    }
    let vsz = params.config.vocab.size;
    let p_len = traj.prompt.len();
    let mut dlogits: Vec<Vec<f64>> = cur.passes.iter().map(|(o, _)| vec![0.0; o.logits.len()]).collect();
    let mut objective = 0.0;
    for s in 0..traj.num_steps() {
        let step = &traj.steps[s];
        let units: Vec<Vec<usize>> = match spec.unit {
            Unit::Token => (0..step.positions.len()).map(|j| vec![j]).collect(),
            Unit::Step => vec![(0..step.positions.len()).collect()],
        };
        let (out, _) = &cur.passes[pass_of[s]];
        for unit in units {
            let lp: f64 = unit.iter().map(|&j| cur.likelihoods.steps[s][j]).sum();
            let lpo: f64 = unit.iter().map(|&j| old_lp.steps[s][j]).sum();
            let ratio = (lp - lpo).exp();
            objective += coef * weights[s] * clipped_term(ratio, adv, spec.eps);
            let g = coef * weights[s] * clipped_term_grad(ratio, adv, spec.eps) * ratio;
            if g == 0.0 {
                continue;
            }
            let dl = &mut dlogits[pass_of[s]];
            for &j in &unit {
                let pos = step.positions[j];
                let row = p_len + pos;
                let probs = out.probs_at(row);
                let tok = traj.completion.0[pos] as usize;
                for (v, p) in probs.iter().enumerate() {
                    dl[row * vsz + v] -= g * p;
                }
                dl[row * vsz + tok] += g;
            }
        }
    }
    for ((_, cache), dl) in cur.passes.iter().zip(&dlogits) {
        if dl.iter().any(|&x| x != 0.0) {
            backward(params, cache, dl, grads)?;
        }
    }
    Ok(objective)
}

fn ladder_objective(
    params: &DenoiserParams,
    old: &DenoiserParams,
    groups: &[RolloutGroup],
    modes: &(dyn Fn(usize, usize) -> LikelihoodMode + Sync),
    spec: TermSpec,
) -> Result<LossOutput> {
    check_groups(groups)?;
    let n_groups = groups.len() as f64;
    let jobs: Vec<(usize, usize)> =
        groups.iter().enumerate().flat_map(|(gi, g)| (0..g.size()).map(move |i| (gi, i))).collect();
    let parts: Vec<Result<(f64, Vec<f64>)>> = jobs
        .par_iter()
        .map(|&(gi, i)| {
            let g = &groups[gi];
            let traj = &g.trajectories[i];
            let coef = 1.0 / (traj.completion.len() as f64 * n_groups);
            let mut grads = params.zero_grads();
            let obj = trajectory_term(params, old, traj, modes(gi, i), g.advantages[i], coef, spec, &mut grads)?;
            Ok((obj, grads))
        })
        .collect();
    let mut objective = 0.0;
    let mut grads = params.zero_grads();
    for part in parts {
        let (o, g) = part?;
        objective += o;
        for (a, b) in grads.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok(LossOutput { objective, grads })
}

/// Token-level clipped objective with mean-field ratios `pi(o^k | c)`.
pub fn d1_loss(params: &DenoiserParams, old: &DenoiserParams, groups: &[RolloutGroup], cfg: &RLConfig) -> Result<LossOutput> {
    let spec = TermSpec { unit: Unit::Token, eps: cfg.clip_eps, is_cap: None };
    ladder_objective(params, old, groups, &|_, _| LikelihoodMode::MeanField, spec)
}

/// Step-level clipped objective with two-times mean-field ratios and, when
/// `importance` is set, capped weights `min(C, pi_old^2MF / pi_old^true)`.
pub fn diffpo_model_loss(
    params: &DenoiserParams,
    old: &DenoiserParams,
    groups: &[RolloutGroup],
    taus: &[Vec<usize>],
    cfg: &RLConfig,
    importance: bool,
) -> Result<LossOutput> {
    if taus.len() != groups.len() || taus.iter().zip(groups).any(|(t, g)| t.len() != g.size()) {
        return Err(Error::Shape("tau draws do not match the rollout groups".into()));
    }
    let spec = TermSpec { unit: Unit::Step, eps: cfg.clip_eps, is_cap: importance.then_some(cfg.is_cap) };
    ladder_objective(params, old, groups, &|gi, i| LikelihoodMode::TwoMf { tau: taus[gi][i] }, spec)
}

/// Pooled features of each group's prompt under `params`.
pub fn prompt_features(params: &DenoiserParams, groups: &[RolloutGroup]) -> Result<Vec<Vec<f64>>> {
    groups
        .iter()
        .map(|g| {
            let len = g.trajectories.first().map(|t| t.completion.len()).unwrap_or(0);
            threshold_features(params, &g.prompt, len)
        })
        .collect()
}

fn sampler_term(
    params: &DenoiserParams,
    groups: &[RolloutGroup],
    pooled: &[Vec<f64>],
    cfg: &RLConfig,
    mut grads: Option<&mut [f64]>,
) -> Result<f64> {
    check_groups(groups)?;
    let sigma = cfg.sigma_explore;
    let w = params.threshold_head();
    let wr = params.layout.thresh_w.clone();
    let n_groups = groups.len() as f64;
    let mut objective = 0.0;
    for (gi, g) in groups.iter().enumerate() {
        let samples = g.thresholds.as_ref().ok_or_else(|| Error::InvalidArgument(format!("group {gi} has no threshold samples")))?;
        let f = &pooled[gi];
        let mean = w.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() + cfg.beta();
        for (i, ts) in samples.iter().enumerate() {
            let adv = g.advantages[i];
            let coef = 1.0 / (g.trajectories[i].completion.len() as f64 * n_groups);
            let ratio = (threshold_log_likelihood(mean, sigma, ts.logit)? - threshold_log_likelihood(ts.old_mean, sigma, ts.logit)?).exp();
            objective += coef * clipped_term(ratio, adv, cfg.clip_eps);
            if let Some(gr) = grads.as_deref_mut() {
                let d = coef * clipped_term_grad(ratio, adv, cfg.clip_eps) * ratio * (ts.logit - mean) / (sigma * sigma);
                for (k, fk) in f.iter().enumerate() {
                    gr[wr.start + k] += d * fk;
                }
            }
        }
    }
    Ok(objective)
}

/// Threshold-head term with the denoiser features held fixed: gradients
/// reach only the head weights.
pub fn sampler_loss(params: &DenoiserParams, groups: &[RolloutGroup], cfg: &RLConfig) -> Result<LossOutput> {
    let pooled = prompt_features(params, groups)?;
    let mut grads = params.zero_grads();
    let objective = sampler_term(params, groups, &pooled, cfg, Some(&mut grads))?;
    Ok(LossOutput { objective, grads })
}

/// Threshold-head term evaluated on externally supplied (frozen) features.
pub fn sampler_objective_frozen(params: &DenoiserParams, groups: &[RolloutGroup], pooled: &[Vec<f64>], cfg: &RLConfig) -> Result<f64> {
    sampler_term(params, groups, pooled, cfg, None)
}

/// Importance-weighted model term plus the threshold-head term.
pub fn joint_loss(
    params: &DenoiserParams,
    old: &DenoiserParams,
    groups: &[RolloutGroup],
    taus: &[Vec<usize>],
    cfg: &RLConfig,
) -> Result<LossOutput> {
    let mut model = diffpo_model_loss(params, old, groups, taus, cfg, true)?;
    let samp = sampler_loss(params, groups, cfg)?;
    model.objective += samp.objective;
    for (a, b) in model.grads.iter_mut().zip(&samp.grads) {
        *a += b;
    }
    Ok(model)
}
