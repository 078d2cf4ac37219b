//! Likelihood approximations of a recorded decode.
//!
//! A trajectory's true likelihood conditions step `t` on the latent `z^{t-1}`
//! it was decoded from. The mean-field approximation conditions every step on
//! the prompt alone (`z^0`); the two-times mean-field approximation uses `z^0`
//! up to a split step `tau` and `z^tau` afterwards. All three are evaluated
//! through a [`Conditioning`] plan: which latent each step reads from.

use serde::Serialize;

use crate::denoiser::{forward, forward_with_cache, DenoiserParams, ForwardCache, ForwardOutput};
use crate::error::{Error, Result};
use crate::rng::substream;
use crate::samplers::{decode, SamplerConfig, Trajectory};
use crate::mdm::TokenSeq;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum LikelihoodMode {
    TrueStep,
    MeanField,
    TwoMf { tau: usize },
}

impl LikelihoodMode {
    /// Latent index the likelihood of 1-based step `t` conditions on.
    pub fn conditioning_time(&self, t: usize) -> usize {
        match *self {
            LikelihoodMode::TrueStep => t - 1,
            LikelihoodMode::MeanField => 0,
            LikelihoodMode::TwoMf { tau } => step_function(tau, t),
        }
    }
}

/// `s_tau(t) = tau` if `t > tau`, else `0`.
pub fn step_function(tau: usize, t: usize) -> usize {
    if t > tau {
        tau
    } else {
        0
    }
}

/// Per step, per newly unmasked position log-probabilities.
#[derive(Clone, Debug, PartialEq)]
pub struct StepLikelihoods {
    pub steps: Vec<Vec<f64>>,
}

impl StepLikelihoods {
    /// Log-likelihood of each step's token set.
    pub fn step_sums(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.iter().sum()).collect()
    }

    pub fn total(&self) -> f64 {
        self.steps.iter().flatten().sum()
    }
}

/// A group of steps that share one conditioning latent.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Conditioning {
    pub latent_time: usize,
    /// 0-based step indices.
    pub steps: Vec<usize>,
}

/// Which forward passes a mode needs for `traj`: mean-field one, two-times
/// mean-field two, true likelihood one per step.
pub fn conditioning_plan(traj: &Trajectory, mode: LikelihoodMode) -> Result<Vec<Conditioning>> {
    let n = traj.num_steps();
    match mode {
        LikelihoodMode::TrueStep => Ok((0..n).map(|i| Conditioning { latent_time: i, steps: vec![i] }).collect()),
        LikelihoodMode::MeanField => Ok(vec![Conditioning { latent_time: 0, steps: (0..n).collect() }]),
        LikelihoodMode::TwoMf { tau } => {
            if tau >= n.max(1) {
                return Err(Error::OutOfRange { index: tau, max: n.saturating_sub(1) });
            }
            let (early, late): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| i + 1 <= tau);
            Ok(vec![Conditioning { latent_time: 0, steps: early }, Conditioning { latent_time: tau, steps: late }])
        }
    }
}

fn read_step(out: &ForwardOutput, traj: &Trajectory, step: usize) -> Vec<f64> {
    let p_len = traj.prompt.len();
    traj.steps[step]
        .positions
        .iter()
        .map(|&pos| out.log_probs_at(p_len + pos)[traj.completion.0[pos] as usize])
        .collect()
}

/// Evaluate a plan; one forward pass per plan entry.
pub fn evaluate_plan(params: &DenoiserParams, traj: &Trajectory, plan: &[Conditioning]) -> Result<StepLikelihoods> {
    let mut steps = vec![Vec::new(); traj.num_steps()];
    for c in plan {
        let out = forward(params, &traj.sequence_at(c.latent_time)?, traj.prompt.len())?;
        for &s in &c.steps {
            steps[s] = read_step(&out, traj, s);
        }
    }
    Ok(StepLikelihoods { steps })
}

/// Forward outputs and caches of a plan, kept for backpropagation.
pub struct PlanPasses {
    pub passes: Vec<(ForwardOutput, ForwardCache)>,
    pub likelihoods: StepLikelihoods,
}

pub fn evaluate_plan_cached(params: &DenoiserParams, traj: &Trajectory, plan: &[Conditioning]) -> Result<PlanPasses> {
    let mut steps = vec![Vec::new(); traj.num_steps()];
    let mut passes = Vec::with_capacity(plan.len());
    for c in plan {
        let (out, cache) = forward_with_cache(params, &traj.sequence_at(c.latent_time)?, traj.prompt.len())?;
        for &s in &c.steps {
            steps[s] = read_step(&out, traj, s);
        }
        passes.push((out, cache));
    }
    Ok(PlanPasses { passes, likelihoods: StepLikelihoods { steps } })
}

pub fn likelihoods(params: &DenoiserParams, traj: &Trajectory, mode: LikelihoodMode) -> Result<StepLikelihoods> {
    evaluate_plan(params, traj, &conditioning_plan(traj, mode)?)
}

/// `log pi(o^t | c, z^{t-1})` for every step; one forward pass per step.
pub fn true_step_likelihoods(params: &DenoiserParams, traj: &Trajectory) -> Result<StepLikelihoods> {
    likelihoods(params, traj, LikelihoodMode::TrueStep)
}

/// `log pi(o^k | c)` read from a single pass on the fully masked completion.
pub fn mean_field_likelihoods(params: &DenoiserParams, traj: &Trajectory) -> Result<StepLikelihoods> {
    likelihoods(params, traj, LikelihoodMode::MeanField)
}

/// Steps `t <= tau` read from `z^0`, steps `t > tau` from `z^tau`; two passes.
pub fn two_mf_likelihoods(params: &DenoiserParams, traj: &Trajectory, tau: usize) -> Result<StepLikelihoods> {
    likelihoods(params, traj, LikelihoodMode::TwoMf { tau })
}

/// True-step log-likelihoods taken from the conditionals stored at decode time.
pub fn recorded_likelihoods(traj: &Trajectory) -> Result<StepLikelihoods> {
    let steps = traj
        .steps
        .iter()
        .map(|st| {
            st.positions
                .iter()
                .zip(&st.conditionals)
                .map(|(&pos, row)| {
                    let p = row[traj.completion.0[pos] as usize];
                    if p > 0.0 {
                        Ok(p.ln())
                    } else {
                        Err(Error::NonFinite { what: "recorded conditional", index: pos })
                    }
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(StepLikelihoods { steps })
}

/// `KL(p || q)` in nats over the ordinary-token simplex.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).filter(|(&a, _)| a > 0.0).map(|(&a, &b)| a * (a / b).ln()).sum::<f64>().max(0.0)
}

/// Per step mean `KL(pi(.|c,z^{t-1}) || pi(.|c,z^s))` over the positions unmasked at
/// that step, for every step of `traj`. `latent_for_step(t)` gives `s`.
fn step_kls(params: &DenoiserParams, traj: &Trajectory, latent_for_step: impl Fn(usize) -> usize) -> Result<Vec<f64>> {
    let p_len = traj.prompt.len();
    let mut cache: Vec<Option<ForwardOutput>> = vec![None; traj.num_steps() + 1];
    let mut kls = Vec::with_capacity(traj.num_steps());
    for st in &traj.steps {
        let s = latent_for_step(st.time);
        if cache[s].is_none() {
            cache[s] = Some(forward(params, &traj.sequence_at(s)?, p_len)?);
        }
        let out = cache[s].as_ref().expect("filled");
        let mut acc = 0.0;
        for (&pos, truth) in st.positions.iter().zip(&st.conditionals) {
            acc += kl_divergence(truth, &out.probs_at(p_len + pos));
        }
        kls.push(acc / st.positions.len() as f64);
    }
    Ok(kls)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct KlRow {
    pub step_index: usize,
    pub mean_kl: f64,
    pub n_samples: usize,
}

/// Decode every prompt and average, per decode step, the KL between the
/// true conditional and the approximation selected by `mode`.
///
/// The prompt at index `i` is decoded with substream `(seed, "diag", i)`.
pub fn kl_by_timestep(
    params: &DenoiserParams,
    prompts: &[TokenSeq],
    cfg: &SamplerConfig,
    mode: LikelihoodMode,
    seed: u64,
) -> Result<Vec<KlRow>> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("no prompts".into()));
    }
    let mut sums: Vec<(f64, usize)> = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let traj = decode(params, prompt, cfg, &mut substream(seed, "diag", i as u64))?;
        let kls = step_kls(params, &traj, |t| mode.conditioning_time(t))?;
        if sums.len() < kls.len() {
            sums.resize(kls.len(), (0.0, 0));
        }
        for (slot, k) in sums.iter_mut().zip(kls) {
            slot.0 += k;
            slot.1 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(i, (s, n))| KlRow { step_index: i + 1, mean_kl: s / n as f64, n_samples: n })
        .collect())
}

pub fn kl_rows_csv(rows: &[KlRow]) -> String {
    let mut out = String::from("step_index,mean_kl,n_samples\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.step_index, r.mean_kl, r.n_samples));
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Assumption1Probe {
    pub t: usize,
    /// `(tau, mean KL, n trajectories)` for `tau = 0..t`.
    pub curve: Vec<(usize, f64, usize)>,
    /// Fraction of adjacent `tau` pairs where the curve does not increase.
    pub nonincreasing_fraction: f64,
}

/// `f(tau; t) = KL(pi(.|c,z^{t-1}) || pi(.|c,z^tau))` averaged over the
/// trajectories that reach step `t`.
pub fn assumption1_probe(params: &DenoiserParams, trajectories: &[Trajectory], t: usize) -> Result<Assumption1Probe> {
    if t < 2 {
        return Err(Error::InvalidArgument(format!("probe needs t >= 2, got {t}")));
    }
    let mut sums = vec![0.0; t];
    let mut n = 0;
    for traj in trajectories.iter().filter(|tr| tr.num_steps() >= t) {
        let st = &traj.steps[t - 1];
        let p_len = traj.prompt.len();
        for (tau, slot) in sums.iter_mut().enumerate() {
            let out = forward(params, &traj.sequence_at(tau)?, p_len)?;
            let mut acc = 0.0;
            for (&pos, truth) in st.positions.iter().zip(&st.conditionals) {
                acc += kl_divergence(truth, &out.probs_at(p_len + pos));
            }
            *slot += acc / st.positions.len() as f64;
        }
        n += 1;
    }
    let curve: Vec<(usize, f64, usize)> =
        sums.iter().enumerate().map(|(tau, &s)| (tau, if n > 0 { s / n as f64 } else { f64::NAN }, n)).collect();
    let pairs = curve.windows(2).count();
    let ok = curve.windows(2).filter(|w| w[1].1 <= w[0].1 + 1e-12).count();
    let frac = if pairs == 0 { 1.0 } else { ok as f64 / pairs as f64 };
    Ok(Assumption1Probe { t, curve, nonincreasing_fraction: frac })
}

/// Mean over trajectories, steps and uniform `tau` of `KL(true || 2-MF)`,
/// alongside the mean over trajectories and steps of `KL(true || mean-field)`.
pub fn two_mf_vs_mean_field_kl(params: &DenoiserParams, trajectories: &[Trajectory]) -> Result<(f64, f64)> {
    if trajectories.is_empty() {
        return Err(Error::InvalidArgument("no trajectories".into()));
    }
    let mut two_mf = 0.0;
    let mut mf = 0.0;
    for traj in trajectories {
        let n = traj.num_steps();
        let p_len = traj.prompt.len();
        let outs = (0..n).map(|s| forward(params, &traj.sequence_at(s)?, p_len)).collect::<Result<Vec<_>>>()?;
        let kl_from = |s: usize, step: usize| -> f64 {
            let st = &traj.steps[step];
            st.positions
                .iter()
                .zip(&st.conditionals)
                .map(|(&pos, truth)| kl_divergence(truth, &outs[s].probs_at(p_len + pos)))
                .sum::<f64>()
                / st.positions.len() as f64
        };
        let mut acc_2 = 0.0;
        for tau in 0..n {
            for step in 0..n {
                acc_2 += kl_from(step_function(tau, step + 1), step);
            }
        }
        two_mf += acc_2 / (n * n) as f64;
        mf += (0..n).map(|step| kl_from(0, step)).sum::<f64>() / n as f64;
    }
    let m = trajectories.len() as f64;
    Ok((two_mf / m, mf / m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{forward_calls, init_params, reset_forward_calls, DenoiserConfig};
    use crate::mdm::Vocab;
    use crate::rng::seeded;
    use crate::samplers::Strategy;

    fn setup() -> (DenoiserParams, Trajectory) {
        let vocab = Vocab::new(5, 3, 4).unwrap();
        let cfg = DenoiserConfig { embed_dim: 8, num_layers: 1, num_heads: 2, ffn_dim: 8, ..DenoiserConfig::new(vocab, 9, 3) };
        let p = init_params(&cfg).unwrap();
        let sc = SamplerConfig { max_len: 6, block_size: 3, ..SamplerConfig::default() };
        let t = decode(&p, &TokenSeq(vec![0, 1, 2]), &sc, &mut seeded(8)).unwrap();
        (p, t)
    }

    #[test]
    fn step_function_values() {
        assert_eq!(step_function(3, 5), 3);
        assert_eq!(step_function(3, 2), 0);
        assert_eq!(step_function(3, 3), 0);
        assert_eq!(step_function(0, 7), 0);
    }

    #[test]
    fn recompute_matches_record() {
        let (p, t) = setup();
        let a = true_step_likelihoods(&p, &t).unwrap();
        let b = recorded_likelihoods(&t).unwrap();
        for (x, y) in a.steps.iter().flatten().zip(b.steps.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn coincidences_and_budgets() {
        let (p, t) = setup();
        let n = t.num_steps();
        reset_forward_calls();
        let mf = mean_field_likelihoods(&p, &t).unwrap();
        assert_eq!(forward_calls(), 1);
        reset_forward_calls();
        let truth = true_step_likelihoods(&p, &t).unwrap();
        assert_eq!(forward_calls() as usize, n);
        reset_forward_calls();
        let two0 = two_mf_likelihoods(&p, &t, 0).unwrap();
        assert_eq!(forward_calls(), 2);
        assert_eq!(two0, mf);
        for tau in 1..n {
            let two = two_mf_likelihoods(&p, &t, tau).unwrap();
            assert_eq!(two.steps[tau], truth.steps[tau]);
            assert_eq!(two.steps[0], mf.steps[0]);
        }
        assert!(two_mf_likelihoods(&p, &t, n).is_err());
        assert_eq!(mf.steps[0], truth.steps[0]);
    }

    #[test]
    fn kl_modes() {
        let (p, _) = setup();
        let prompts = vec![TokenSeq(vec![0, 1, 2]), TokenSeq(vec![2, 2, 1])];
        let sc = SamplerConfig { max_len: 6, block_size: 3, ..SamplerConfig::default() };
        let rows = kl_by_timestep(&p, &prompts, &sc, LikelihoodMode::TrueStep, 1).unwrap();
        assert!(rows.iter().all(|r| r.mean_kl.abs() < 1e-12));
        let rows = kl_by_timestep(&p, &prompts, &sc, LikelihoodMode::MeanField, 1).unwrap();
        assert!(rows[0].mean_kl.abs() < 1e-12);
        assert!(rows.iter().all(|r| r.mean_kl >= 0.0 && r.n_samples == 2));
        assert!(kl_rows_csv(&rows).starts_with("step_index,mean_kl,n_samples\n"));
        assert!(kl_by_timestep(&p, &[], &sc, LikelihoodMode::MeanField, 1).is_err());
    }

    #[test]
    fn probe_endpoints() {
        let (p, t) = setup();
        let probe = assumption1_probe(&p, std::slice::from_ref(&t), 4).unwrap();
        assert!(probe.curve[3].1.abs() < 1e-12);
        let mf = step_kls(&p, &t, |_| 0).unwrap();
        assert!((probe.curve[0].1 - mf[3]).abs() < 1e-12);
        assert!(assumption1_probe(&p, &[t], 1).is_err());
    }

    #[test]
    fn single_step_trajectories_collapse() {
        let (p, _) = setup();
        let sc = SamplerConfig { strategy: Strategy::Eb, gamma: 1e9, max_len: 4, block_size: 4, ..SamplerConfig::default() };
        let t = decode(&p, &TokenSeq(vec![0, 1]), &sc, &mut seeded(0)).unwrap();
        assert_eq!(t.num_steps(), 1);
        let a = true_step_likelihoods(&p, &t).unwrap();
        assert_eq!(a, mean_field_likelihoods(&p, &t).unwrap());
        assert_eq!(a, two_mf_likelihoods(&p, &t, 0).unwrap());
    }
}
