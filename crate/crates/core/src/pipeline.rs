//! End-to-end stages shared by the command line and the experiment suite.

use std::fmt::Write as _;

use crate::config::RunConfig;
use crate::denoiser::{init_params, pretrain, AdamState, DenoiserParams, PretrainExample, PretrainLog};
use crate::error::Result;
use crate::mdm::build_schedule;
use crate::rl::{train, MetricsRow};
use crate::rng::derive_seed;
use crate::tasks::{generate, pretrain_corpus, Instance, Split};

/// Pretraining corpus and held-out set.
pub fn corpora(cfg: &RunConfig) -> Result<(Vec<PretrainExample>, Vec<PretrainExample>)> {
    let p = &cfg.pretrain;
    let len = cfg.sampler.max_len;
    let spec = &cfg.task.spec;
    let corpus = pretrain_corpus(spec, Split::Train, p.corpus_size, derive_seed(cfg.seed, "corpus", 0), p.correct_fraction, len)?;
    let heldout = pretrain_corpus(spec, Split::Eval, p.heldout_size.max(1), derive_seed(cfg.seed, "heldout", 0), p.correct_fraction, len)?;
    Ok((corpus, heldout))
}

pub fn run_pretrain(cfg: &RunConfig) -> Result<(DenoiserParams, PretrainLog)> {
    cfg.validate()?;
    let mut params = init_params(&cfg.denoiser_config())?;
    let (corpus, heldout) = corpora(cfg)?;
    let schedule = build_schedule(&cfg.denoiser.schedule, cfg.denoiser.schedule_steps)?;
    let log = pretrain(&mut params, &corpus, &heldout, &schedule, &cfg.pretrain_config())?;
    Ok((params, log))
}

pub fn pretrain_log_csv(log: &PretrainLog) -> String {
    let mut s = String::from("step,train_loss,heldout_ce\n");
    for (step, loss, ce) in &log.rows {
        let _ = writeln!(s, "{step},{loss:.6},{ce:.6}");
    }
    s
}

/// RL prompt pool and held-out evaluation instances.
pub fn task_sets(cfg: &RunConfig) -> Result<(Vec<Instance>, Vec<Instance>)> {
    let spec = &cfg.task.spec;
    Ok((generate(spec, Split::Train, cfg.task.train_size, spec.train_seed)?, generate(spec, Split::Eval, cfg.task.eval_size, spec.eval_seed)?))
}

/// RL from `params` (optionally resuming `state`), returning the trained
/// parameters, optimizer state and metrics rows.
pub fn run_rl(
    cfg: &RunConfig,
    params: &DenoiserParams,
    state: Option<AdamState>,
    on_iter: &mut dyn FnMut(&MetricsRow, &DenoiserParams, &AdamState) -> Result<()>,
) -> Result<(DenoiserParams, AdamState, Vec<MetricsRow>)> {
    cfg.validate()?;
    let (train_set, eval_set) = task_sets(cfg)?;
    let mut params = params.clone();
    let mut state = state.unwrap_or_else(|| AdamState::new(params.len()));
    let rows = train(&mut params, &mut state, &train_set, &eval_set, &cfg.rl_config(), &cfg.sampler, on_iter)?;
    Ok((params, state, rows))
}
