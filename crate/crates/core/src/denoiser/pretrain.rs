//! Masked-denoising pretraining that yields the base policy.
//!
//! Each example draws a grid time `t`, masks its completion with
//! `forward_mask`, and pays cross-entropy on the masked positions weighted by
//! `1 / (1 - alpha_t)` (the usual MDLM weighting for a linear schedule).

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::mdm::{forward_mask, NoiseSchedule, Token, TokenSeq};
use crate::rng::{substream, Rng};

use super::{adam_step, backward, clip_grad_norm, forward_with_cache, AdamConfig, AdamState, DenoiserParams};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PretrainExample {
    pub prompt: Vec<Token>,
    pub completion: Vec<Token>,
}

/// One masked training sequence with its supervised targets.
#[derive(Clone, Debug)]
pub struct MaskedItem {
    pub tokens: Vec<Token>,
    pub prompt_len: usize,
    /// `(sequence position, target token)`.
    pub targets: Vec<(usize, Token)>,
    pub weight: f64,
    pub completion_len: usize,
}

fn mask_example(ex: &PretrainExample, params: &DenoiserParams, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<MaskedItem> {
    let vocab = &params.config.vocab;
    let t = rng.random_range(1..=schedule.num_steps);
    let clean = TokenSeq::new(ex.completion.clone(), vocab)?;
    let z = forward_mask(&clean, t, schedule, vocab, rng)?;
    let alpha = schedule.alpha_at(t)?;
    let p = ex.prompt.len();
    let mut tokens = ex.prompt.clone();
    tokens.extend_from_slice(&z.tokens);
    let targets = z
        .tokens
        .iter()
        .enumerate()
        .filter(|(_, &tok)| tok == vocab.mask_id)
        .map(|(i, _)| (p + i, ex.completion[i]))
        .collect();
    Ok(MaskedItem { tokens, prompt_len: p, targets, weight: 1.0 / (1.0 - alpha), completion_len: ex.completion.len() })
}

/// Weighted masked cross-entropy averaged over `items`, with exact gradients.
pub fn pretrain_objective(params: &DenoiserParams, items: &[MaskedItem]) -> Result<(f64, Vec<f64>)> {
    if items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let vsz = params.config.vocab.size;
    let mut grads = params.zero_grads();
    let mut loss = 0.0;
    let scale_b = 1.0 / items.len() as f64;
    for item in items {
        if item.targets.is_empty() {
            continue;
        }
        let (out, cache) = forward_with_cache(params, &item.tokens, item.prompt_len)?;
        let coef = item.weight * scale_b / item.completion_len as f64;
        let mut dlogits = vec![0.0; item.tokens.len() * vsz];
        for &(pos, tgt) in &item.targets {
            let lp = out.log_probs_at(pos);
            loss += -lp[tgt as usize] * coef;
            let row = &mut dlogits[pos * vsz..(pos + 1) * vsz];
            for (v, g) in row.iter_mut().enumerate() {
                *g = coef * lp[v].exp();
            }
            row[tgt as usize] -= coef;
        }
        backward(params, &cache, &dlogits, &mut grads)?;
    }
    Ok((loss, grads))
}

/// Sample masks for `batch` and return the loss with its gradient.
pub fn pretrain_step(
    params: &DenoiserParams,
    batch: &[PretrainExample],
    schedule: &NoiseSchedule,
    rng: &mut Rng,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let items = batch.iter().map(|ex| mask_example(ex, params, schedule, rng)).collect::<Result<Vec<_>>>()?;
    pretrain_objective(params, &items)
}

/// Masked items for `batch` with masks drawn from `seed` (reproducible objective).
pub fn build_masked_items(params: &DenoiserParams, batch: &[PretrainExample], schedule: &NoiseSchedule, seed: u64) -> Result<Vec<MaskedItem>> {
    let mut rng = substream(seed, "mask", 0);
    batch.iter().map(|ex| mask_example(ex, params, schedule, &mut rng)).collect()
}

/// Mean unweighted cross-entropy per masked completion token, with masks drawn from `seed`.
pub fn held_out_ce(params: &DenoiserParams, examples: &[PretrainExample], schedule: &NoiseSchedule, seed: u64) -> Result<f64> {
    let mut rng = substream(seed, "heldout", 0);
    let mut total = 0.0;
    let mut count = 0usize;
    for ex in examples {
        let item = mask_example(ex, params, schedule, &mut rng)?;
        if item.targets.is_empty() {
            continue;
        }
        let (out, _) = forward_with_cache(params, &item.tokens, item.prompt_len)?;
        for &(pos, tgt) in &item.targets {
            total -= out.log_probs_at(pos)[tgt as usize];
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument("held-out set produced no masked tokens".into()));
    }
    Ok(total / count as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 1500, batch_size: 32, lr: 3e-3, warmup: 50, grad_clip: 1.0, seed: 0, eval_every: 100 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainLog {
    /// `(step, train loss, held-out CE)`; held-out CE is `NaN` on steps without evaluation.
    pub rows: Vec<(usize, f64, f64)>,
    pub initial_heldout_ce: f64,
    pub final_heldout_ce: f64,
}

/// Adam pretraining on a fixed corpus with linear warmup then cosine decay to 10%.
pub fn pretrain(
    params: &mut DenoiserParams,
    corpus: &[PretrainExample],
    heldout: &[PretrainExample],
    schedule: &NoiseSchedule,
    cfg: &PretrainConfig,
) -> Result<PretrainLog> {
    if corpus.is_empty() {
        return Err(Error::InvalidArgument("empty pretraining corpus".into()));
    }
    let mut state = AdamState::new(params.len());
    let adam = AdamConfig::default();
    let mut rng = substream(cfg.seed, "pretrain", 0);
    let heldout_seed = cfg.seed ^ 0x5eed;
    let initial = held_out_ce(params, heldout, schedule, heldout_seed)?;
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<PretrainExample> =
            (0..cfg.batch_size).map(|_| corpus[rng.random_range(0..corpus.len())].clone()).collect();
        let (loss, mut grads) = pretrain_step(params, &batch, schedule, &mut rng)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { what: "pretrain loss", index: step });
        }
        clip_grad_norm(&mut grads, cfg.grad_clip);
        let lr = lr_at(cfg, step);
        adam_step(&mut params.data, &grads, &mut state, lr, &adam)?;
        let ce = if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            held_out_ce(params, heldout, schedule, heldout_seed)?
        } else {
            f64::NAN
        };
        rows.push((step, loss, ce));
    }
    let final_ce = held_out_ce(params, heldout, schedule, heldout_seed)?;
    Ok(PretrainLog { rows, initial_heldout_ce: initial, final_heldout_ce: final_ce })
}

fn lr_at(cfg: &PretrainConfig, step: usize) -> f64 {
    if step < cfg.warmup {
        return cfg.lr * (step + 1) as f64 / cfg.warmup as f64;
    }
    let span = (cfg.steps - cfg.warmup).max(1) as f64;
    let prog = (step - cfg.warmup) as f64 / span;
    cfg.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * prog).cos()))
}
