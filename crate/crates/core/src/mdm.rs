//! Absorbing-state (masking) diffusion process on a discrete time grid.
//!
//! A clean sequence `x` is corrupted to a latent `z_t` by replacing each token
//! independently with the mask symbol with probability `1 - alpha_t`. The
//! reverse-time posterior `q(z_s | z_t, x)` has a closed form that the model
//! approximates by substituting its own prediction for `x`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

pub type Token = u32;

/// Token vocabulary. Ordinary ids are `0..size`; `mask_id == size`.
///
/// `eos_id` and `pad_id` live inside the ordinary range so the denoiser can
/// predict them, but they are distinguished from content tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: usize,
    pub mask_id: Token,
    pub eos_id: Token,
    pub pad_id: Token,
}

impl Vocab {
    pub fn new(size: usize, eos_id: Token, pad_id: Token) -> Result<Self> {
        if size == 0 {
            return Err(Error::InvalidArgument("vocab size must be positive".into()));
        }
        let mask_id = size as Token;
        if eos_id == pad_id || eos_id >= mask_id || pad_id >= mask_id {
            return Err(Error::InvalidArgument(format!(
                "special ids must be distinct ordinary ids: eos={eos_id} pad={pad_id} size={size}"
            )));
        }
        Ok(Self { size, mask_id, eos_id, pad_id })
    }

    /// Number of distinct input symbols including the mask.
    pub fn input_size(&self) -> usize {
        self.size + 1
    }

    pub fn is_special(&self, tok: Token) -> bool {
        tok == self.mask_id || tok == self.eos_id || tok == self.pad_id
    }

    pub fn is_valid(&self, tok: Token) -> bool {
        tok <= self.mask_id
    }
}

/// Clean token sequence (never contains the mask id).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TokenSeq(pub Vec<Token>);

impl TokenSeq {
    pub fn new(tokens: Vec<Token>, vocab: &Vocab) -> Result<Self> {
        if let Some(i) = tokens.iter().position(|&t| t >= vocab.mask_id) {
            return Err(Error::InvalidArgument(format!(
                "clean sequence holds mask or invalid id {} at {i}",
                tokens[i]
            )));
        }
        Ok(Self(tokens))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }
}

/// Partially masked sequence at grid time `time`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Latent {
    pub tokens: Vec<Token>,
    pub time: usize,
}

impl Latent {
    pub fn fully_masked(len: usize, vocab: &Vocab, time: usize) -> Self {
        Self { tokens: vec![vocab.mask_id; len], time }
    }

    pub fn masked_positions(&self, vocab: &Vocab) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == vocab.mask_id)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Survival probabilities `alpha_t` on the grid `t = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub num_steps: usize,
    pub alpha: Vec<f64>,
}

pub const ALPHA_MIN: f64 = 1e-6;
pub const ALPHA_MAX: f64 = 1.0 - 1e-6;

impl NoiseSchedule {
    pub fn alpha_at(&self, t: usize) -> Result<f64> {
        self.alpha
            .get(t)
            .copied()
            .ok_or(Error::OutOfRange { index: t, max: self.num_steps })
    }
}

/// Build a named schedule over `steps` grid intervals.
///
/// Supported kinds: `linear` (`1 - t/T`) and `cosine` (`cos(pi t / 2T)`),
/// both clamped to `[ALPHA_MIN, ALPHA_MAX]`.
pub fn build_schedule(kind: &str, steps: usize) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    let raw: Box<dyn Fn(f64) -> f64> = match kind {
        "linear" => Box::new(|u| 1.0 - u),
        "cosine" => Box::new(|u| (std::f64::consts::FRAC_PI_2 * u).cos()),
        other => return Err(Error::UnknownSchedule(other.to_string())),
    };
    let alpha = (0..=steps)
        .map(|t| raw(t as f64 / steps as f64).clamp(ALPHA_MIN, ALPHA_MAX))
        .collect();
    Ok(NoiseSchedule { num_steps: steps, alpha })
}

/// Sample `z_t ~ q(z_t | x)`: keep each token with probability `alpha_t`.
pub fn forward_mask(
    x: &TokenSeq,
    t: usize,
    schedule: &NoiseSchedule,
    vocab: &Vocab,
    rng: &mut Rng,
) -> Result<Latent> {
    let alpha = schedule.alpha_at(t)?;
    let tokens = x
        .tokens()
        .iter()
        .map(|&tok| if rng.random::<f64>() < alpha { tok } else { vocab.mask_id })
        .collect();
    Ok(Latent { tokens, time: t })
}

fn check_times(s: usize, t: usize, schedule: &NoiseSchedule) -> Result<(f64, f64)> {
    if s >= t {
        return Err(Error::InvalidArgument(format!("posterior needs s < t, got s={s} t={t}")));
    }
    Ok((schedule.alpha_at(s)?, schedule.alpha_at(t)?))
}

/// Exact posterior `q(z_s | z_t, x)`.
///
/// Each returned row is indexed by token id and has `vocab.size + 1` entries,
/// the last one (`mask_id`) holding the probability of staying masked.
pub fn posterior(
    z_t: &Latent,
    x: &TokenSeq,
    s: usize,
    t: usize,
    schedule: &NoiseSchedule,
    vocab: &Vocab,
) -> Result<Vec<Vec<f64>>> {
    let (alpha_s, alpha_t) = check_times(s, t, schedule)?;
    if z_t.tokens.len() != x.len() {
        return Err(Error::Shape(format!("latent len {} vs clean len {}", z_t.tokens.len(), x.len())));
    }
    let stay = (1.0 - alpha_s) / (1.0 - alpha_t);
    let reveal = (alpha_s - alpha_t) / (1.0 - alpha_t);
    Ok(z_t
        .tokens
        .iter()
        .zip(x.tokens())
        .map(|(&z, &xt)| {
            let mut row = vec![0.0; vocab.input_size()];
            if z != vocab.mask_id {
                row[z as usize] = 1.0;
            } else {
                row[vocab.mask_id as usize] = stay;
                row[xt as usize] += reveal;
            }
            row
        })
        .collect())
}

/// Model posterior `p_theta(z_s | z_t)`: the exact posterior with the point
/// mass on `x` replaced by the predicted distribution `x_probs`.
pub fn approx_posterior(
    z_t: &Latent,
    x_probs: &[Vec<f64>],
    s: usize,
    t: usize,
    schedule: &NoiseSchedule,
    vocab: &Vocab,
) -> Result<Vec<Vec<f64>>> {
    let (alpha_s, alpha_t) = check_times(s, t, schedule)?;
    if x_probs.len() != z_t.tokens.len() {
        return Err(Error::Shape(format!("{} prob rows for {} positions", x_probs.len(), z_t.tokens.len())));
    }
    for (row, p) in x_probs.iter().enumerate() {
        let sum: f64 = p.iter().sum();
        if p.len() != vocab.size || (sum - 1.0).abs() > 1e-6 || p.iter().any(|&v| v < 0.0) {
            return Err(Error::NotNormalized { row, sum });
        }
    }
    let stay = (1.0 - alpha_s) / (1.0 - alpha_t);
    let reveal = (alpha_s - alpha_t) / (1.0 - alpha_t);
    Ok(z_t
        .tokens
        .iter()
        .zip(x_probs)
        .map(|(&z, p)| {
            let mut row = vec![0.0; vocab.input_size()];
            if z != vocab.mask_id {
                row[z as usize] = 1.0;
            } else {
                for (r, &pv) in row.iter_mut().zip(p) {
                    *r = reveal * pv;
                }
                row[vocab.mask_id as usize] = stay;
            }
            row
        })
        .collect())
}
