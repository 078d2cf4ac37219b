//! Position-selection strategies and blockwise decoding.
//!
//! Every decode step runs one denoiser forward pass over the whole sequence,
//! picks a set of still-masked positions inside the current block, and
//! commits a token at each. The full record of a decode is a [`Trajectory`].

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::{forward, DenoiserParams};
use crate::error::{Error, Result};
use crate::mdm::{Token, TokenSeq};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    RandomK,
    TopkConfidence,
    TopkNegentropy,
    Eb,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::RandomK => "random_k",
            Strategy::TopkConfidence => "topk_confidence",
            Strategy::TopkNegentropy => "topk_negentropy",
            Strategy::Eb => "eb",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random_k" => Ok(Strategy::RandomK),
            "topk_confidence" | "topk" => Ok(Strategy::TopkConfidence),
            "topk_negentropy" => Ok(Strategy::TopkNegentropy),
            "eb" => Ok(Strategy::Eb),
            other => Err(Error::Config(format!("unknown sampler strategy `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub strategy: Strategy,
    pub k: usize,
    /// Entropy budget per step; only read by the EB strategy.
    pub gamma: f64,
    pub block_size: usize,
    /// Completion length.
    pub max_len: usize,
    pub temperature: f64,
    pub greedy_tokens: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::TopkConfidence,
            k: 1,
            gamma: 0.1,
            block_size: 8,
            max_len: 32,
            temperature: 1.0,
            greedy_tokens: false,
        }
    }
}

pub const SAMPLER_KEYS: [&str; 7] = ["strategy", "k", "gamma", "block_size", "max_len", "temperature", "greedy_tokens"];

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.block_size == 0 || self.max_len == 0 {
            return Err(Error::Config("sampler k, block_size and max_len must be positive".into()));
        }
        if self.block_size > self.max_len {
            return Err(Error::Config(format!("block_size {} > max_len {}", self.block_size, self.max_len)));
        }
        if !(self.gamma >= 0.0) || !(self.temperature >= 0.0) {
            return Err(Error::Config("gamma and temperature must be non-negative".into()));
        }
        Ok(())
    }

    /// `key=value` pairs in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("strategy", self.strategy.to_string()),
            ("k", self.k.to_string()),
            ("gamma", self.gamma.to_string()),
            ("block_size", self.block_size.to_string()),
            ("max_len", self.max_len.to_string()),
            ("temperature", self.temperature.to_string()),
            ("greedy_tokens", self.greedy_tokens.to_string()),
        ]
    }

    /// Apply one `key=value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: &dyn fmt::Display| Error::Config(format!("sampler.{key}: {e}"));
        match key {
            "strategy" => self.strategy = value.parse()?,
            "k" => self.k = value.parse().map_err(|e| bad(&e))?,
            "gamma" => self.gamma = value.parse().map_err(|e| bad(&e))?,
            "block_size" => self.block_size = value.parse().map_err(|e| bad(&e))?,
            "max_len" => self.max_len = value.parse().map_err(|e| bad(&e))?,
            "temperature" => self.temperature = value.parse().map_err(|e| bad(&e))?,
            "greedy_tokens" => self.greedy_tokens = value.parse().map_err(|e| bad(&e))?,
            other => return Err(Error::Config(format!("unknown key `sampler.{other}`"))),
        }
        Ok(())
    }

    pub fn to_kv_text(&self) -> String {
        self.to_pairs().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn from_kv_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got `{line}`")))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Confidence score `max_v p(v)`.
pub fn score_confidence(probs: &[f64]) -> f64 {
    probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy_cost(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// The `k` highest-scoring `(position, score)` candidates, ties to the lower position.
/// Returned positions are sorted ascending.
pub fn select_topk(candidates: &[(usize, f64)], k: usize) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(Error::InvalidArgument("no masked positions to select from".into()));
    }
    let mut order: Vec<&(usize, f64)> = candidates.iter().collect();
    order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut out: Vec<usize> = order.into_iter().take(k.max(1)).map(|c| c.0).collect();
    out.sort_unstable();
    Ok(out)
}

/// Entropy-bounded selection: the longest ascending-cost prefix whose total
/// cost stays within `gamma`, or the single cheapest position if even that
/// one exceeds the budget. Ties go to the lower position.
pub fn select_eb(costs: &[(usize, f64)], gamma: f64) -> Result<Vec<usize>> {
    if costs.is_empty() {
        return Err(Error::InvalidArgument("no masked positions to select from".into()));
    }
    if let Some(c) = costs.iter().find(|c| !(c.1 >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative or NaN cost {} at position {}", c.1, c.0)));
    }
    let mut order: Vec<&(usize, f64)> = costs.iter().collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    let mut total = 0.0;
    let mut out = Vec::new();
    for c in &order {
        total += c.1;
        if total > gamma {
            break;
        }
        out.push(c.0);
    }
    if out.is_empty() {
        out.push(order[0].0);
    }
    out.sort_unstable();
    Ok(out)
}

/// One decode step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// 1-based decode step index.
    pub time: usize,
    /// Completion-relative positions unmasked at this step, ascending.
    pub positions: Vec<usize>,
    /// Model distribution `pi(. | c, z^{t-1})` at each newly unmasked position.
    pub conditionals: Vec<Vec<f64>>,
    /// Completion tokens before this step (`z^{t-1}`).
    pub latent_before: Vec<Token>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub prompt: TokenSeq,
    pub completion: TokenSeq,
    pub steps: Vec<StepRecord>,
    /// Decode step (1-based) at which each completion position was unmasked.
    pub unmask_time: Vec<usize>,
    pub nfe: usize,
    /// Pre-sigmoid threshold logit `u` when the threshold head chose gamma.
    pub threshold_logit: Option<f64>,
}

impl Trajectory {
    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Completion latent after `t` steps: `z^0` is fully masked, `z^T` the completion.
    pub fn latent_at(&self, t: usize) -> Result<&[Token]> {
        match t.cmp(&self.steps.len()) {
            std::cmp::Ordering::Less => Ok(&self.steps[t].latent_before),
            std::cmp::Ordering::Equal => Ok(self.completion.tokens()),
            std::cmp::Ordering::Greater => Err(Error::OutOfRange { index: t, max: self.steps.len() }),
        }
    }

    /// Prompt followed by the completion latent after `t` steps.
    pub fn sequence_at(&self, t: usize) -> Result<Vec<Token>> {
        let mut seq = self.prompt.0.clone();
        seq.extend_from_slice(self.latent_at(t)?);
        Ok(seq)
    }

    /// Check the structural invariants against `mask_id`.
    pub fn validate(&self, mask_id: Token) -> Result<()> {
        let l = self.completion.len();
        if self.nfe != self.steps.len() {
            return Err(Error::Shape(format!("nfe {} != steps {}", self.nfe, self.steps.len())));
        }
        let mut seen = vec![0usize; l];
        for (i, st) in self.steps.iter().enumerate() {
            if st.time != i + 1 || st.positions.is_empty() || st.positions.len() != st.conditionals.len() {
                return Err(Error::Shape(format!("malformed step {}", i + 1)));
            }
            for &p in &st.positions {
                if p >= l || st.latent_before[p] != mask_id {
                    return Err(Error::Shape(format!("step {} unmasks non-masked position {p}", i + 1)));
                }
                seen[p] += 1;
                if self.unmask_time[p] != st.time {
                    return Err(Error::Shape(format!("unmask_time mismatch at {p}")));
                }
            }
            for (p, &tok) in st.latent_before.iter().enumerate() {
                if tok != mask_id && tok != self.completion.0[p] {
                    return Err(Error::Shape(format!("position {p} rewritten after unmasking")));
                }
            }
        }
        if seen.iter().any(|&c| c != 1) {
            return Err(Error::Shape("steps do not partition the completion".into()));
        }
        Ok(())
    }

    /// One JSON object per step.
    pub fn to_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Line<'a> {
            time: usize,
            positions: &'a [usize],
            tokens: Vec<Token>,
            conditionals: &'a [Vec<f64>],
            latent_before: &'a [Token],
        }
        let mut out = String::new();
        for st in &self.steps {
            let line = Line {
                time: st.time,
                positions: &st.positions,
                tokens: st.positions.iter().map(|&p| self.completion.0[p]).collect(),
                conditionals: &st.conditionals,
                latent_before: &st.latent_before,
            };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        Ok(out)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_token(probs: &[f64], temperature: f64, rng: &mut Rng) -> usize {
    let weights: Vec<f64> = if temperature == 1.0 {
        probs.to_vec()
    } else {
        let m = score_confidence(probs);
        probs.iter().map(|&p| (p / m).powf(1.0 / temperature)).collect()
    };
    let total: f64 = weights.iter().sum();
    let mut dart = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        dart -= w;
        if dart < 0.0 {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

/// Decode a completion for `prompt`, block by block from left to right.
///
/// Recorded conditionals are the model's temperature-1 distributions; the
/// tokens themselves are the argmax when `greedy_tokens` is set or the
/// temperature is zero, otherwise a temperature-scaled categorical draw.
pub fn decode(params: &DenoiserParams, prompt: &TokenSeq, cfg: &SamplerConfig, rng: &mut Rng) -> Result<Trajectory> {
    cfg.validate()?;
    let vocab = params.config.vocab;
    let mask = vocab.mask_id;
    let p_len = prompt.len();
    let l = cfg.max_len;
    let mut seq = prompt.0.clone();
    seq.resize(p_len + l, mask);
    let mut unmask_time = vec![0usize; l];
    let mut steps = Vec::new();
    let greedy = cfg.greedy_tokens || cfg.temperature == 0.0;

    for start in (0..l).step_by(cfg.block_size) {
        let end = (start + cfg.block_size).min(l);
        loop {
            let masked: Vec<usize> = (start..end).filter(|&i| seq[p_len + i] == mask).collect();
            if masked.is_empty() {
                break;
            }
            let out = forward(params, &seq, p_len)?;
            let probs: Vec<Vec<f64>> = masked.iter().map(|&i| out.probs_at(p_len + i)).collect();
            let chosen = match cfg.strategy {
                Strategy::RandomK => {
                    let n = cfg.k.min(masked.len());
                    let mut idx: Vec<usize> = sample(rng, masked.len(), n).into_iter().map(|j| masked[j]).collect();
                    idx.sort_unstable();
                    idx
                }
                Strategy::TopkConfidence => {
                    let c: Vec<(usize, f64)> = masked.iter().zip(&probs).map(|(&i, p)| (i, score_confidence(p))).collect();
                    select_topk(&c, cfg.k)?
                }
                Strategy::TopkNegentropy => {
                    let c: Vec<(usize, f64)> = masked.iter().zip(&probs).map(|(&i, p)| (i, -entropy_cost(p))).collect();
                    select_topk(&c, cfg.k)?
                }
                Strategy::Eb => {
                    let c: Vec<(usize, f64)> = masked.iter().zip(&probs).map(|(&i, p)| (i, entropy_cost(p))).collect();
                    select_eb(&c, cfg.gamma)?
                }
            };
            let time = steps.len() + 1;
            let latent_before = seq[p_len..].to_vec();
            let mut conditionals = Vec::with_capacity(chosen.len());
            let mut fills = Vec::with_capacity(chosen.len());
            for &pos in &chosen {
                let j = masked.binary_search(&pos).expect("chosen position is masked");
                let row = &probs[j];
                let tok = if greedy { argmax(row) } else { sample_token(row, cfg.temperature, rng) };
                fills.push((pos, tok as Token));
                conditionals.push(row.clone());
            }
            for (pos, tok) in fills {
                seq[p_len + pos] = tok;
                unmask_time[pos] = time;
            }
            steps.push(StepRecord { time, positions: chosen, conditionals, latent_before });
        }
    }
    let nfe = steps.len();
    Ok(Trajectory {
        prompt: prompt.clone(),
        completion: TokenSeq(seq[p_len..].to_vec()),
        steps,
        unmask_time,
        nfe,
        threshold_logit: None,
    })
}

/// Distinct step counts keyed by value, handy for NFE histograms.
pub fn nfe_histogram(trajs: &[Trajectory]) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for t in trajs {
        *h.entry(t.nfe).or_insert(0) += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_params, DenoiserConfig};
    use crate::mdm::Vocab;
    use crate::rng::seeded;

    fn model() -> DenoiserParams {
        let vocab = Vocab::new(6, 4, 5).unwrap();
        let cfg = DenoiserConfig { embed_dim: 16, num_layers: 1, num_heads: 2, ffn_dim: 16, ..DenoiserConfig::new(vocab, 16, 1) };
        init_params(&cfg).unwrap()
    }

    fn prompt() -> TokenSeq {
        TokenSeq(vec![0, 1, 2])
    }

    #[test]
    fn scores() {
        assert_eq!(score_confidence(&[0.7, 0.2, 0.1]), 0.7);
        assert_eq!(score_confidence(&[0.0, 1.0]), 1.0);
        assert_eq!(score_confidence(&[0.25; 4]), 0.25);
        assert_eq!(entropy_cost(&[0.0, 1.0, 0.0]), 0.0);
        assert!((entropy_cost(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        assert!((entropy_cost(&[0.5, 0.5]) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn topk_selection() {
        let c = [(0, 0.9), (1, 0.1), (2, 0.5)];
        assert_eq!(select_topk(&c, 2).unwrap(), vec![0, 2]);
        assert_eq!(select_topk(&c, 10).unwrap(), vec![0, 1, 2]);
        assert_eq!(select_topk(&[(0, 0.5), (1, 0.5)], 1).unwrap(), vec![0]);
        assert_eq!(select_topk(&[(4, 0.5), (2, 0.5)], 1).unwrap(), vec![2]);
        assert!(select_topk(&[], 1).is_err());
    }

    #[test]
    fn eb_selection() {
        assert_eq!(select_eb(&[(0, 0.05), (1, 0.2), (2, 0.5)], 0.3).unwrap(), vec![0, 1]);
        assert_eq!(select_eb(&[(0, 0.5), (1, 0.7)], 0.3).unwrap(), vec![0]);
        assert_eq!(select_eb(&[(0, 0.5), (1, 0.7), (2, 3.0)], 1e9).unwrap(), vec![0, 1, 2]);
        assert!(select_eb(&[], 1.0).is_err());
        assert!(select_eb(&[(0, -0.1)], 1.0).is_err());
    }

    #[test]
    fn top1_uses_one_step_per_token() {
        let p = model();
        let cfg = SamplerConfig { max_len: 10, block_size: 4, ..SamplerConfig::default() };
        let t = decode(&p, &prompt(), &cfg, &mut seeded(0)).unwrap();
        assert_eq!(t.nfe, 10);
        t.validate(p.config.vocab.mask_id).unwrap();
        // blocks are filled left to right
        assert!(t.unmask_time[..4].iter().all(|&s| s <= 4));
        assert!(t.unmask_time[8..].iter().all(|&s| s > 8));
    }

    #[test]
    fn eb_with_huge_gamma_takes_one_step_per_block() {
        let p = model();
        let cfg = SamplerConfig { strategy: Strategy::Eb, gamma: 1e9, max_len: 12, block_size: 4, ..SamplerConfig::default() };
        let t = decode(&p, &prompt(), &cfg, &mut seeded(0)).unwrap();
        assert_eq!(t.nfe, 3);
        t.validate(p.config.vocab.mask_id).unwrap();
    }

    #[test]
    fn greedy_top1_is_deterministic() {
        let p = model();
        let cfg = SamplerConfig { greedy_tokens: true, max_len: 8, ..SamplerConfig::default() };
        let a = decode(&p, &prompt(), &cfg, &mut seeded(1)).unwrap();
        let b = decode(&p, &prompt(), &cfg, &mut seeded(99)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn random_k_and_negentropy_partition() {
        let p = model();
        for strategy in [Strategy::RandomK, Strategy::TopkNegentropy] {
            let cfg = SamplerConfig { strategy, k: 3, max_len: 8, block_size: 8, ..SamplerConfig::default() };
            let t = decode(&p, &prompt(), &cfg, &mut seeded(4)).unwrap();
            assert_eq!(t.nfe, 3);
            t.validate(p.config.vocab.mask_id).unwrap();
        }
    }

    #[test]
    fn kv_round_trip_and_errors() {
        let cfg = SamplerConfig { strategy: Strategy::Eb, gamma: 0.37, greedy_tokens: true, ..SamplerConfig::default() };
        assert_eq!(SamplerConfig::from_kv_text(&cfg.to_kv_text()).unwrap(), cfg);
        assert!(SamplerConfig::from_kv_text("bogus=1").is_err());
        assert!(SamplerConfig::from_kv_text("block_size=64\nmax_len=32").is_err());
    }

    #[test]
    fn jsonl_has_one_line_per_step() {
        let p = model();
        let cfg = SamplerConfig { max_len: 5, block_size: 5, ..SamplerConfig::default() };
        let t = decode(&p, &prompt(), &cfg, &mut seeded(2)).unwrap();
        let text = t.to_jsonl().unwrap();
        assert_eq!(text.lines().count(), t.nfe);
        let first: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(first["time"], 1);
    }

    #[test]
    fn zero_length_completion_rejected() {
        let p = model();
        let cfg = SamplerConfig { max_len: 0, block_size: 0, ..SamplerConfig::default() };
        assert!(decode(&p, &prompt(), &cfg, &mut seeded(0)).is_err());
    }
}
