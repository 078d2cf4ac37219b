//! Tiny bidirectional transformer denoiser `x_theta(z_t)`.
//!
//! Parameters live in one flat `f64` buffer with a deterministic named layout
//! so optimizers, gradient checks and checkpoints can treat them uniformly.
//! The network is time-free: the mask pattern of the input is the only signal
//! about the diffusion time.

mod adam;
mod checkpoint;
mod model;
mod pretrain;

use std::cell::Cell;
use std::ops::Range;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::mdm::Vocab;
use crate::rng::substream;

pub use adam::{adam_step, clip_grad_norm, AdamConfig, AdamState};
pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{backward, forward, forward_with_cache, log_softmax, softmax, ForwardCache, ForwardOutput};
pub use pretrain::{build_masked_items, held_out_ce, pretrain, pretrain_objective, pretrain_step, MaskedItem, PretrainConfig, PretrainExample, PretrainLog};

#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserConfig {
    pub vocab: Vocab,
    /// Maximum total sequence length (prompt + completion).
    pub max_len: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub seed: u64,
}

impl DenoiserConfig {
    /// The desk-scale default: 2 layers, 4 heads, 64-dim, 4x feed-forward.
    pub fn new(vocab: Vocab, max_len: usize, seed: u64) -> Self {
        Self { vocab, max_len, embed_dim: 64, num_layers: 2, num_heads: 4, ffn_dim: 256, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("max_len", self.max_len),
            ("embed_dim", self.embed_dim),
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerLayout {
    pub ln1: Range<usize>,
    pub wq: Range<usize>,
    pub wk: Range<usize>,
    pub wv: Range<usize>,
    pub wo: Range<usize>,
    pub ln2: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

/// Offsets of every named tensor inside the flat parameter buffer.
///
/// Order: token embedding `(V+1) x d`, positional embedding `max_len x d`,
/// then per layer `ln1, wq, wk, wv, wo, ln2, w1, b1, w2, b2`, then the final
/// norm gain, output projection `d x V`, output bias, and the threshold head.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub lnf: Range<usize>,
    pub w_out: Range<usize>,
    pub b_out: Range<usize>,
    pub thresh_w: Range<usize>,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &DenoiserConfig) -> Self {
        let d = cfg.embed_dim;
        let f = cfg.ffn_dim;
        let v = cfg.vocab.size;
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let tok_emb = take(cfg.vocab.input_size() * d);
        let pos_emb = take(cfg.max_len * d);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerLayout {
                ln1: take(d),
                wq: take(d * d),
                wk: take(d * d),
                wv: take(d * d),
                wo: take(d * d),
                ln2: take(d),
                w1: take(d * f),
                b1: take(f),
                w2: take(f * d),
                b2: take(d),
            })
            .collect();
        let lnf = take(d);
        let w_out = take(d * v);
        let b_out = take(v);
        let thresh_w = take(d);
        Layout { tok_emb, pos_emb, layers, lnf, w_out, b_out, thresh_w, total: off }
    }

    /// Every parameter except the threshold head.
    pub fn body(&self) -> Range<usize> {
        0..self.thresh_w.start
    }

    /// `(name, range)` pairs in buffer order.
    pub fn named(&self) -> Vec<(String, Range<usize>)> {
        let mut out = vec![("tok_emb".to_string(), self.tok_emb.clone()), ("pos_emb".to_string(), self.pos_emb.clone())];
        for (i, l) in self.layers.iter().enumerate() {
            for (n, r) in [
                ("ln1", &l.ln1),
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("ln2", &l.ln2),
                ("w1", &l.w1),
                ("b1", &l.b1),
                ("w2", &l.w2),
                ("b2", &l.b2),
            ] {
                out.push((format!("layer{i}.{n}"), r.clone()));
            }
        }
        out.push(("lnf".into(), self.lnf.clone()));
        out.push(("w_out".into(), self.w_out.clone()));
        out.push(("b_out".into(), self.b_out.clone()));
        out.push(("thresh_w".into(), self.thresh_w.clone()));
        out
    }
}

/// All learnable weights, including the threshold head vector `w`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserParams {
    pub config: DenoiserConfig,
    pub layout: Layout,
    pub data: Vec<f64>,
}

impl DenoiserParams {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn slice(&self, r: &Range<usize>) -> &[f64] {
        &self.data[r.clone()]
    }

    pub fn threshold_head(&self) -> &[f64] {
        self.slice(&self.layout.thresh_w)
    }

    pub fn zero_grads(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { what: "parameters", index }),
            None => Ok(()),
        }
    }
}

/// Deterministic initialization from `config.seed`.
///
/// Matrices are drawn from `N(0, 1/fan_in)`, embeddings from `N(0, 0.1^2)`,
/// norm gains start at 1, biases and the threshold head at exactly 0.
pub fn init_params(config: &DenoiserConfig) -> Result<DenoiserParams> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut data = vec![0.0; layout.total];
    let mut rng = substream(config.seed, "init", 0);
    let mut fill = |data: &mut [f64], std: f64| {
        let normal = Normal::new(0.0, std).expect("positive std");
        for x in data.iter_mut() {
            *x = normal.sample(&mut rng);
        }
    };
    let d = config.embed_dim as f64;
    let f = config.ffn_dim as f64;
    fill(&mut data[layout.tok_emb.clone()], 0.1);
    fill(&mut data[layout.pos_emb.clone()], 0.1);
    for l in &layout.layers {
        data[l.ln1.clone()].fill(1.0);
        data[l.ln2.clone()].fill(1.0);
        for r in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1] {
            fill(&mut data[r.clone()], 1.0 / d.sqrt());
        }
        fill(&mut data[l.w2.clone()], 1.0 / f.sqrt());
    }
    data[layout.lnf.clone()].fill(1.0);
    fill(&mut data[layout.w_out.clone()], 1.0 / d.sqrt());
    Ok(DenoiserParams { config: config.clone(), layout, data })
}

thread_local! {
    static FORWARD_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of denoiser forward evaluations made on this thread.
pub fn forward_calls() -> u64 {
    FORWARD_CALLS.with(|c| c.get())
}

pub fn reset_forward_calls() {
    FORWARD_CALLS.with(|c| c.set(0));
}

pub(crate) fn count_forward() {
    FORWARD_CALLS.with(|c| c.set(c.get() + 1));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocab {
        Vocab::new(19, 17, 18).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_head_is_zero() {
        let cfg = DenoiserConfig::new(vocab(), 16, 3);
        let a = init_params(&cfg).unwrap();
        let b = init_params(&cfg).unwrap();
        assert_eq!(a.data, b.data);
        assert!(a.threshold_head().iter().all(|&w| w == 0.0));
        let c = init_params(&DenoiserConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a.data, c.data);
    }

    #[test]
    fn default_size_is_about_1e5() {
        let p = init_params(&DenoiserConfig::new(vocab(), 16, 0)).unwrap();
        assert!((80_000..150_000).contains(&p.len()), "{}", p.len());
        let named_total: usize = p.layout.named().iter().map(|(_, r)| r.len()).sum();
        assert_eq!(named_total, p.len());
    }

    #[test]
    fn heads_must_divide_embed_dim() {
        let cfg = DenoiserConfig { embed_dim: 63, num_heads: 4, ..DenoiserConfig::new(vocab(), 16, 0) };
        assert!(init_params(&cfg).is_err());
    }
}
