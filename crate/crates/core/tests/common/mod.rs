#![allow(dead_code)]

use diffpo::denoiser::{init_params, DenoiserConfig, DenoiserParams};
use diffpo::mdm::{TokenSeq, Vocab};
use diffpo::rl::{sample_threshold, threshold_mean, RLConfig, RolloutGroup, Variant};
use diffpo::rng::substream;
use diffpo::samplers::{decode, SamplerConfig, Strategy};
use rand::Rng;

pub fn tiny_vocab() -> Vocab {
    Vocab::new(4, 2, 3).unwrap()
}

/// A ~700-parameter model with a nonzero threshold head.
pub fn tiny_model(seed: u64) -> DenoiserParams {
    let cfg = DenoiserConfig { embed_dim: 8, num_layers: 1, num_heads: 2, ffn_dim: 16, ..DenoiserConfig::new(tiny_vocab(), 10, seed) };
    let mut p = init_params(&cfg).unwrap();
    let mut rng = substream(seed, "head", 0);
    let r = p.layout.thresh_w.clone();
    for w in &mut p.data[r] {
        *w = 0.3 * (rng.random::<f64>() - 0.5);
    }
    p
}

pub fn perturbed(p: &DenoiserParams, scale: f64, seed: u64) -> DenoiserParams {
    let mut q = p.clone();
    let mut rng = substream(seed, "perturb", 0);
    for x in &mut q.data {
        *x += scale * (rng.random::<f64>() - 0.5);
    }
    q
}

/// Rollout groups decoded under `old` with random binary rewards.
pub fn groups(old: &DenoiserParams, strategy: Strategy, threshold: Option<&RLConfig>, seed: u64) -> Vec<RolloutGroup> {
    let prompts = [TokenSeq(vec![0, 1]), TokenSeq(vec![1, 1, 0])];
    let sampler = SamplerConfig { strategy, k: 1, gamma: 0.9, block_size: 3, max_len: 5, temperature: 1.0, greedy_tokens: false };
    let mut out = Vec::new();
    for (b, prompt) in prompts.iter().enumerate() {
        let mut rng = substream(seed, "group", b as u64);
        let mut trajs = Vec::new();
        let mut samples = Vec::new();
        for _ in 0..4 {
            let mut cfg = sampler.clone();
            if let Some(rl) = threshold {
                let m = threshold_mean(old, prompt, cfg.max_len, rl).unwrap();
                let ts = sample_threshold(m, rl, &mut rng);
                cfg.gamma = ts.gamma;
                samples.push(ts);
            }
            trajs.push(decode(old, prompt, &cfg, &mut rng).unwrap());
        }
        let mut rewards: Vec<f64> = (0..4).map(|_| if rng.random::<bool>() { 1.0 } else { 0.0 }).collect();
        rewards[0] = 1.0;
        rewards[1] = 0.0;
        let g = RolloutGroup::new(prompt.clone(), trajs, rewards, 1e-8).unwrap();
        out.push(if threshold.is_some() { g.with_thresholds(samples).unwrap() } else { g });
    }
    out
}

pub fn rl_config(variant: Variant) -> RLConfig {
    let mut cfg = RLConfig::new(tiny_vocab().size);
    cfg.variant = variant;
    cfg.gamma_init = 0.9;
    cfg
}

/// Worst symmetric relative error between `grads` and central differences of `f`.
pub fn fd_check(params: &DenoiserParams, grads: &[f64], f: &dyn Fn(&DenoiserParams) -> f64) -> f64 {
    let mut p = params.clone();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for idx in 0..p.len() {
        let orig = p.data[idx];
        p.data[idx] = orig + h;
        let up = f(&p);
        p.data[idx] = orig - h;
        let dn = f(&p);
        p.data[idx] = orig;
        let fd = (up - dn) / (2.0 * h);
        let err = (fd - grads[idx]).abs() / (fd.abs() + grads[idx].abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

/// Max-cardinality feasible subset by exhaustive search; among those the
/// cheapest, then the lexicographically smallest; singleton argmin if none.
pub fn eb_brute_force(costs: &[(usize, f64)], gamma: f64) -> Vec<usize> {
    let n = costs.len();
    let mut best: Option<(usize, f64, Vec<usize>)> = None;
    for mask in 1u32..(1 << n) {
        let set: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
        let sum: f64 = set.iter().map(|&i| costs[i].1).sum();
        if sum > gamma {
            continue;
        }
        let mut pos: Vec<usize> = set.iter().map(|&i| costs[i].0).collect();
        pos.sort_unstable();
        let better = match &best {
            None => true,
            Some((k, s, p)) => set.len() > *k || (set.len() == *k && (sum < *s || (sum == *s && pos < *p))),
        };
        if better {
            best = Some((set.len(), sum, pos));
        }
    }
    match best {
        Some((_, _, p)) => p,
        None => {
            let mut m = 0;
            for i in 1..n {
                if costs[i].1 < costs[m].1 || (costs[i].1 == costs[m].1 && costs[i].0 < costs[m].0) {
                    m = i;
                }
            }
            vec![costs[m].0]
        }
    }
}
