//! Accuracy / NFE measurement, threshold sweeps, the exact-enumeration
//! transfer-bound check, and paired-seed comparison of training runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::denoiser::{forward, DenoiserParams};
use crate::error::{Error, Result};
use crate::likelihood::kl_divergence;
use crate::mdm::{Token, TokenSeq};
use crate::rl::{threshold_mean, RLConfig};
use crate::rng::substream;
use crate::samplers::{decode, score_confidence, select_topk, SamplerConfig, Strategy};
use crate::tasks::{detokenize, effective_tokens, generate, reward, Instance, Split, TaskSpec};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub index: usize,
    pub prompt: String,
    pub completion: String,
    pub reward: f64,
    pub nfe: usize,
    pub ets: usize,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: String,
    pub sampler: SamplerConfig,
    /// Whether gamma came from the threshold head.
    pub adaptive: bool,
    pub n_instances: usize,
    pub accuracy: f64,
    pub nfe_mean: f64,
    pub nfe_std: f64,
    pub ets_mean: f64,
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Per-instance rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,prompt,completion,reward,nfe,ets,gamma\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{},{},{:.6}", r.index, r.prompt, r.completion, r.reward, r.nfe, r.ets, r.gamma);
        }
        s
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let m = xs.iter().sum::<f64>() / n;
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Greedy-token evaluation on fixed instances.
///
/// With `head`, each prompt's gamma is the threshold head's noise-free
/// prediction and decoding uses the EB sampler.
pub fn evaluate_instances(
    params: &DenoiserParams,
    instances: &[Instance],
    sampler: &SamplerConfig,
    head: Option<&RLConfig>,
) -> Result<EvalReport> {
    if instances.is_empty() {
        return Err(Error::InvalidArgument("evaluation needs at least one instance".into()));
    }
    let mut cfg = sampler.clone();
    cfg.greedy_tokens = true;
    if head.is_some() {
        cfg.strategy = Strategy::Eb;
    }
    let mut rows = Vec::with_capacity(instances.len());
    for (i, inst) in instances.iter().enumerate() {
        let mut c = cfg.clone();
        if let Some(rl) = head {
            c.gamma = rl.gamma_of(threshold_mean(params, &inst.prompt, c.max_len, rl)?);
        }
        let mut rng = substream(0, "eval-decode", i as u64);
        let traj = decode(params, &inst.prompt, &c, &mut rng)?;
        let tokens = traj.completion.tokens();
        rows.push(EvalRow {
            index: i,
            prompt: detokenize(inst.prompt.tokens()),
            completion: detokenize(tokens),
            reward: reward(inst, tokens),
            nfe: traj.nfe,
            ets: effective_tokens(tokens),
            gamma: if c.strategy == Strategy::Eb { c.gamma } else { f64::NAN },
        });
    }
    let rewards: Vec<f64> = rows.iter().map(|r| r.reward).collect();
    let nfe: Vec<f64> = rows.iter().map(|r| r.nfe as f64).collect();
    let ets: Vec<f64> = rows.iter().map(|r| r.ets as f64).collect();
    let (nfe_mean, nfe_std) = mean_std(&nfe);
    Ok(EvalReport {
        task: String::new(),
        sampler: cfg,
        adaptive: head.is_some(),
        n_instances: rows.len(),
        accuracy: mean_std(&rewards).0,
        nfe_mean,
        nfe_std,
        ets_mean: mean_std(&ets).0,
        rows,
    })
}

/// Evaluate on `n` fresh eval-split instances drawn with `seed`.
pub fn evaluate(
    params: &DenoiserParams,
    task: &TaskSpec,
    sampler: &SamplerConfig,
    n: usize,
    seed: u64,
    head: Option<&RLConfig>,
) -> Result<EvalReport> {
    let instances = generate(task, Split::Eval, n, seed)?;
    let mut rep = evaluate_instances(params, &instances, sampler, head)?;
    rep.task = task.kind.name().to_string();
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FrontierPoint {
    pub gamma: f64,
    pub accuracy: f64,
    pub nfe_mean: f64,
    /// True for the point produced by the threshold head.
    pub adaptive: bool,
}

/// One EB evaluation per fixed gamma, plus the threshold head's point when
/// `head` is given.
pub fn frontier(
    params: &DenoiserParams,
    instances: &[Instance],
    sampler: &SamplerConfig,
    gammas: &[f64],
    head: Option<&RLConfig>,
) -> Result<Vec<FrontierPoint>> {
    if gammas.is_empty() {
        return Err(Error::InvalidArgument("frontier needs at least one gamma".into()));
    }
    let mut points = Vec::with_capacity(gammas.len() + 1);
    for &g in gammas {
        let cfg = SamplerConfig { strategy: Strategy::Eb, gamma: g, ..sampler.clone() };
        cfg.validate()?;
        let rep = evaluate_instances(params, instances, &cfg, None)?;
        points.push(FrontierPoint { gamma: g, accuracy: rep.accuracy, nfe_mean: rep.nfe_mean, adaptive: false });
    }
    if let Some(rl) = head {
        let rep = evaluate_instances(params, instances, sampler, Some(rl))?;
        let gamma = rep.rows.iter().map(|r| r.gamma).sum::<f64>() / rep.rows.len() as f64;
        points.push(FrontierPoint { gamma, accuracy: rep.accuracy, nfe_mean: rep.nfe_mean, adaptive: true });
    }
    Ok(points)
}

pub fn frontier_csv(points: &[FrontierPoint]) -> String {
    let mut s = String::from("gamma,accuracy,nfe_mean,adaptive\n");
    for p in points {
        let _ = writeln!(s, "{:.6},{:.6},{:.6},{}", p.gamma, p.accuracy, p.nfe_mean, p.adaptive);
    }
    s
}

/// `true` if `q` is at least as accurate and as cheap as `p`, strictly
/// better in one of the two.
pub fn dominates(q: &FrontierPoint, p: &FrontierPoint) -> bool {
    q.accuracy >= p.accuracy && q.nfe_mean <= p.nfe_mean && (q.accuracy > p.accuracy || q.nfe_mean < p.nfe_mean)
}

/// Accuracy-vs-NFE scatter, one colour per series; adaptive points are drawn as squares.
pub fn frontier_svg(series: &[(&str, &[FrontierPoint])]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const PAD: f64 = 48.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let pts: Vec<&FrontierPoint> = series.iter().flat_map(|(_, p)| p.iter()).collect();
    let (mut x0, mut x1) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in &pts {
        x0 = x0.min(p.nfe_mean);
        x1 = x1.max(p.nfe_mean);
    }
    if !x0.is_finite() {
        (x0, x1) = (0.0, 1.0);
    }
    if x1 - x0 < 1e-9 {
        x0 -= 0.5;
        x1 += 0.5;
    }
    let sx = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |y: f64| H - PAD - y.clamp(0.0, 1.0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{b}" stroke="black"/>"#,
        b = H - PAD,
        r = W - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">NFE (mean)</text>"#, W / 2.0, H - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">accuracy</text>"#, H / 2.0, H / 2.0);
    for (label, x) in [(format!("{x0:.2}"), x0), (format!("{x1:.2}"), x1)] {
        let _ = writeln!(s, r#"<text x="{:.1}" y="{}" font-size="10" text-anchor="middle">{label}</text>"#, sx(x), H - PAD + 14.0);
    }
    for y in [0.0, 0.5, 1.0] {
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" font-size="10" text-anchor="end">{y:.1}</text>"#, PAD - 4.0, sy(y) + 3.0);
    }
    for (k, (name, points)) in series.iter().enumerate() {
        let c = COLORS[k % COLORS.len()];
        for p in points.iter() {
            if p.adaptive {
                let _ = writeln!(s, r#"<rect x="{:.1}" y="{:.1}" width="8" height="8" fill="{c}"/>"#, sx(p.nfe_mean) - 4.0, sy(p.accuracy) - 4.0);
            } else {
                let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="4" fill="{c}"/>"#, sx(p.nfe_mean), sy(p.accuracy));
            }
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11" fill="{c}">{name}</text>"#, W - PAD - 90.0, PAD + 14.0 * k as f64);
    }
    s.push_str("</svg>\n");
    s
}

/// Exact completion distribution of top-1 confidence decoding with
/// temperature-1 categorical tokens, by enumerating the decode tree.
pub fn true_policy_distribution(
    params: &DenoiserParams,
    prompt: &TokenSeq,
    completion_len: usize,
    budget: u128,
) -> Result<BTreeMap<Vec<Token>, f64>> {
    let v = params.config.vocab.size as u128;
    let needed = v.checked_pow(completion_len as u32).unwrap_or(u128::MAX);
    if needed > budget {
        return Err(Error::Budget { needed, budget });
    }
    let mask = params.config.vocab.mask_id;
    let p_len = prompt.len();
    let mut seq = prompt.0.clone();
    seq.resize(p_len + completion_len, mask);
    let mut out = BTreeMap::new();
    fn rec(params: &DenoiserParams, seq: &mut Vec<Token>, p_len: usize, mass: f64, out: &mut BTreeMap<Vec<Token>, f64>) -> Result<()> {
        let mask = params.config.vocab.mask_id;
        let masked: Vec<usize> = (p_len..seq.len()).filter(|&i| seq[i] == mask).collect();
        if masked.is_empty() {
            *out.entry(seq[p_len..].to_vec()).or_insert(0.0) += mass;
            return Ok(());
        }
        let fw = forward(params, seq, p_len)?;
        let cands: Vec<(usize, f64)> = masked.iter().map(|&i| (i, score_confidence(&fw.probs_at(i)))).collect();
        let pos = select_topk(&cands, 1)?[0];
        let probs = fw.probs_at(pos);
        for (tok, p) in probs.iter().enumerate() {
            seq[pos] = tok as Token;
            rec(params, seq, p_len, mass * p, out)?;
        }
        seq[pos] = mask;
        Ok(())
    }
    rec(params, &mut seq, p_len, 1.0, &mut out)?;
    Ok(out)
}

/// Product of the prompt-only marginals at every completion position.
pub fn mean_field_distribution(
    params: &DenoiserParams,
    prompt: &TokenSeq,
    completion_len: usize,
    budget: u128,
) -> Result<BTreeMap<Vec<Token>, f64>> {
    let v = params.config.vocab.size;
    let needed = (v as u128).checked_pow(completion_len as u32).unwrap_or(u128::MAX);
    if needed > budget {
        return Err(Error::Budget { needed, budget });
    }
    let p_len = prompt.len();
    let mut seq = prompt.0.clone();
    seq.resize(p_len + completion_len, params.config.vocab.mask_id);
    let fw = forward(params, &seq, p_len)?;
    let marg: Vec<Vec<f64>> = (0..completion_len).map(|i| fw.probs_at(p_len + i)).collect();
    let mut out = BTreeMap::new();
    let mut idx = vec![0usize; completion_len];
    loop {
        let p: f64 = idx.iter().enumerate().map(|(i, &t)| marg[i][t]).product();
        out.insert(idx.iter().map(|&t| t as Token).collect(), p);
        let mut k = 0;
        loop {
            if k == completion_len {
                return Ok(out);
            }
            idx[k] += 1;
            if idx[k] < v {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// The policy playing the surrogate role in [`pinsker_check`].
#[derive(Clone, Copy)]
pub enum Surrogate<'a> {
    /// True decode policy of another parameter set.
    Model(&'a DenoiserParams),
    /// Mean-field product policy of the given parameters.
    MeanField(&'a DenoiserParams),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PinskerRow {
    pub prompt: String,
    pub expected_true: f64,
    pub expected_surrogate: f64,
    /// `KL(surrogate || true)` over completions.
    pub kl: f64,
    pub mass_true: f64,
    pub mass_surrogate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PinskerReport {
    pub rows: Vec<PinskerRow>,
    pub max_kl: f64,
    pub epsilon: f64,
    pub reward_bound: f64,
    /// `min_c (E_pi r - E_surrogate r + sqrt(2) M eps)`; non-negative iff the bound holds.
    pub worst_slack: f64,
    pub holds: bool,
}

/// Exact check of `E_pi r >= E_surrogate r - sqrt(2) M eps` with
/// `eps^2 = max_c KL(surrogate || pi)`, by full enumeration.
pub fn pinsker_check(
    params: &DenoiserParams,
    surrogate: Surrogate<'_>,
    prompts: &[TokenSeq],
    completion_len: usize,
    reward_fn: &dyn Fn(&TokenSeq, &[Token]) -> f64,
    reward_bound: f64,
    budget: u128,
) -> Result<PinskerReport> {
    if prompts.is_empty() {
        return Err(Error::InvalidArgument("pinsker check needs prompts".into()));
    }
    let mut rows = Vec::with_capacity(prompts.len());
    for prompt in prompts {
        let pi = true_policy_distribution(params, prompt, completion_len, budget)?;
        let q = match surrogate {
            Surrogate::Model(p) => true_policy_distribution(p, prompt, completion_len, budget)?,
            Surrogate::MeanField(p) => mean_field_distribution(p, prompt, completion_len, budget)?,
        };
        let mut e_pi = 0.0;
        let mut e_q = 0.0;
        let mut kl = 0.0;
        for (c, &qp) in &q {
            let r = reward_fn(prompt, c);
            if !(0.0..=reward_bound).contains(&r) {
                return Err(Error::InvalidArgument(format!("reward {r} outside [0, {reward_bound}]")));
            }
            e_q += qp * r;
            let pp = pi.get(c).copied().unwrap_or(0.0);
            if qp > 0.0 {
                kl += if pp > 0.0 { qp * (qp / pp).ln() } else { f64::INFINITY };
            }
        }
        for (c, &pp) in &pi {
            e_pi += pp * reward_fn(prompt, c);
        }
        rows.push(PinskerRow {
            prompt: detokenize(prompt.tokens()),
            expected_true: e_pi,
            expected_surrogate: e_q,
            kl: kl.max(0.0),
            mass_true: pi.values().sum(),
            mass_surrogate: q.values().sum(),
        });
    }
    let max_kl = rows.iter().map(|r| r.kl).fold(0.0, f64::max);
    let epsilon = max_kl.sqrt();
    let slack = std::f64::consts::SQRT_2 * reward_bound * epsilon;
    let worst_slack = rows.iter().map(|r| r.expected_true - r.expected_surrogate + slack).fold(f64::INFINITY, f64::min);
    Ok(PinskerReport { rows, max_kl, epsilon, reward_bound, worst_slack, holds: worst_slack >= 0.0 })
}

/// KL of two distributions over ordinary tokens, re-exported for reports.
pub fn token_kl(p: &[f64], q: &[f64]) -> f64 {
    kl_divergence(p, q)
}

/// One finished training run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRecord {
    pub variant: String,
    pub seed: u64,
    /// Rollouts consumed (iterations x prompts x group size).
    pub budget: usize,
    /// Per-iteration mean rollout reward.
    pub reward_curve: Vec<f64>,
    /// Held-out accuracy at each evaluated checkpoint, last entry final.
    pub accuracies: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantSummary {
    pub variant: String,
    pub seeds: Vec<u64>,
    pub curve_mean: Vec<f64>,
    pub curve_std: Vec<f64>,
    pub final_mean: f64,
    pub final_std: f64,
    /// Best accuracy over seeds and checkpoints.
    pub best: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedDiff {
    pub a: String,
    pub b: String,
    /// Mean over shared seeds of `final(a) - final(b)`.
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub variants: Vec<VariantSummary>,
    pub paired: Vec<PairedDiff>,
}

fn sample_mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (m, 0.0);
    }
    (m, (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt())
}

fn final_of(r: &RunRecord) -> f64 {
    r.accuracies.last().copied().unwrap_or(f64::NAN)
}

/// Per-variant mean/std curves and final accuracies, plus seed-paired
/// differences between every pair of variants (in order of appearance).
pub fn compare_variants(runs: &[RunRecord]) -> Result<Comparison> {
    if runs.is_empty() {
        return Err(Error::InvalidArgument("empty run table".into()));
    }
    if let Some(r) = runs.iter().find(|r| r.budget != runs[0].budget) {
        return Err(Error::InvalidArgument(format!(
            "mismatched budgets: {} has {}, {} has {}",
            runs[0].variant, runs[0].budget, r.variant, r.budget
        )));
    }
    let mut order: Vec<String> = Vec::new();
    for r in runs {
        if !order.contains(&r.variant) {
            order.push(r.variant.clone());
        }
    }
    fn by_variant<'a>(runs: &'a [RunRecord], v: &'a str) -> impl Iterator<Item = &'a RunRecord> + 'a {
        runs.iter().filter(move |r| r.variant == v)
    }
    let mut variants = Vec::new();
    for v in &order {
        let rs: Vec<&RunRecord> = by_variant(runs, v).collect();
        let len = rs.iter().map(|r| r.reward_curve.len()).min().unwrap_or(0);
        let (curve_mean, curve_std): (Vec<f64>, Vec<f64>) =
            (0..len).map(|i| sample_mean_std(&rs.iter().map(|r| r.reward_curve[i]).collect::<Vec<_>>())).unzip();
        let finals: Vec<f64> = rs.iter().map(|r| final_of(r)).collect();
        let (final_mean, final_std) = sample_mean_std(&finals);
        let best = rs.iter().flat_map(|r| r.accuracies.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
        variants.push(VariantSummary {
            variant: v.clone(),
            seeds: rs.iter().map(|r| r.seed).collect(),
            curve_mean,
            curve_std,
            final_mean,
            final_std,
            best,
        });
    }
    let mut paired = Vec::new();
    for i in 0..order.len() {
        for j in i + 1..order.len() {
            let diffs: Vec<f64> = by_variant(runs, &order[i])
                .filter_map(|ra| by_variant(runs, &order[j]).find(|rb| rb.seed == ra.seed).map(|rb| final_of(ra) - final_of(rb)))
                .collect();
            let (mean, std) = sample_mean_std(&diffs);
            paired.push(PairedDiff { a: order[i].clone(), b: order[j].clone(), mean, std, n: diffs.len() });
        }
    }
    Ok(Comparison { variants, paired })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{init_params, DenoiserConfig};
    use crate::mdm::Vocab;
    use crate::tasks::{task_vocab, TaskKind};

    fn small_model(vocab: Vocab, max_len: usize, seed: u64) -> DenoiserParams {
        let cfg = DenoiserConfig { embed_dim: 8, num_layers: 1, num_heads: 2, ffn_dim: 16, ..DenoiserConfig::new(vocab, max_len, seed) };
        init_params(&cfg).unwrap()
    }

    #[test]
    fn top1_eval_uses_one_pass_per_token_and_is_reproducible() {
        let spec = TaskSpec::new(TaskKind::ModArith);
        let params = small_model(task_vocab(), 16, 3);
        let sampler = SamplerConfig { max_len: 4, block_size: 4, ..SamplerConfig::default() };
        let a = evaluate(&params, &spec, &sampler, 10, 5, None).unwrap();
        assert_eq!(a.nfe_mean, 4.0);
        assert_eq!(a.to_csv(), evaluate(&params, &spec, &sampler, 10, 5, None).unwrap().to_csv());
        let mean: f64 = a.rows.iter().map(|r| r.reward).sum::<f64>() / a.rows.len() as f64;
        assert_eq!(a.accuracy, mean);
        assert!(evaluate(&params, &spec, &sampler, 0, 5, None).is_err());
    }

    #[test]
    fn frontier_endpoints() {
        let spec = TaskSpec::new(TaskKind::ModArith);
        let params = small_model(task_vocab(), 16, 1);
        let inst = generate(&spec, Split::Eval, 6, 0).unwrap();
        let sampler = SamplerConfig { max_len: 4, block_size: 4, ..SamplerConfig::default() };
        let pts = frontier(&params, &inst, &sampler, &[1e-9], None).unwrap();
        assert_eq!(pts.len(), 1);
        assert_eq!(pts[0].nfe_mean, 4.0);
        let eb = SamplerConfig { strategy: Strategy::Eb, gamma: 0.3, ..sampler.clone() };
        let one = frontier(&params, &inst, &sampler, &[0.3], None).unwrap();
        let rep = evaluate_instances(&params, &inst, &eb, None).unwrap();
        assert_eq!((one[0].accuracy, one[0].nfe_mean), (rep.accuracy, rep.nfe_mean));
        let rl = RLConfig::new(19);
        let with_head = frontier(&params, &inst, &sampler, &[0.3, 1.0], Some(&rl)).unwrap();
        assert_eq!(with_head.len(), 3);
        assert!(with_head[2].adaptive && (with_head[2].gamma - 0.1).abs() < 1e-12);
        assert!(frontier(&params, &inst, &sampler, &[], None).is_err());
        assert!(frontier_svg(&[("m", &with_head)]).starts_with("<svg"));
    }

    #[test]
    fn pinsker_identical_policies_and_mass() {
        let vocab = Vocab::new(3, 1, 2).unwrap();
        let params = small_model(vocab, 8, 2);
        let prompts = vec![TokenSeq(vec![0, 1]), TokenSeq(vec![2])];
        let r = |_: &TokenSeq, c: &[Token]| if c[0] == 0 { 1.0 } else { 0.0 };
        let rep = pinsker_check(&params, Surrogate::Model(&params), &prompts, 4, &r, 1.0, 1000).unwrap();
        assert_eq!(rep.max_kl, 0.0);
        assert!(rep.holds);
        for row in &rep.rows {
            assert!((row.mass_true - 1.0).abs() < 1e-9 && (row.mass_surrogate - 1.0).abs() < 1e-9);
            assert_eq!(row.expected_true, row.expected_surrogate);
        }
        let mf = pinsker_check(&params, Surrogate::MeanField(&params), &prompts, 4, &r, 1.0, 1000).unwrap();
        assert!(mf.holds && mf.max_kl > 0.0);
        assert!(matches!(pinsker_check(&params, Surrogate::Model(&params), &prompts, 8, &r, 1.0, 100), Err(Error::Budget { .. })));
    }

    #[test]
    fn comparison_rules() {
        assert!(compare_variants(&[]).is_err());
        let run = |v: &str, seed, budget, acc: f64| RunRecord {
            variant: v.into(),
            seed,
            budget,
            reward_curve: vec![0.1, acc],
            accuracies: vec![acc],
        };
        let same = compare_variants(&[run("a", 0, 10, 0.5), run("b", 0, 10, 0.5), run("a", 1, 10, 0.7), run("b", 1, 10, 0.7)]).unwrap();
        assert_eq!(same.paired[0].mean, 0.0);
        assert_eq!(same.paired[0].n, 2);
        assert!(compare_variants(&[run("a", 0, 10, 0.5), run("b", 0, 11, 0.5)]).is_err());
        let d = compare_variants(&[run("a", 0, 10, 0.6), run("b", 0, 10, 0.5), run("a", 1, 10, 0.9), run("b", 1, 10, 0.6)]).unwrap();
        assert!((d.paired[0].mean - 0.2).abs() < 1e-12);
        assert!((d.variants[0].best - 0.9).abs() < 1e-12);
    }
}
