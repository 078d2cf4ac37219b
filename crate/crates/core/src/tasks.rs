//! Synthetic tasks with exact verifiers.
//!
//! All tasks share one 19-symbol vocabulary (plus mask):
//! digits `0-9`, `+ - * = , % >`, end-of-sequence `$` and padding `_`.
//! The mask renders as `?`.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::denoiser::PretrainExample;
use crate::error::{Error, Result};
use crate::mdm::{Token, TokenSeq, Vocab};
use crate::rng::{substream, Rng};

pub const PLUS: Token = 10;
pub const MINUS: Token = 11;
pub const TIMES: Token = 12;
pub const EQUALS: Token = 13;
pub const COMMA: Token = 14;
pub const PERCENT: Token = 15;
pub const ARROW: Token = 16;
pub const EOS: Token = 17;
pub const PAD: Token = 18;
const SYMBOLS: &[u8; 20] = b"0123456789+-*=,%>$_?";

pub fn task_vocab() -> Vocab {
    Vocab::new(19, EOS, PAD).expect("static vocabulary is valid")
}

pub fn detokenize(tokens: &[Token]) -> String {
    tokens.iter().map(|&t| SYMBOLS.get(t as usize).map(|&b| b as char).unwrap_or('#')).collect()
}

pub fn tokenize(text: &str) -> Result<Vec<Token>> {
    text.bytes()
        .map(|b| {
            SYMBOLS
                .iter()
                .position(|&s| s == b)
                .map(|i| i as Token)
                .ok_or_else(|| Error::InvalidArgument(format!("no token for `{}`", b as char)))
        })
        .collect()
}

fn number_tokens(n: u64) -> Vec<Token> {
    n.to_string().bytes().map(|b| (b - b'0') as Token).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    MiniCountdown,
    DigitSort,
    ModArith,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::MiniCountdown => "mini_countdown",
            TaskKind::DigitSort => "digit_sort",
            TaskKind::ModArith => "mod_arith",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mini_countdown" => Ok(TaskKind::MiniCountdown),
            "digit_sort" => Ok(TaskKind::DigitSort),
            "mod_arith" => Ok(TaskKind::ModArith),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Largest countdown operand.
    pub operand_max: u32,
    /// Largest countdown target.
    pub target_max: i64,
    /// Number of digits to sort.
    pub sort_len: usize,
    /// Largest modulus for `mod_arith`; summands are drawn below `2 * modulus_max`.
    pub modulus_max: u32,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind) -> Self {
        Self { kind, operand_max: 9, target_max: 20, sort_len: 6, modulus_max: 13, train_seed: 1, eval_seed: 2 }
    }

    pub fn vocab(&self) -> Vocab {
        task_vocab()
    }

    /// Longest prompt this task can produce.
    pub fn max_prompt_len(&self) -> usize {
        match self.kind {
            TaskKind::MiniCountdown => 6 + self.target_max.to_string().len(),
            TaskKind::DigitSort => self.sort_len + 1,
            TaskKind::ModArith => {
                let d = (2 * self.modulus_max).to_string().len();
                3 * d + 3
            }
        }
    }

    /// Completion length that fits every reference answer plus its EOS.
    pub fn completion_len(&self) -> usize {
        match self.kind {
            TaskKind::MiniCountdown => 8,
            TaskKind::DigitSort => self.sort_len + 2,
            TaskKind::ModArith => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Payload {
    Countdown { operands: Vec<u32>, target: i64 },
    Sort { digits: Vec<u32> },
    ModArith { a: u32, b: u32, m: u32 },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub prompt: TokenSeq,
    pub payload: Payload,
}

impl Instance {
    fn from_payload(payload: Payload) -> Self {
        let mut p = Vec::new();
        match &payload {
            Payload::Countdown { operands, target } => {
                for (i, &o) in operands.iter().enumerate() {
                    if i > 0 {
                        p.push(COMMA);
                    }
                    p.push(o as Token);
                }
                p.push(EQUALS);
                p.extend(number_tokens(*target as u64));
            }
            Payload::Sort { digits } => {
                p.extend(digits.iter().map(|&d| d as Token));
                p.push(ARROW);
            }
            Payload::ModArith { a, b, m } => {
                p.extend(number_tokens(*a as u64));
                p.push(PLUS);
                p.extend(number_tokens(*b as u64));
                p.push(PERCENT);
                p.extend(number_tokens(*m as u64));
                p.push(EQUALS);
            }
        }
        Instance { prompt: TokenSeq(p), payload }
    }

    /// Canonical answer body (without EOS).
    pub fn reference_answer(&self) -> Vec<Token> {
        match &self.payload {
            Payload::Countdown { operands, target } => {
                countdown_solutions(operands, *target).into_iter().next().unwrap_or_default()
            }
            Payload::Sort { digits } => {
                let mut d: Vec<Token> = digits.iter().map(|&x| x as Token).collect();
                d.sort_unstable();
                d
            }
            Payload::ModArith { a, b, m } => number_tokens(((a + b) % m) as u64),
        }
    }
}

/// Evaluate `n0 op0 n1 op1 ...` with `*` binding tighter than `+`/`-`.
fn eval_flat(nums: &[i64], ops: &[Token]) -> i64 {
    let mut total = 0;
    let mut sign = 1;
    let mut term = nums[0];
    for (i, &op) in ops.iter().enumerate() {
        if op == TIMES {
            term *= nums[i + 1];
        } else {
            total += sign * term;
            sign = if op == PLUS { 1 } else { -1 };
            term = nums[i + 1];
        }
    }
    total + sign * term
}

/// Every operator-interleaved ordering of every non-empty sub-multiset of `operands`.
fn all_expressions(operands: &[u32], min_terms: usize) -> Vec<(Vec<Token>, i64)> {
    fn rec(rest: &[u32], used: &mut Vec<u32>, ops: &mut Vec<Token>, min_terms: usize, out: &mut Vec<(Vec<Token>, i64)>) {
        if used.len() >= min_terms {
            let nums: Vec<i64> = used.iter().map(|&x| x as i64).collect();
            let mut toks = vec![used[0] as Token];
            for (i, &op) in ops.iter().enumerate() {
                toks.push(op);
                toks.push(used[i + 1] as Token);
            }
            out.push((toks, eval_flat(&nums, ops)));
        }
        for i in 0..rest.len() {
            if rest[..i].contains(&rest[i]) {
                continue;
            }
            let mut remaining = rest.to_vec();
            let x = remaining.remove(i);
            used.push(x);
            if used.len() == 1 {
                rec(&remaining, used, ops, min_terms, out);
            } else {
                for op in [PLUS, MINUS, TIMES] {
                    ops.push(op);
                    rec(&remaining, used, ops, min_terms, out);
                    ops.pop();
                }
            }
            used.pop();
        }
    }
    let mut out = Vec::new();
    rec(operands, &mut Vec::new(), &mut Vec::new(), min_terms.max(1), &mut out);
    out
}

/// Values reachable with `+ - *` using each operand at most once.
pub fn reachable_values(operands: &[u32]) -> BTreeSet<i64> {
    all_expressions(operands, 1).into_iter().map(|(_, v)| v).collect()
}

/// All expressions over `operands` (each used at most once) equal to `target`,
/// shortest first.
pub fn countdown_solutions(operands: &[u32], target: i64) -> Vec<Vec<Token>> {
    let mut sols: Vec<Vec<Token>> = all_expressions(operands, 1).into_iter().filter(|(_, v)| *v == target).map(|(t, _)| t).collect();
    sols.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
    sols.dedup();
    sols
}

fn instance_hash(p: &Payload) -> u64 {
    let bytes = serde_json::to_vec(p).expect("payload serializes");
    crate::rng::derive_seed(0x7a5c, &String::from_utf8_lossy(&bytes), 0)
}

fn in_split(p: &Payload, split: Split) -> bool {
    let eval = instance_hash(p) % 5 == 0;
    match split {
        Split::Eval => eval,
        Split::Train => !eval,
    }
}

const MAX_RETRIES: usize = 10_000;

fn draw_payload(spec: &TaskSpec, rng: &mut Rng) -> Option<Payload> {
    match spec.kind {
        TaskKind::MiniCountdown => {
            let operands: Vec<u32> = (0..3).map(|_| rng.random_range(1..=spec.operand_max)).collect();
            let full: BTreeSet<i64> = all_expressions(&operands, 3)
                .into_iter()
                .map(|(_, v)| v)
                .filter(|&v| (0..=spec.target_max).contains(&v))
                .collect();
            if full.is_empty() {
                return None;
            }
            let vals: Vec<i64> = full.into_iter().collect();
            let target = vals[rng.random_range(0..vals.len())];
            Some(Payload::Countdown { operands, target })
        }
        TaskKind::DigitSort => {
            let digits = (0..spec.sort_len).map(|_| rng.random_range(0..10)).collect();
            Some(Payload::Sort { digits })
        }
        TaskKind::ModArith => {
            let m = rng.random_range(2..=spec.modulus_max);
            let a = rng.random_range(0..2 * spec.modulus_max);
            let b = rng.random_range(0..2 * spec.modulus_max);
            Some(Payload::ModArith { a, b, m })
        }
    }
}

/// Draw `n` instances of `split`, deterministic in `seed`.
///
/// Splits are disjoint: an instance belongs to the eval split iff a hash of
/// its payload is divisible by 5.
pub fn generate(spec: &TaskSpec, split: Split, n: usize, seed: u64) -> Result<Vec<Instance>> {
    if n == 0 {
        return Err(Error::InvalidArgument("generate needs n >= 1".into()));
    }
    if spec.kind == TaskKind::DigitSort && !(1..=8).contains(&spec.sort_len) {
        return Err(Error::InvalidArgument(format!("sort_len {} outside 1..=8", spec.sort_len)));
    }
    if spec.kind == TaskKind::ModArith && !(2..=13).contains(&spec.modulus_max) {
        return Err(Error::InvalidArgument(format!("modulus_max {} outside 2..=13", spec.modulus_max)));
    }
    let mut rng = substream(seed, spec.kind.name(), matches!(split, Split::Eval) as u64);
    let mut out = Vec::with_capacity(n);
    let mut misses = 0;
    while out.len() < n {
        match draw_payload(spec, &mut rng) {
            Some(p) if in_split(&p, split) => {
                misses = 0;
                out.push(Instance::from_payload(p));
            }
            _ => {
                misses += 1;
                if misses > MAX_RETRIES {
                    return Err(Error::Generation(format!("retries exhausted after {} instances", out.len())));
                }
            }
        }
    }
    Ok(out)
}

/// Tokens before the first EOS or PAD.
fn answer_body(completion: &[Token]) -> &[Token] {
    let end = completion.iter().position(|&t| t == EOS || t == PAD).unwrap_or(completion.len());
    &completion[..end]
}

fn parse_number(tokens: &[Token]) -> Option<u64> {
    if tokens.is_empty() || tokens.len() > 6 || tokens.iter().any(|&t| t > 9) {
        return None;
    }
    if tokens.len() > 1 && tokens[0] == 0 {
        return None;
    }
    Some(tokens.iter().fold(0u64, |acc, &d| acc * 10 + d as u64))
}

/// Binary verifiable reward; malformed completions score 0.
pub fn reward(instance: &Instance, completion: &[Token]) -> f64 {
    let body = answer_body(completion);
    let ok = match &instance.payload {
        Payload::Countdown { operands, target } => verify_countdown(operands, *target, body),
        Payload::Sort { digits } => {
            let mut expect: Vec<Token> = digits.iter().map(|&d| d as Token).collect();
            expect.sort_unstable();
            body == expect.as_slice()
        }
        Payload::ModArith { a, b, m } => parse_number(body) == Some(((a + b) % m) as u64),
    };
    if ok {
        1.0
    } else {
        0.0
    }
}

fn verify_countdown(operands: &[u32], target: i64, body: &[Token]) -> bool {
    let mut nums = Vec::new();
    let mut ops = Vec::new();
    let mut cur = Vec::new();
    for &t in body {
        match t {
            0..=9 => cur.push(t),
            PLUS | MINUS | TIMES => {
                match parse_number(&cur) {
                    Some(n) => nums.push(n),
                    None => return false,
                }
                cur.clear();
                ops.push(t);
            }
            _ => return false,
        }
    }
    match parse_number(&cur) {
        Some(n) => nums.push(n),
        None => return false,
    }
    let mut pool: Vec<u64> = operands.iter().map(|&o| o as u64).collect();
    for n in &nums {
        match pool.iter().position(|p| p == n) {
            Some(i) => {
                pool.swap_remove(i);
            }
            None => return false,
        }
    }
    let vals: Vec<i64> = nums.iter().map(|&n| n as i64).collect();
    eval_flat(&vals, &ops) == target
}

/// Completion tokens strictly before the first EOS (full length if none).
pub fn effective_tokens(completion: &[Token]) -> usize {
    completion.iter().position(|&t| t == EOS).unwrap_or(completion.len())
}

/// `body`, then EOS, then padding up to `len` (truncated if longer).
pub fn pad_completion(body: &[Token], len: usize) -> Vec<Token> {
    let mut c = body.to_vec();
    c.push(EOS);
    c.resize(len, PAD);
    c.truncate(len);
    c
}

/// Pretraining pairs: with probability `correct_fraction` a verified answer
/// (a uniformly chosen one when several exist), otherwise the task's shortcut
/// answer, which is usually wrong.
pub fn pretrain_corpus(
    spec: &TaskSpec,
    split: Split,
    n: usize,
    seed: u64,
    correct_fraction: f64,
    completion_len: usize,
) -> Result<Vec<PretrainExample>> {
    let instances = generate(spec, split, n, seed)?;
    let mut rng = substream(seed, "corpus", 0);
    Ok(instances
        .into_iter()
        .map(|inst| {
            let body = if rng.random::<f64>() < correct_fraction {
                match &inst.payload {
                    Payload::Countdown { operands, target } => {
                        let sols = countdown_solutions(operands, *target);
                        sols[rng.random_range(0..sols.len())].clone()
                    }
                    _ => inst.reference_answer(),
                }
            } else {
                distractor(&inst.payload)
            };
            PretrainExample { prompt: inst.prompt.0.clone(), completion: pad_completion(&body, completion_len) }
        })
        .collect())
}

/// The task's lazy shortcut answer: operands summed in prompt order, the
/// digits copied unsorted, or the sum without reduction.
fn distractor(p: &Payload) -> Vec<Token> {
    match p {
        Payload::Countdown { operands, .. } => {
            let mut toks = vec![operands[0] as Token];
            for &o in &operands[1..] {
                toks.push(PLUS);
                toks.push(o as Token);
            }
            toks
        }
        Payload::Sort { digits } => digits.iter().map(|&x| x as Token).collect(),
        Payload::ModArith { a, b, .. } => number_tokens((a + b) as u64),
    }
}

pub fn dump_jsonl(instances: &[Instance]) -> Result<String> {
    let mut out = String::new();
    for inst in instances {
        out.push_str(&serde_json::to_string(inst)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn load_jsonl(text: &str) -> Result<Vec<Instance>> {
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Distinct prompts of `instances` (a sanity check for split disjointness).
pub fn prompt_set(instances: &[Instance]) -> HashSet<Vec<Token>> {
    instances.iter().map(|i| i.prompt.0.clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cd(operands: &[u32], target: i64) -> Instance {
        Instance::from_payload(Payload::Countdown { operands: operands.to_vec(), target })
    }

    #[test]
    fn countdown_reward_examples() {
        let inst = cd(&[3, 4, 1], 7);
        assert_eq!(detokenize(inst.prompt.tokens()), "3,4,1=7");
        assert_eq!(reward(&inst, &tokenize("3+4$__").unwrap()), 1.0);
        assert_eq!(reward(&inst, &tokenize("4*1+3$").unwrap()), 1.0);
        assert_eq!(reward(&inst, &tokenize("3*4$").unwrap()), 0.0);
        assert_eq!(reward(&inst, &tokenize("3+3+1$").unwrap()), 0.0);
        assert_eq!(reward(&inst, &tokenize("34$").unwrap()), 0.0);
        assert_eq!(reward(&inst, &[]), 0.0);
        assert_eq!(reward(&inst, &tokenize("$").unwrap()), 0.0);
        assert_eq!(reward(&inst, &tokenize("+3$").unwrap()), 0.0);
    }

    #[test]
    fn sort_and_mod_rewards() {
        let s = Instance::from_payload(Payload::Sort { digits: vec![3, 1, 2] });
        assert_eq!(reward(&s, &tokenize("123$").unwrap()), 1.0);
        assert_eq!(reward(&s, &tokenize("122$").unwrap()), 0.0);
        let m = Instance::from_payload(Payload::ModArith { a: 9, b: 7, m: 5 });
        assert_eq!(detokenize(m.prompt.tokens()), "9+7%5=");
        assert_eq!(reward(&m, &tokenize("1$_").unwrap()), 1.0);
        assert_eq!(reward(&m, &tokenize("01$").unwrap()), 0.0);
    }

    #[test]
    fn effective_token_counts() {
        assert_eq!(effective_tokens(&[1, 2, 3]), 3);
        assert_eq!(effective_tokens(&[1, 2, EOS, PAD, PAD]), 2);
        assert_eq!(effective_tokens(&[EOS, 1]), 0);
    }

    #[test]
    fn generation_is_deterministic_and_reachable() {
        let spec = TaskSpec::new(TaskKind::MiniCountdown);
        let a = generate(&spec, Split::Train, 50, 3).unwrap();
        assert_eq!(a, generate(&spec, Split::Train, 50, 3).unwrap());
        for inst in &a {
            let Payload::Countdown { operands, target } = &inst.payload else { panic!() };
            assert!(operands.iter().all(|&o| (1..=9).contains(&o)));
            assert!(reachable_values(operands).contains(target));
            assert_eq!(reward(inst, &pad_completion(&inst.reference_answer(), 8)), 1.0);
        }
        assert!(generate(&spec, Split::Train, 0, 3).is_err());
    }

    #[test]
    fn splits_are_disjoint() {
        for kind in [TaskKind::MiniCountdown, TaskKind::DigitSort, TaskKind::ModArith] {
            let spec = TaskSpec::new(kind);
            let tr = prompt_set(&generate(&spec, Split::Train, 400, 1).unwrap());
            let ev = prompt_set(&generate(&spec, Split::Eval, 200, 1).unwrap());
            assert!(tr.is_disjoint(&ev), "{kind}");
        }
    }

    #[test]
    fn tokenize_round_trip_and_lengths() {
        for kind in [TaskKind::MiniCountdown, TaskKind::DigitSort, TaskKind::ModArith] {
            let spec = TaskSpec::new(kind);
            for inst in generate(&spec, Split::Train, 200, 5).unwrap() {
                let text = detokenize(inst.prompt.tokens());
                assert_eq!(tokenize(&text).unwrap(), inst.prompt.0);
                assert!(inst.prompt.len() <= spec.max_prompt_len(), "{kind} {text}");
                assert!(inst.reference_answer().len() < spec.completion_len());
            }
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let spec = TaskSpec::new(TaskKind::ModArith);
        let insts = generate(&spec, Split::Eval, 5, 0).unwrap();
        assert_eq!(load_jsonl(&dump_jsonl(&insts).unwrap()).unwrap(), insts);
    }

    #[test]
    fn corpus_mixes_correct_and_distractors() {
        let spec = TaskSpec::new(TaskKind::MiniCountdown);
        let corpus = pretrain_corpus(&spec, Split::Train, 400, 0, 0.5, 8).unwrap();
        let insts = generate(&spec, Split::Train, 400, 0).unwrap();
        let correct = corpus.iter().zip(&insts).filter(|(c, i)| reward(i, &c.completion) == 1.0).count();
        assert!((150..330).contains(&correct), "{correct}");
        assert!(corpus.iter().all(|c| c.completion.len() == 8));
    }
}
