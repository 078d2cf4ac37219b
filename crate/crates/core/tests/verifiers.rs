//! `reward` against independent string-level verifiers.

use std::collections::HashSet;

use diffpo::rng::substream;
use diffpo::tasks::{detokenize, generate, reward, tokenize, Payload, Split, TaskKind, TaskSpec};
use rand::seq::IndexedRandom;
use rand::Rng;

/// Evaluate a flat `+ - *` expression string with usual precedence.
fn eval_str(expr: &str) -> i64 {
    expr.split_inclusive(['+', '-'])
        .fold((0i64, 1i64), |(acc, sign), chunk| {
            let (term, next) = match chunk.strip_suffix(['+', '-']) {
                Some(t) => (t, if chunk.ends_with('+') { 1 } else { -1 }),
                None => (chunk, 0),
            };
            let value: i64 = term.split('*').map(|f| f.parse::<i64>().unwrap()).product();
            (acc + sign * value, next)
        })
        .0
}

/// Every expression string over `operands` (each used at most once).
fn expressions(operands: &[u32]) -> HashSet<String> {
    let mut out = HashSet::new();
    let n = operands.len();
    for mask in 1u32..(1 << n) {
        let chosen: Vec<u32> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| operands[i]).collect();
        permute(&chosen, &mut Vec::new(), &mut vec![false; chosen.len()], &mut out);
    }
    out
}

fn permute(items: &[u32], cur: &mut Vec<u32>, used: &mut Vec<bool>, out: &mut HashSet<String>) {
    if cur.len() == items.len() {
        let slots = cur.len() - 1;
        for code in 0..3usize.pow(slots as u32) {
            let mut s = cur[0].to_string();
            let mut c = code;
            for &x in &cur[1..] {
                s.push(['+', '-', '*'][c % 3]);
                c /= 3;
                s.push_str(&x.to_string());
            }
            out.insert(s);
        }
        return;
    }
    for i in 0..items.len() {
        if !used[i] {
            used[i] = true;
            cur.push(items[i]);
            permute(items, cur, used, out);
            cur.pop();
            used[i] = false;
        }
    }
}

fn body(text: &str) -> &str {
    let end = text.find(['$', '_']).unwrap_or(text.len());
    &text[..end]
}

fn oracle(p: &Payload, completion: &str) -> f64 {
    let b = body(completion);
    let ok = match p {
        Payload::Countdown { operands, target } => {
            expressions(operands).contains(b) && eval_str(b) == *target
        }
        Payload::Sort { digits } => {
            let mut d: Vec<char> = digits.iter().map(|&x| char::from(b'0' + x as u8)).collect();
            d.sort_unstable();
            b == d.into_iter().collect::<String>()
        }
        Payload::ModArith { a, b: bb, m } => b == ((a + bb) % m).to_string(),
    };
    if ok {
        1.0
    } else {
        0.0
    }
}

const ALPHABET: &[u8] = b"0123456789+-*=,%>$_";

fn candidate(p: &Payload, rng: &mut diffpo::rng::Rng) -> String {
    let random = |rng: &mut diffpo::rng::Rng, n: usize| -> String {
        (0..n).map(|_| *ALPHABET.choose(rng).unwrap() as char).collect()
    };
    let mut s = match (rng.random_range(0..4), p) {
        (0, _) => {
            let n = rng.random_range(0..9);
            random(rng, n)
        }
        (_, Payload::Countdown { operands, .. }) => {
            let all: Vec<String> = expressions(operands).into_iter().collect();
            let mut pick = all.choose(rng).unwrap().clone();
            if rng.random_bool(0.2) {
                pick.push_str(&random(rng, 1));
            }
            pick
        }
        (_, Payload::Sort { digits }) => {
            let mut d: Vec<char> = digits.iter().map(|&x| char::from(b'0' + x as u8)).collect();
            if rng.random_bool(0.6) {
                d.sort_unstable();
            }
            if rng.random_bool(0.2) {
                d.pop();
            }
            d.into_iter().collect()
        }
        (_, Payload::ModArith { a, b, m }) => {
            let v = if rng.random_bool(0.5) { (a + b) % m } else { rng.random_range(0..30) };
            if rng.random_bool(0.1) { format!("0{v}") } else { v.to_string() }
        }
    };
    if rng.random_bool(0.8) {
        s.push('$');
    }
    while s.len() < 8 && rng.random_bool(0.7) {
        s.push('_');
    }
    s
}

#[test]
fn reward_agrees_with_brute_force_verifiers() {
    for kind in [TaskKind::MiniCountdown, TaskKind::DigitSort, TaskKind::ModArith] {
        let spec = TaskSpec::new(kind);
        let instances = generate(&spec, Split::Train, 500, 17).unwrap();
        let mut rng = substream(3, kind.name(), 0);
        let mut positives = 0;
        for n in 0..10_000 {
            let inst = &instances[n % instances.len()];
            let text = candidate(&inst.payload, &mut rng);
            let r = reward(inst, &tokenize(&text).unwrap());
            assert_eq!(r, oracle(&inst.payload, &text), "{kind} prompt {} completion {text}", detokenize(inst.prompt.tokens()));
            positives += r as usize;
        }
        assert!(positives > 100, "{kind}: only {positives} positive pairs");
    }
}
