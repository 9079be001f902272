//! Shared helpers for the integration suites: finite-difference gradient
//! checking, random table-driven scorers for beam search, and exhaustive
//! sequence enumeration.

#![allow(dead_code)]

use histnorm::decode::{DecodeError, StepScorer};
use histnorm::tensor::log_softmax_row_f64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Central finite differences: `df/dx_i ~ (f(x+h e_i) - f(x-h e_i)) / 2h`.
pub fn finite_diff_grad(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Per-coordinate relative comparison with a small absolute floor for
/// near-zero entries.
pub fn max_grad_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| {
            let denom = a.abs().max(n.abs()).max(1e-4);
            (a - n).abs() / denom
        })
        .fold(0.0, f64::max)
}

pub fn assert_grads_close(analytic: &[f64], numeric: &[f64], tol: f64, context: &str) {
    let err = max_grad_error(analytic, numeric);
    assert!(
        err <= tol,
        "{context}: max relative gradient error {err:.3e} exceeds {tol:.1e}"
    );
}

/// Random vector with entries in (-1, 1), kept away from zero by `margin`
/// (for kinked ops like relu).
pub fn random_values(rng: &mut ChaCha8Rng, n: usize, margin: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.gen_range(-1.0..1.0);
            
            if v.abs() < margin { margin * v.signum().max(0.5) } else { v }
        })
        .collect()
}

/// Log-probability table scorer: row `min(prefix_len, rows-1)` of a fixed
/// table, independent of which symbols were chosen. Rows are normalized
/// log-softmax values.
#[derive(Clone)]
pub struct TableScorer {
    pub rows: Vec<Vec<f64>>,
    pub eos: u32,
}

impl TableScorer {
    /// Random scorer over `vocab` symbols (symbol 0 is EOS) with `depth`
    /// distinct rows, logits drawn from N(0,1)-ish uniform noise.
    pub fn random(rng: &mut ChaCha8Rng, vocab: usize, depth: usize) -> Self {
        let rows = (0..depth)
            .map(|_| {
                let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
                log_softmax_row_f64(&logits)
            })
            .collect();
        TableScorer { rows, eos: 0 }
    }
}

impl StepScorer for TableScorer {
    type State = usize;

    fn vocab_size(&self) -> usize {
        self.rows[0].len()
    }
    fn eos_id(&self) -> u32 {
        self.eos
    }
    fn start(&self) -> Result<(usize, Vec<f64>), DecodeError> {
        Ok((0, self.rows[0].clone()))
    }
    fn step(&self, state: &usize, _symbol: u32) -> Result<(usize, Vec<f64>), DecodeError> {
        let next = (*state + 1).min(self.rows.len() - 1);
        Ok((next, self.rows[next].clone()))
    }
}

/// Prefix-dependent scorer: logits keyed by the exact generated prefix, so
/// different histories genuinely score differently (unlike `TableScorer`).
#[derive(Clone)]
pub struct HashScorer {
    pub vocab: usize,
    pub seed: u64,
}

impl StepScorer for HashScorer {
    type State = Vec<u32>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn eos_id(&self) -> u32 {
        0
    }
    fn start(&self) -> Result<(Vec<u32>, Vec<f64>), DecodeError> {
        Ok((vec![], self.logprobs(&[])))
    }
    fn step(&self, state: &Vec<u32>, symbol: u32) -> Result<(Vec<u32>, Vec<f64>), DecodeError> {
        let mut next = state.clone();
        next.push(symbol);
        let lp = self.logprobs(&next);
        Ok((next, lp))
    }
}

impl HashScorer {
    fn logprobs(&self, prefix: &[u32]) -> Vec<f64> {
        // Cheap deterministic hash of (seed, prefix, symbol) into logits.
        let mut h = self.seed.wrapping_mul(0x9e3779b97f4a7c15);
        for &s in prefix {
            h = (h ^ s as u64).wrapping_mul(0x2545f4914f6cdd1d);
        }
        let logits: Vec<f64> = (0..self.vocab)
            .map(|sym| {
                let mut v = (h ^ (sym as u64).wrapping_mul(0xd6e8feb86659fd93))
                    .wrapping_mul(0x94d049bb133111eb);
                v ^= v >> 31;
                (v % 10_000) as f64 / 2_500.0 - 2.0
            })
            .collect();
        log_softmax_row_f64(&logits)
    }
}

/// All complete sequences with content length `<= max_len` (EOS appended and
/// scored), best first-found argmax by raw score.
#[allow(clippy::type_complexity)]
pub fn exhaustive_argmax<S: StepScorer>(scorer: &S, max_len: usize) -> (Vec<u32>, f64) {
    let eos = scorer.eos_id();
    let vocab = scorer.vocab_size();
    let mut best: Option<(Vec<u32>, f64)> = None;
    let mut stack: Vec<(S::State, Vec<f64>, Vec<u32>, f64)> = Vec::new();
    let (s0, lp0) = scorer.start().unwrap();
    stack.push((s0, lp0, vec![], 0.0));
    while let Some((state, lp, prefix, score)) = stack.pop() {
        let complete = score + lp[eos as usize];
        let better = match &best {
            None => true,
            Some((_, b)) => complete > *b,
        };
        if better {
            best = Some((prefix.clone(), complete));
        }
        if prefix.len() < max_len {
            for sym in 0..vocab as u32 {
                if sym == eos || lp[sym as usize] == f64::NEG_INFINITY {
                    continue;
                }
                let (next_state, next_lp) = scorer.step(&state, sym).unwrap();
                let mut next_prefix = prefix.clone();
                next_prefix.push(sym);
                stack.push((next_state, next_lp, next_prefix, score + lp[sym as usize]));
            }
        }
    }
    best.unwrap()
}
