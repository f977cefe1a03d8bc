use std::cmp::Ordering;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Policy, ProjectedPrefix};
use crate::nn::AdapterSpec;
use crate::tensor::{ParamStore, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// Maximum generated tokens, `<eos>` included.
    pub max_len: usize,
    pub temperature: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self { beam_width: 5, max_len: 300, temperature: 1.0 }
    }
}

/// Anything that yields next-token log-probabilities for a generated prefix.
pub trait StepModel {
    fn next_log_probs(&self, generated: &[usize]) -> Result<Vec<f64>>;
    fn eos(&self) -> usize;
}

/// A policy bound to one prompt.
pub struct PolicyStepper<'a> {
    pub policy: &'a Policy,
    pub params: &'a ParamStore,
    pub adapters: Option<&'a AdapterSpec>,
    pub prefix: &'a ProjectedPrefix,
    pub bos: usize,
    pub eos: usize,
}

impl StepModel for PolicyStepper<'_> {
    fn next_log_probs(&self, generated: &[usize]) -> Result<Vec<f64>> {
        self.policy.next_token_log_probs(self.params, self.adapters, self.prefix, generated, self.bos)
    }

    fn eos(&self) -> usize {
        self.eos
    }
}

/// Highest log-probability token; ties go to the smaller id.
fn argmax(lp: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in lp.iter().enumerate() {
        if v > lp[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(model: &impl StepModel, max_len: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    while out.len() < max_len {
        let t = argmax(&model.next_log_probs(&out)?);
        out.push(t);
        if t == model.eos() {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<usize>,
    logp: f64,
}

impl Hyp {
    fn normalized(&self) -> f64 {
        self.logp / self.tokens.len().max(1) as f64
    }
}

/// Higher score first, then lexicographically smaller token ids.
fn rank(a: f64, b: f64, ta: &[usize], tb: &[usize]) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal).then_with(|| ta.cmp(tb))
}

/// Beam search over raw cumulative log-probability; finished hypotheses are
/// compared by log-probability divided by token count.
///
/// Each step keeps the best `beam_width` expansions; those ending in `<eos>`
/// move to the finished pool. Search stops when nothing is alive, or when a
/// full pool of finished hypotheses all score at least as well as the best
/// live one.
pub fn beam_decode(model: &impl StepModel, cfg: &DecodeConfig) -> Result<Vec<usize>> {
    if cfg.beam_width == 0 {
        return Err(TensorError::Invalid("beam width must be >= 1".into()));
    }
    let eos = model.eos();
    let mut alive = vec![Hyp { tokens: Vec::new(), logp: 0.0 }];
    let mut finished: Vec<Hyp> = Vec::new();
    for _ in 0..cfg.max_len {
        let mut cands = Vec::with_capacity(alive.len() * 8);
        for h in &alive {
            let lp = model.next_log_probs(&h.tokens)?;
            for (t, &v) in lp.iter().enumerate() {
                if v == f64::NEG_INFINITY {
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                cands.push(Hyp { tokens, logp: h.logp + v });
            }
        }
        cands.sort_by(|a, b| rank(a.logp, b.logp, &a.tokens, &b.tokens));
        cands.truncate(cfg.beam_width);
        alive.clear();
        for c in cands {
            if c.tokens.last() == Some(&eos) {
                finished.push(c);
            } else {
                alive.push(c);
            }
        }
        finished.sort_by(|a, b| rank(a.normalized(), b.normalized(), &a.tokens, &b.tokens));
        finished.truncate(cfg.beam_width);
        let Some(best_alive) = alive.iter().map(Hyp::normalized).reduce(f64::max) else { break };
        if finished.len() == cfg.beam_width && finished.iter().all(|f| f.normalized() >= best_alive) {
            break;
        }
    }
    let pool = if finished.is_empty() { &mut alive } else { &mut finished };
    pool.sort_by(|a, b| rank(a.normalized(), b.normalized(), &a.tokens, &b.tokens));
    Ok(pool.first().map(|h| h.tokens.clone()).unwrap_or_default())
}

/// Inverse-CDF draw from `softmax(lp / temperature)`.
fn sample_token(lp: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let mx = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = lp.iter().map(|v| ((v - mx) / temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    let u = rng.gen::<f64>() * z;
    let mut acc = 0.0;
    for (i, &p) in w.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    argmax(lp)
}

/// `n` ancestral samples, each ending at `<eos>` or truncated at `max_len`.
pub fn sample_candidates(model: &impl StepModel, n: usize, cfg: &DecodeConfig, seed: u64) -> Result<Vec<Vec<usize>>> {
    if !(cfg.temperature > 0.0) {
        return Err(TensorError::Invalid("sampling temperature must be > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut seq = Vec::new();
        while seq.len() < cfg.max_len {
            let t = sample_token(&model.next_log_probs(&seq)?, cfg.temperature, &mut rng);
            seq.push(t);
            if t == model.eos() {
                break;
            }
        }
        out.push(seq);
    }
    Ok(out)
}
