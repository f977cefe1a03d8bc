//! Browser bindings for three small pieces of the library: sentence scoring,
//! group-relative advantages with the clipped surrogate, and a GRPO bandit
//! run. Everything returns plain numbers or JSON text so the page needs no
//! glue beyond `wasm-bindgen`.

use serde_json::json;
use wasm_bindgen::prelude::*;

use signrl::grpo::{clipped_term, group_advantages, reward_tokens, rft_train, BanditTask, GrpoConfig, PolicyTriple, RewardConfig};
use signrl::metrics::{bleu, rouge_l, tokenize, Smoothing, TokenMode};

/// Scores one candidate against one reference. Returns JSON with BLEU-1..4,
/// ROUGE-L, the tokens seen, and the reward at mixing weight `lambda`.
#[wasm_bindgen]
pub fn score_pair(candidate: &str, reference: &str, mode: &str, lambda: f64) -> Result<String, String> {
    let mode: TokenMode = mode.parse()?;
    let (c, r) = (tokenize(candidate, mode), tokenize(reference, mode));
    let b = |n| bleu(&c, &r, n, Smoothing::None).map_err(|e| e.to_string());
    let cfg = RewardConfig { lambda, ..RewardConfig::default() };
    let reward = reward_tokens(c.tokens(), r.tokens(), &cfg).map_err(|e| e.to_string())?;
    Ok(json!({
        "bleu": [b(1)?, b(2)?, b(3)?, b(4)?],
        "rouge_l": rouge_l(&c, &r, 1.0).map_err(|e| e.to_string())?,
        "reward": reward,
        "candidate_tokens": c.tokens(),
        "reference_tokens": r.tokens(),
    })
    .to_string())
}

/// Standardized advantages of a reward group.
#[wasm_bindgen]
pub fn advantages(rewards: &[f64]) -> Result<Vec<f64>, String> {
    group_advantages(rewards, 1e-8).map_err(|e| e.to_string())
}

/// The clipped surrogate `min(rho A, clip(rho) A)` sampled at `points`
/// ratios evenly spaced over `[0, 2]`.
#[wasm_bindgen]
pub fn surrogate_curve(advantage: f64, epsilon: f64, points: usize) -> Vec<f64> {
    let n = points.max(2);
    (0..n).map(|i| clipped_term(2.0 * i as f64 / (n - 1) as f64, advantage, epsilon)).collect()
}

/// Probability of the rewarded arm after each GRPO step on the bandit task.
#[wasm_bindgen]
pub fn bandit_curve(arms: usize, steps: usize, lr: f64, kl: f64, seed: u64) -> Result<Vec<f64>, String> {
    if arms < 2 {
        return Err("need at least two arms".into());
    }
    let task = BanditTask { arms, rewarded: 0 };
    let mut triple = PolicyTriple::new(task.init(), task.init());
    let cfg = GrpoConfig { lr, kl_coefficient: kl, epochs: steps, prompts_per_step: 1, ..GrpoConfig::default() };
    let mut curve = vec![1.0 / arms as f64];
    rft_train(&task, &mut triple, &cfg, seed, |_, t| {
        curve.push(task.probabilities(&t.theta)?[0]);
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    Ok(curve)
}
