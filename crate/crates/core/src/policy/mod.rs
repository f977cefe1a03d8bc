//! Small causal transformer translator conditioned on a projected prefix.
//!
//! The prefix rows are prepended to the token embeddings; row `m + t` of the
//! final hidden state (where `m` is the prefix length) predicts token `t + 1`.

mod adapter;
mod decode;

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{normal_matrix, sinusoidal_positions, AdapterSpec, Scope};
use crate::tensor::{ParamStore, Result, Tensor, TensorError, Var};

pub use adapter::{adapter_names, init_adapters, merge_adapters, strip_adapters};
pub use decode::{beam_decode, greedy_decode, sample_candidates, DecodeConfig, PolicyStepper, StepModel};

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";

/// Dense token ids. Content tokens come first, then `<bos>`, `<eos>`, `<pad>`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<S: AsRef<str>>(words: &[S]) -> std::result::Result<Self, String> {
        let mut tokens: Vec<String> = Vec::with_capacity(words.len() + 3);
        let mut index = HashMap::new();
        for w in words.iter().map(AsRef::as_ref).chain([BOS, EOS, PAD]) {
            if w.is_empty() {
                return Err("empty token".into());
            }
            if index.insert(w.to_string(), tokens.len()).is_some() {
                return Err(format!("duplicate token `{w}`"));
            }
            tokens.push(w.to_string());
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bos(&self) -> usize {
        self.tokens.len() - 3
    }

    pub fn eos(&self) -> usize {
        self.tokens.len() - 2
    }

    pub fn pad(&self) -> usize {
        self.tokens.len() - 1
    }

    pub fn content_words(&self) -> &[String] {
        &self.tokens[..self.tokens.len() - 3]
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Whitespace-split words to ids, followed by `<eos>`.
    pub fn encode(&self, text: &str) -> std::result::Result<Vec<usize>, String> {
        let mut ids = text
            .split_whitespace()
            .map(|w| self.id(w).ok_or_else(|| format!("unknown word `{w}`")))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        ids.push(self.eos());
        Ok(ids)
    }

    /// Content words up to the first `<eos>`, reserved ids dropped.
    pub fn decode_words(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != self.eos())
            .filter(|&&i| i < self.bos())
            .map(|&i| self.tokens[i].clone())
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        self.decode_words(ids).join(" ")
    }
}

/// Output of the fusion projector; one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedPrefix {
    pub z: Tensor,
}

impl ProjectedPrefix {
    pub fn new(z: Tensor) -> Result<Self> {
        if !z.is_finite() {
            return Err(TensorError::NonFinite { op: "prefix", node: 0 });
        }
        Ok(Self { z })
    }

    pub fn len(&self) -> usize {
        self.z.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.rows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub layers: usize,
    pub ffn_hidden: usize,
}

/// Architecture handle; weights live in a [`ParamStore`] under `policy.`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Policy {
    pub cfg: PolicyConfig,
}

impl Policy {
    pub fn new(cfg: PolicyConfig) -> Self {
        Self { cfg }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        let PolicyConfig { vocab_size: v, d_model: d, layers, ffn_hidden: h } = self.cfg;
        let sd = (1.0 / d as f64).sqrt();
        store.insert("policy.tok_emb", normal_matrix(rng, v, d, 1.0));
        for l in 0..layers {
            for m in ["q_proj", "k_proj", "v_proj", "o_proj"] {
                store.insert(format!("policy.layers.{l}.{m}"), normal_matrix(rng, d, d, sd));
            }
            store.insert(format!("policy.layers.{l}.ffn_in"), normal_matrix(rng, d, h, sd));
            store.insert(format!("policy.layers.{l}.ffn_in_bias"), Tensor::zeros(&[1, h]));
            store.insert(
                format!("policy.layers.{l}.ffn_out"),
                normal_matrix(rng, h, d, (1.0 / h as f64).sqrt()),
            );
            store.insert(format!("policy.layers.{l}.ffn_out_bias"), Tensor::zeros(&[1, d]));
        }
        store.insert("policy.out_proj", normal_matrix(rng, v, d, sd));
        store.insert("policy.out_bias", Tensor::zeros(&[1, v]));
    }

    /// Final-layer logits for every position after a prefix row block.
    /// Returns `(inputs.len(), vocab)`; row `t` is the distribution of the
    /// token following `inputs[..=t]`. With `last_only` just the final row.
    pub fn logits(&self, s: &mut Scope, prefix: Var, inputs: &[usize], last_only: bool) -> Result<Var> {
        let d = self.cfg.d_model;
        let m = s.g.value(prefix).rows();
        if s.g.value(prefix).cols() != d {
            return Err(TensorError::ShapeMismatch {
                op: "policy_prefix",
                node: prefix.index(),
                lhs: s.g.shape(prefix).to_vec(),
                rhs: vec![m, d],
            });
        }
        if let Some(&bad) = inputs.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(TensorError::Invalid(format!("token id {bad} out of range")));
        }
        let total = m + inputs.len();
        let emb = s.p("policy.tok_emb")?;
        let tok = s.g.gather_rows(emb, inputs)?;
        let x = s.g.concat(&[prefix, tok], 0)?;
        let pos = s.constant(sinusoidal_positions(total, d));
        let mut x = s.g.add(x, pos)?;
        let mask = causal_mask(total);
        for l in 0..self.cfg.layers {
            let h = s.norm_rows(x)?;
            let q = s.linear(h, &format!("policy.layers.{l}.q_proj"), false)?;
            let k = s.linear(h, &format!("policy.layers.{l}.k_proj"), false)?;
            let v = s.linear(h, &format!("policy.layers.{l}.v_proj"), false)?;
            let scores = s.g.matmul_t(q, k, false, true)?;
            let att = s.g.softmax_rows(scores, (d as f64).sqrt(), Some(&mask))?;
            let mixed = s.g.matmul(att, v)?;
            let o = s.linear(mixed, &format!("policy.layers.{l}.o_proj"), false)?;
            x = s.g.add(x, o)?;
            let h = s.norm_rows(x)?;
            let f = s.linear(h, &format!("policy.layers.{l}.ffn_in"), false)?;
            let fb = s.p(&format!("policy.layers.{l}.ffn_in_bias"))?;
            let f = s.g.add(f, fb)?;
            let f = s.g.tanh(f)?;
            let f = s.linear(f, &format!("policy.layers.{l}.ffn_out"), false)?;
            let fb = s.p(&format!("policy.layers.{l}.ffn_out_bias"))?;
            let f = s.g.add(f, fb)?;
            x = s.g.add(x, f)?;
        }
        let start = if last_only { total - 1 } else { m };
        let rows = s.g.slice(x, 0, start, total)?;
        let h = s.norm_rows(rows)?;
        let logits = s.linear(h, "policy.out_proj", true)?;
        let bias = s.p("policy.out_bias")?;
        s.g.add(logits, bias)
    }

    /// Per-token log-probabilities of `tokens` (teacher forced from `<bos>`),
    /// shape `(1, tokens.len())`.
    pub fn token_log_probs(&self, s: &mut Scope, prefix: Var, tokens: &[usize], bos: usize) -> Result<Var> {
        if tokens.is_empty() {
            return Err(TensorError::Invalid("empty token sequence".into()));
        }
        let mut inputs = Vec::with_capacity(tokens.len());
        inputs.push(bos);
        inputs.extend_from_slice(&tokens[..tokens.len() - 1]);
        let logits = self.logits(s, prefix, &inputs, false)?;
        let logp = s.g.log_softmax_rows(logits)?;
        let v = self.cfg.vocab_size;
        let idx: Vec<usize> = tokens.iter().enumerate().map(|(i, &t)| i * v + t).collect();
        s.g.gather(logp, &idx)
    }

    /// Summed negative log-likelihood of each reference, averaged over the batch.
    pub fn sft_loss(&self, s: &mut Scope, batch: &[(Var, &[usize])], bos: usize) -> Result<Var> {
        if batch.is_empty() {
            return Err(TensorError::Invalid("empty batch".into()));
        }
        let mut totals = Vec::with_capacity(batch.len());
        for &(prefix, tokens) in batch {
            let lp = self.token_log_probs(s, prefix, tokens, bos)?;
            totals.push(s.g.sum(lp)?);
        }
        let all = s.g.concat(&totals, 1)?;
        let mean = s.g.mean(all)?;
        s.g.scale(mean, -1.0)
    }

    /// Probability vector for the token after `generated`.
    pub fn next_token_distribution(
        &self,
        params: &ParamStore,
        adapters: Option<&AdapterSpec>,
        prefix: &ProjectedPrefix,
        generated: &[usize],
        bos: usize,
    ) -> Result<Vec<f64>> {
        let lp = self.next_token_log_probs(params, adapters, prefix, generated, bos)?;
        Ok(lp.iter().map(|v| v.exp()).collect())
    }

    pub fn next_token_log_probs(
        &self,
        params: &ParamStore,
        adapters: Option<&AdapterSpec>,
        prefix: &ProjectedPrefix,
        generated: &[usize],
        bos: usize,
    ) -> Result<Vec<f64>> {
        let mut s = Scope::eval(params, adapters);
        let p = s.constant(prefix.z.clone());
        let mut inputs = Vec::with_capacity(generated.len() + 1);
        inputs.push(bos);
        inputs.extend_from_slice(generated);
        let logits = self.logits(&mut s, p, &inputs, true)?;
        let lp = s.g.log_softmax_rows(logits)?;
        Ok(s.g.value(lp).data().to_vec())
    }

    /// `(total, per_token)` log-probability of a complete sequence.
    pub fn sequence_log_prob(
        &self,
        params: &ParamStore,
        adapters: Option<&AdapterSpec>,
        prefix: &ProjectedPrefix,
        tokens: &[usize],
        bos: usize,
    ) -> Result<(f64, Vec<f64>)> {
        let mut s = Scope::eval(params, adapters);
        let p = s.constant(prefix.z.clone());
        let lp = self.token_log_probs(&mut s, p, tokens, bos)?;
        let per = s.g.value(lp).data().to_vec();
        Ok((per.iter().sum(), per))
    }
}

pub(crate) fn causal_mask(n: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            m.push(j <= i);
        }
    }
    m
}
