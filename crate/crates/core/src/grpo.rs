//! Group-relative policy optimization: sentence-level rewards, standardized
//! group advantages, a clipped surrogate with a KL penalty to a frozen
//! reference, and the update loop.

use std::hash::Hash;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{bleu_tokens, rouge_l_tokens, MetricError, Smoothing};
use crate::nn::{AdapterSpec, Scope, Trainable};
use crate::optim::{AdamW, AdamWConfig};
use crate::runlog::{LogRecord, RunLog};
use crate::tensor::{ParamStore, Tensor, TensorError, Var};

#[derive(Debug, thiserror::Error)]
pub enum GrpoError {
    #[error("a group needs at least 2 candidates, got {0}")]
    GroupTooSmall(usize),
    #[error("log-prob lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no prompts to train on")]
    EmptyDataset,
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, GrpoError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub lambda: f64,
    pub smoothing: Smoothing,
    /// Append one sentinel token to both sides when the reference is
    /// shorter than four tokens, so short sentences still have 4-grams.
    pub pad_short_targets: bool,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { lambda: 0.5, smoothing: Smoothing::AddEps, pad_short_targets: false }
    }
}

#[derive(Hash, PartialEq, Eq)]
enum Padded<'a, T> {
    Tok(&'a T),
    End,
}

fn padded<T>(xs: &[T]) -> Vec<Padded<'_, T>> {
    xs.iter().map(Padded::Tok).chain([Padded::End]).collect()
}

/// `lambda * BLEU-4 + (1 - lambda) * ROUGE-L` on the 0..100 scale.
pub fn reward_tokens<T: Hash + Eq>(candidate: &[T], reference: &[T], cfg: &RewardConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&cfg.lambda) {
        return Err(GrpoError::Config(format!("lambda {} outside [0, 1]", cfg.lambda)));
    }
    if reference.is_empty() {
        return Err(MetricError::EmptyReference.into());
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let (b, r) = if cfg.pad_short_targets && reference.len() < 4 {
        let (c, r) = (padded(candidate), padded(reference));
        (bleu_tokens(&c, &r, 4, cfg.smoothing)?, rouge_l_tokens(&c, &r, 1.0)?)
    } else {
        (bleu_tokens(candidate, reference, 4, cfg.smoothing)?, rouge_l_tokens(candidate, reference, 1.0)?)
    };
    Ok(cfg.lambda * b + (1.0 - cfg.lambda) * r)
}

/// Rewards standardized within the group with the population std; a group
/// whose std falls below `eps_std` gets all-zero advantages.
pub fn group_advantages(rewards: &[f64], eps_std: f64) -> Result<Vec<f64>> {
    let n = rewards.len();
    if n < 2 {
        return Err(GrpoError::GroupTooSmall(n));
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if std < eps_std {
        return Ok(vec![0.0; n]);
    }
    Ok(rewards.iter().map(|r| (r - mean) / std).collect())
}

/// Token-averaged `exp(d) - d - 1` with `d = logp_ref - logp_theta`.
pub fn kl_estimate(logp_theta: &[f64], logp_ref: &[f64]) -> Result<f64> {
    if logp_theta.len() != logp_ref.len() {
        return Err(GrpoError::LengthMismatch(logp_theta.len(), logp_ref.len()));
    }
    if logp_theta.is_empty() {
        return Err(GrpoError::LengthMismatch(0, 0));
    }
    let total: f64 = logp_theta
        .iter()
        .zip(logp_ref)
        .map(|(t, r)| {
            let d = r - t;
            (d.exp() - d - 1.0).max(0.0)
        })
        .sum();
    Ok(total / logp_theta.len() as f64)
}

/// `min(rho * a, clip(rho, 1 - eps, 1 + eps) * a)`.
pub fn clipped_term(rho: f64, advantage: f64, eps: f64) -> f64 {
    (rho * advantage).min(rho.clamp(1.0 - eps, 1.0 + eps) * advantage)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatioLevel {
    Token,
    Sequence,
}

impl std::str::FromStr for RatioLevel {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "token" => Ok(Self::Token),
            "sequence" => Ok(Self::Sequence),
            _ => Err(format!("unknown ratio level `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub epsilon_clip: f64,
    pub kl_coefficient: f64,
    pub eps_std: f64,
    pub lr: f64,
    pub epochs: usize,
    /// Optimizer steps between copies of the current policy into the
    /// behavior snapshot.
    pub refresh_every: usize,
    pub prompts_per_step: usize,
    pub ratio_level: RatioLevel,
    /// Cosine-decay the learning rate to zero over the run.
    pub cosine_decay: bool,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            group_size: 8,
            epsilon_clip: 0.2,
            kl_coefficient: 0.04,
            eps_std: 1e-8,
            lr: 1e-4,
            epochs: 2,
            refresh_every: 1,
            prompts_per_step: 4,
            ratio_level: RatioLevel::Token,
            cosine_decay: false,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(GrpoError::GroupTooSmall(self.group_size));
        }
        if !(self.epsilon_clip > 0.0 && self.epsilon_clip < 1.0) {
            return Err(GrpoError::Config(format!("epsilon_clip {} outside (0, 1)", self.epsilon_clip)));
        }
        if !(self.kl_coefficient >= 0.0) {
            return Err(GrpoError::Config("kl_coefficient must be >= 0".into()));
        }
        if self.refresh_every == 0 || self.prompts_per_step == 0 {
            return Err(GrpoError::Config("refresh_every and prompts_per_step must be >= 1".into()));
        }
        Ok(())
    }
}

/// One prompt's sampled candidates with everything the objective needs
/// besides the current policy's log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGroup {
    pub prompt: usize,
    pub candidates: Vec<Vec<usize>>,
    pub rewards: Vec<f64>,
    pub advantages: Vec<f64>,
    pub logp_old: Vec<Vec<f64>>,
    pub logp_ref: Vec<Vec<f64>>,
}

/// Negated GRPO objective for one group. `logp_theta[i]` is a `(1, T_i)`
/// node holding the current policy's per-token log-probabilities of
/// candidate `i`; gradients flow only through those nodes.
pub fn grpo_loss(s: &mut Scope, logp_theta: &[Var], group: &CandidateGroup, cfg: &GrpoConfig) -> Result<Var> {
    let n = group.candidates.len();
    if n < 2 {
        return Err(GrpoError::GroupTooSmall(n));
    }
    for len in [logp_theta.len(), group.advantages.len(), group.logp_old.len(), group.logp_ref.len()] {
        if len != n {
            return Err(GrpoError::LengthMismatch(len, n));
        }
    }
    let eps = cfg.epsilon_clip;
    let mut contributions = Vec::with_capacity(n);
    for i in 0..n {
        let theta = logp_theta[i];
        let t = s.g.value(theta).numel();
        let (old, reference) = (&group.logp_old[i], &group.logp_ref[i]);
        if old.len() != t || reference.len() != t {
            return Err(GrpoError::LengthMismatch(t, old.len().min(reference.len())));
        }
        let a = group.advantages[i];
        let surrogate = match cfg.ratio_level {
            RatioLevel::Token => {
                let old_v = s.constant(Tensor::row(old));
                let diff = s.g.sub(theta, old_v)?;
                let rho = s.g.exp(diff)?;
                // min(rho*A, clip(rho)*A) is either rho*A or a constant.
                let mut coef = Vec::with_capacity(t);
                let mut offset = Vec::with_capacity(t);
                for &r in s.g.value(rho).data() {
                    let (c, k) = surrogate_split(r, a, eps);
                    coef.push(c);
                    offset.push(k);
                }
                let coef = s.constant(Tensor::row(&coef));
                let offset = s.constant(Tensor::row(&offset));
                let term = s.g.mul(rho, coef)?;
                let term = s.g.add(term, offset)?;
                s.g.mean(term)?
            }
            RatioLevel::Sequence => {
                let total = s.g.sum(theta)?;
                let old_total = s.constant(Tensor::scalar(old.iter().sum()));
                let diff = s.g.sub(total, old_total)?;
                let rho = s.g.exp(diff)?;
                let (c, k) = surrogate_split(s.g.scalar(rho), a, eps);
                let term = s.g.scale(rho, c)?;
                s.g.add_scalar(term, k)?
            }
        };
        let contribution = if cfg.kl_coefficient > 0.0 {
            let ref_v = s.constant(Tensor::row(reference));
            let d = s.g.sub(ref_v, theta)?;
            let e = s.g.exp(d)?;
            let k3 = s.g.sub(e, d)?;
            let k3 = s.g.add_scalar(k3, -1.0)?;
            let kl = s.g.mean(k3)?;
            let kl = s.g.scale(kl, cfg.kl_coefficient)?;
            s.g.sub(surrogate, kl)?
        } else {
            surrogate
        };
        contributions.push(contribution);
    }
    let all = s.g.concat(&contributions, 1)?;
    let objective = s.g.mean(all)?;
    Ok(s.g.scale(objective, -1.0)?)
}

/// `(c, k)` with `clipped_term(rho, a, eps) = c * rho + k` locally.
fn surrogate_split(rho: f64, a: f64, eps: f64) -> (f64, f64) {
    let clipped = rho.clamp(1.0 - eps, 1.0 + eps);
    if rho * a <= clipped * a {
        (a, 0.0)
    } else {
        (0.0, clipped * a)
    }
}

/// Current, behavior and reference parameters. The reference never changes
/// during training.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTriple {
    pub theta: ParamStore,
    pub old: ParamStore,
    pub reference: ParamStore,
}

impl PolicyTriple {
    /// `theta` and `old` start from `start`; `reference` is a frozen copy
    /// of `reference`.
    pub fn new(start: ParamStore, reference: ParamStore) -> Self {
        Self { old: start.clone(), theta: start, reference }
    }
}

/// A prompt set with a sampler, a scorer and a differentiable log-likelihood.
pub trait RlTask {
    fn num_prompts(&self) -> usize;
    fn adapters(&self) -> Option<&AdapterSpec>;
    fn trainable(&self) -> Trainable {
        Trainable::Adapters
    }
    fn sample(&self, params: &ParamStore, prompt: usize, n: usize, seed: u64) -> Result<Vec<Vec<usize>>>;
    fn log_probs(&self, params: &ParamStore, prompt: usize, tokens: &[usize]) -> Result<Vec<f64>>;
    fn log_probs_var(&self, s: &mut Scope, prompt: usize, tokens: &[usize]) -> Result<Var>;
    fn reward(&self, prompt: usize, tokens: &[usize]) -> Result<f64>;
}

/// Statistics of one optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub loss: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    pub kl: f64,
}

/// Samples a group per prompt from the behavior policy and scores it.
pub fn build_group<T: RlTask>(
    task: &T,
    triple: &PolicyTriple,
    prompt: usize,
    cfg: &GrpoConfig,
    seed: u64,
) -> Result<CandidateGroup> {
    let candidates = task.sample(&triple.old, prompt, cfg.group_size, seed)?;
    let rewards = candidates.iter().map(|c| task.reward(prompt, c)).collect::<Result<Vec<_>>>()?;
    let advantages = group_advantages(&rewards, cfg.eps_std)?;
    let logp_old = candidates.iter().map(|c| task.log_probs(&triple.old, prompt, c)).collect::<Result<_>>()?;
    let logp_ref =
        candidates.iter().map(|c| task.log_probs(&triple.reference, prompt, c)).collect::<Result<_>>()?;
    Ok(CandidateGroup { prompt, candidates, rewards, advantages, logp_old, logp_ref })
}

/// Runs `epochs` passes over the prompts, `prompts_per_step` groups per
/// optimizer step. `on_step` sees every step's statistics and the updated
/// policy; returning an error stops training.
pub fn rft_train<T: RlTask>(
    task: &T,
    triple: &mut PolicyTriple,
    cfg: &GrpoConfig,
    seed: u64,
    mut on_step: impl FnMut(&StepReport, &PolicyTriple) -> Result<()>,
) -> Result<RunLog> {
    cfg.validate()?;
    let p = task.num_prompts();
    if p == 0 {
        return Err(GrpoError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = AdamW::new(AdamWConfig::default());
    let mut log = RunLog::new();
    let trainable = task.trainable();
    let mut step = 0u64;
    let total = (cfg.epochs * p.div_ceil(cfg.prompts_per_step)) as f64;
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..p).collect();
        for i in (1..p).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        for chunk in order.chunks(cfg.prompts_per_step) {
            step += 1;
            let mut groups = Vec::with_capacity(chunk.len());
            for &prompt in chunk {
                groups.push(build_group(task, triple, prompt, cfg, rng.gen())?);
            }
            let dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let mut s = Scope::train(&triple.theta, trainable.clone(), task.adapters(), Some(dropout_rng));
            let mut losses = Vec::with_capacity(groups.len());
            let mut kl_sum = 0.0;
            let mut kl_count = 0usize;
            for g in &groups {
                let mut vars = Vec::with_capacity(g.candidates.len());
                for c in &g.candidates {
                    let v = task.log_probs_var(&mut s, g.prompt, c)?;
                    kl_sum += kl_estimate(s.g.value(v).data(), &g.logp_ref[vars.len()])?;
                    kl_count += 1;
                    vars.push(v);
                }
                losses.push(grpo_loss(&mut s, &vars, g, cfg)?);
            }
            let all = s.g.concat(&losses, 1)?;
            let loss = s.g.mean(all)?;
            let loss_value = s.g.scalar(loss);
            if !loss_value.is_finite() {
                return Err(GrpoError::NonFiniteLoss { step });
            }
            let grads = s.g.backward(loss).map_err(|_| GrpoError::NonFiniteLoss { step })?.params();
            drop(s);
            let lr = if cfg.cosine_decay {
                0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * (step - 1) as f64 / total).cos())
            } else {
                cfg.lr
            };
            opt.step(&mut triple.theta, &grads, |_| lr)?;
            if step % cfg.refresh_every as u64 == 0 {
                triple.old = triple.theta.clone();
            }
            let rewards: Vec<f64> = groups.iter().flat_map(|g| g.rewards.iter().copied()).collect();
            let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
            let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / rewards.len() as f64).sqrt();
            let report = StepReport { step, loss: loss_value, reward_mean: mean, reward_std: std, kl: kl_sum / kl_count as f64 };
            let mut rec = LogRecord::new("rft", step, Some(report.loss));
            rec.reward_mean = Some(report.reward_mean);
            rec.reward_std = Some(report.reward_std);
            rec.kl = Some(report.kl);
            log.push(rec).map_err(GrpoError::Config)?;
            on_step(&report, triple)?;
        }
    }
    Ok(log)
}

/// Single-step bandit: one prompt, a learnable logit vector, reward 100 for
/// the rewarded token and 0 otherwise.
pub struct BanditTask {
    pub arms: usize,
    pub rewarded: usize,
}

impl BanditTask {
    pub const LOGITS: &'static str = "bandit.logits";

    pub fn init(&self) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert(Self::LOGITS, Tensor::zeros(&[1, self.arms]));
        p
    }

    pub fn probabilities(&self, params: &ParamStore) -> Result<Vec<f64>> {
        let l = params.get(Self::LOGITS)?.data();
        let mx = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = l.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        Ok(e.into_iter().map(|v| v / z).collect())
    }
}

impl RlTask for BanditTask {
    fn num_prompts(&self) -> usize {
        1
    }

    fn adapters(&self) -> Option<&AdapterSpec> {
        None
    }

    fn trainable(&self) -> Trainable {
        Trainable::Prefixes(vec![Self::LOGITS.to_string()])
    }

    fn sample(&self, params: &ParamStore, _prompt: usize, n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
        let probs = self.probabilities(params)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n)
            .map(|_| {
                let u: f64 = rng.gen();
                let mut acc = 0.0;
                let arm = probs.iter().position(|p| {
                    acc += p;
                    u < acc
                });
                vec![arm.unwrap_or(self.arms - 1)]
            })
            .collect())
    }

    fn log_probs(&self, params: &ParamStore, _prompt: usize, tokens: &[usize]) -> Result<Vec<f64>> {
        let probs = self.probabilities(params)?;
        Ok(tokens.iter().map(|&t| probs[t].ln()).collect())
    }

    fn log_probs_var(&self, s: &mut Scope, _prompt: usize, tokens: &[usize]) -> Result<Var> {
        let l = s.p(Self::LOGITS)?;
        let lp = s.g.log_softmax_rows(l)?;
        Ok(s.g.gather(lp, tokens)?)
    }

    fn reward(&self, _prompt: usize, tokens: &[usize]) -> Result<f64> {
        Ok(if tokens.first() == Some(&self.rewarded) { 100.0 } else { 0.0 })
    }
}
