//! Stage orchestration: pre-training, supervised fine-tuning over fused
//! cues, reinforcement fine-tuning, and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState, Stage};
use super::config::{RunConfig, Schedule};
use super::corpus::{Corpus, Example};
use super::HarnessError;
use crate::alignment::{
    encode_skeleton, init_alignment, pretrain_objective, Channel, ContrastiveConfig, CueFeatureSequence,
    EncoderConfig, PretrainItem, LOG_TAU, LOG_TAU_RANGE,
};
use crate::fusion::{
    fused_features, init_cue_projections, init_prefix_projector, project_prefix_var, repair_missing_frames,
    FusionConfig, PREFIX,
};
use crate::grpo::{reward_tokens, rft_train, GrpoConfig, GrpoError, PolicyTriple, RewardConfig, RlTask};
use crate::metrics::{bleu, corpus_scores, rouge_l, tokenize, ScoreReport, Smoothing, TokenMode};
use crate::nn::{AdapterSpec, Scope, Trainable};
use crate::optim::{AdamW, AdamWConfig};
use crate::policy::{
    beam_decode, init_adapters, merge_adapters, sample_candidates, DecodeConfig, Policy, PolicyConfig,
    PolicyStepper, ProjectedPrefix, Vocabulary,
};
use crate::runlog::{LogRecord, RunLog};
use crate::tensor::{ParamStore, Tensor, Var};

/// Everything a checkpoint needs besides its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub config: RunConfig,
    pub vocab: Vec<String>,
    /// SFT adapters folded into the base weights.
    pub merged: bool,
    /// Live adapters stored alongside the base weights, if any.
    pub adapters: Option<AdapterSpec>,
    pub dev_bleu4: f64,
    /// Epoch (pretrain/sft) or optimizer step (rft) the parameters come from.
    pub step: u64,
}

impl Meta {
    pub fn of(ck: &Checkpoint) -> Result<Self, HarnessError> {
        serde_json::from_str(&ck.config).map_err(|e| HarnessError::Format(format!("checkpoint metadata: {e}")))
    }
}

/// One example with model-ready inputs.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub id: String,
    pub reference: String,
    pub skeleton: Tensor,
    pub face: CueFeatureSequence,
    pub hand: CueFeatureSequence,
    /// Word ids followed by `<eos>`.
    pub target: Vec<usize>,
}

impl Prepared {
    pub fn words(&self) -> &[usize] {
        &self.target[..self.target.len() - 1]
    }
}

fn channel(e: &Example, k: usize) -> Tensor {
    let c = &e.cues;
    Tensor::matrix(c.frames, c.dim, c.channels[k].iter().map(|&v| v as f64).collect())
}

pub fn prepare(examples: &[Example], vocab: &Vocabulary) -> Result<Vec<Prepared>, HarnessError> {
    examples
        .iter()
        .map(|e| {
            let target = vocab.encode(&e.reference).map_err(|m| HarnessError::Format(format!("{}: {m}", e.id)))?;
            let face = CueFeatureSequence::new(Channel::Face, channel(e, 1))?;
            let hand = CueFeatureSequence::new(Channel::Hand, channel(e, 2))?;
            Ok(Prepared {
                id: e.id.clone(),
                reference: e.reference.clone(),
                skeleton: channel(e, 0),
                face: repair_missing_frames(&face, &e.cues.detected[0])?,
                hand: repair_missing_frames(&hand, &e.cues.detected[1])?,
                target,
            })
        })
        .collect()
}

pub fn vocabulary(corpus: &Corpus) -> Vocabulary {
    Vocabulary::new(&corpus.grammar.words).expect("grammar words are distinct")
}

pub fn policy_for(cfg: &RunConfig, vocab_size: usize) -> Policy {
    Policy::new(PolicyConfig {
        vocab_size,
        d_model: cfg.model.d_model,
        layers: cfg.model.layers,
        ffn_hidden: cfg.model.ffn_hidden,
    })
}

fn contrastive(cfg: &RunConfig) -> ContrastiveConfig {
    let p = &cfg.pretrain;
    ContrastiveConfig {
        embed_dim: cfg.model.embed_dim,
        tau_init: p.tau_init,
        tau_prime: p.tau_prime,
        beta_dir: p.beta_dir,
        batch_size: p.batch_size,
    }
}

pub fn fusion_config(cfg: &RunConfig) -> FusionConfig {
    FusionConfig { alpha: cfg.sft.alpha, beta_hand: cfg.sft.beta_hand }
}

pub fn sft_adapters(cfg: &RunConfig) -> AdapterSpec {
    AdapterSpec { targets: vec!["q_proj".into(), "v_proj".into()], rank: cfg.sft.rank, scale: cfg.sft.scale, dropout: cfg.sft.dropout }
}

pub fn rft_adapters(cfg: &RunConfig) -> AdapterSpec {
    AdapterSpec { targets: vec!["q_proj".into(), "v_proj".into()], rank: cfg.rft.rank, scale: cfg.rft.scale, dropout: cfg.rft.dropout }
}

pub fn decode_config(cfg: &RunConfig) -> DecodeConfig {
    DecodeConfig { beam_width: cfg.decode.beam_width, max_len: cfg.decode.max_len, temperature: 1.0 }
}

/// Fresh parameters for every component.
pub fn init_params(cfg: &RunConfig, vocab: &Vocabulary, rng: &mut ChaCha8Rng) -> ParamStore {
    let mut store = ParamStore::new();
    let enc = EncoderConfig { feature_dim: cfg.corpus.feature_dim, skel_dim: cfg.model.skel_dim, vocab_size: vocab.len() };
    init_alignment(&mut store, rng, &enc, &contrastive(cfg));
    init_prefix_projector(&mut store, rng, cfg.model.skel_dim, cfg.model.d_model);
    policy_for(cfg, vocab.len()).init(&mut store, rng);
    init_cue_projections(&mut store, cfg.corpus.feature_dim, cfg.model.skel_dim);
    store
}

/// Learning-rate multiplier at `step` of `total`.
pub fn schedule(cfg: &RunConfig, step: usize, total: usize) -> f64 {
    match cfg.lr_schedule {
        Schedule::Constant => 1.0,
        Schedule::Cosine => {
            let warm = (cfg.warmup_frac * total as f64).round() as usize;
            if step < warm {
                return (step + 1) as f64 / warm as f64;
            }
            let span = (total - warm).max(1) as f64;
            0.5 * (1.0 + (std::f64::consts::PI * (step - warm) as f64 / span).cos())
        }
    }
}

/// Frozen skeleton encoding of one example.
fn skeleton_encoding(params: &ParamStore, ex: &Prepared) -> Result<Tensor, HarnessError> {
    let mut s = Scope::eval(params, None);
    let x = s.constant(ex.skeleton.clone());
    let z = encode_skeleton(&mut s, x, ex.skeleton.rows())?;
    Ok(s.g.value(z).clone())
}

/// Prefix node from a precomputed skeleton encoding plus fused cues.
fn prefix_var(s: &mut Scope, z_s: &Tensor, ex: &Prepared, fusion: &FusionConfig) -> Result<Var, HarnessError> {
    let z = s.constant(z_s.clone());
    let fused = fused_features(s, z, &ex.face, &ex.hand, fusion)?;
    Ok(project_prefix_var(s, fused, PREFIX)?)
}

pub fn prefixes(params: &ParamStore, data: &[Prepared], fusion: &FusionConfig) -> Result<Vec<ProjectedPrefix>, HarnessError> {
    data.iter()
        .map(|ex| {
            let z_s = skeleton_encoding(params, ex)?;
            let mut s = Scope::eval(params, None);
            let p = prefix_var(&mut s, &z_s, ex, fusion)?;
            Ok(ProjectedPrefix::new(s.g.value(p).clone())?)
        })
        .collect()
}

/// One output row of an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub bleu4: f64,
    pub rouge_l: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Evaluation {
    pub report: ScoreReport,
    pub rows: Vec<EvalRow>,
}

impl Evaluation {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("id\treference\thypothesis\tbleu4\trouge_l\n");
        for r in &self.rows {
            s.push_str(&format!("{}\t{}\t{}\t{:.2}\t{:.2}\n", r.id, r.reference, r.hypothesis, r.bleu4, r.rouge_l));
        }
        s
    }
}

/// Scores hypotheses against references at word level.
pub fn score_outputs(items: &[(String, String, String)]) -> Result<Evaluation, HarnessError> {
    let mut rows = Vec::with_capacity(items.len());
    let mut pairs = Vec::with_capacity(items.len());
    for (id, reference, hypothesis) in items {
        let r = tokenize(reference, TokenMode::LatinWord);
        let h = tokenize(hypothesis, TokenMode::LatinWord);
        rows.push(EvalRow {
            id: id.clone(),
            reference: reference.clone(),
            hypothesis: hypothesis.clone(),
            bleu4: bleu(&h, &r, 4, Smoothing::None)?,
            rouge_l: rouge_l(&h, &r, 1.0)?,
        });
        pairs.push((h, r));
    }
    Ok(Evaluation { report: corpus_scores(&pairs)?, rows })
}

/// Beam-decodes every prefix.
pub fn decode_all(
    policy: &Policy,
    params: &ParamStore,
    adapters: Option<&AdapterSpec>,
    prefixes: &[ProjectedPrefix],
    vocab: &Vocabulary,
    decode: &DecodeConfig,
) -> Result<Vec<Vec<usize>>, HarnessError> {
    prefixes
        .iter()
        .map(|prefix| {
            let stepper = PolicyStepper { policy, params, adapters, prefix, bos: vocab.bos(), eos: vocab.eos() };
            Ok(beam_decode(&stepper, decode)?)
        })
        .collect()
}

fn evaluate_prepared(
    policy: &Policy,
    params: &ParamStore,
    adapters: Option<&AdapterSpec>,
    prefixes: &[ProjectedPrefix],
    data: &[Prepared],
    vocab: &Vocabulary,
    decode: &DecodeConfig,
) -> Result<Evaluation, HarnessError> {
    let outs = decode_all(policy, params, adapters, prefixes, vocab, decode)?;
    let items: Vec<_> = data.iter().zip(outs).map(|(ex, o)| (ex.id.clone(), ex.reference.clone(), vocab.decode(&o))).collect();
    score_outputs(&items)
}

/// Beam-decodes a split with a trained checkpoint and scores it.
pub fn evaluate(ck: &Checkpoint, examples: &[Example]) -> Result<Evaluation, HarnessError> {
    if ck.stage == Stage::Pretrain {
        return Err(HarnessError::Stage("evaluation needs an sft or rft checkpoint".into()));
    }
    let meta = Meta::of(ck)?;
    let vocab = Vocabulary::new(&meta.vocab).map_err(HarnessError::Format)?;
    let data = prepare(examples, &vocab)?;
    let cfg = &meta.config;
    let policy = policy_for(cfg, vocab.len());
    let pre = prefixes(&ck.params, &data, &fusion_config(cfg))?;
    evaluate_prepared(&policy, &ck.params, meta.adapters.as_ref(), &pre, &data, &vocab, &decode_config(cfg))
}

/// Output of one stage: the retained (best dev BLEU-4) checkpoint and the log.
#[derive(Debug, Clone)]
pub struct StageOutput {
    pub checkpoint: Checkpoint,
    pub log: RunLog,
    pub dev_bleu4: f64,
}

struct Clock {
    start: Instant,
    on: bool,
}

impl Clock {
    fn new(on: bool) -> Self {
        Self { start: Instant::now(), on }
    }

    fn stamp(&self, rec: &mut LogRecord) {
        if self.on {
            rec.wall_ms = Some(self.start.elapsed().as_millis() as u64);
        }
    }
}

fn stage_rng(cfg: &RunConfig, stage: Stage) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stage as u64 + 1);
    rng
}

fn checkpoint(stage: Stage, params: ParamStore, meta: &Meta, rng: &ChaCha8Rng) -> Checkpoint {
    Checkpoint {
        stage,
        params,
        config: serde_json::to_string(meta).expect("meta serializes"),
        rng: RngState::capture(rng),
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn log_err(e: String) -> HarnessError {
    HarnessError::Stage(e)
}

/// Stage 1: contrastive alignment plus translation from the skeleton stream.
pub fn run_pretrain(cfg: &RunConfig, corpus: &Corpus) -> Result<StageOutput, HarnessError> {
    cfg.validate()?;
    let vocab = vocabulary(corpus);
    let train = prepare(&corpus.train, &vocab)?;
    let dev = prepare(&corpus.dev, &vocab)?;
    if train.len() < 2 {
        return Err(HarnessError::Stage("pre-training needs at least 2 training examples".into()));
    }
    let mut rng = stage_rng(cfg, Stage::Pretrain);
    let mut params = init_params(cfg, &vocab, &mut rng);
    let policy = policy_for(cfg, vocab.len());
    let ccfg = contrastive(cfg);
    let trainable = Trainable::Prefixes(vec!["skel.".into(), "align.".into(), "prefix.".into(), "policy.".into()]);
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.pretrain.weight_decay, ..AdamWConfig::default() });
    let epochs = cfg.scaled(cfg.pretrain.epochs);
    let bs = cfg.pretrain.batch_size.min(train.len());
    let per_epoch = train.len().div_ceil(bs);
    let total = epochs * per_epoch;
    let no_fusion = FusionConfig { alpha: 0.0, beta_hand: 0.0 };
    let decode = decode_config(cfg);
    let clock = Clock::new(cfg.log_wall_time);
    let mut log = RunLog::new();
    let mut best = (f64::NEG_INFINITY, params.clone(), 0u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::with_capacity(per_epoch);
        for chunk in order.chunks(bs) {
            let chunk: Vec<usize> = if chunk.len() < 2 { order[..2].to_vec() } else { chunk.to_vec() };
            let items: Vec<PretrainItem> =
                chunk.iter().map(|&i| PretrainItem { skeleton: &train[i].skeleton, target: &train[i].target }).collect();
            let mut s = Scope::train(&params, trainable.clone(), None, None);
            let loss = pretrain_objective(&mut s, &items, &policy, &ccfg, vocab.bos())?;
            let value = s.g.scalar(loss.total);
            if !value.is_finite() {
                return Err(HarnessError::NonFinite { stage: "pretrain", step: step as u64 + 1 });
            }
            let grads = s.g.backward(loss.total)?.params();
            drop(s);
            let lr = cfg.pretrain.lr * schedule(cfg, step, total);
            opt.step(&mut params, &grads, |_| lr)?;
            let lt = params.get_mut(LOG_TAU)?;
            lt.data_mut()[0] = lt.data()[0].clamp(LOG_TAU_RANGE.0, LOG_TAU_RANGE.1);
            losses.push(value);
            step += 1;
        }
        let pre = prefixes(&params, &dev, &no_fusion)?;
        let eval = evaluate_prepared(&policy, &params, None, &pre, &dev, &vocab, &decode)?;
        let mut rec = LogRecord::new("pretrain", epoch as u64, Some(mean(&losses)));
        rec.bleu4 = Some(eval.report.bleu_4);
        rec.rouge_l = Some(eval.report.rouge_l);
        clock.stamp(&mut rec);
        log.push(rec).map_err(log_err)?;
        if eval.report.bleu_4 > best.0 {
            best = (eval.report.bleu_4, params.clone(), epoch as u64);
        }
    }
    let meta = Meta {
        config: cfg.clone(),
        vocab: vocab.content_words().to_vec(),
        merged: false,
        adapters: None,
        dev_bleu4: best.0,
        step: best.2,
    };
    Ok(StageOutput { checkpoint: checkpoint(Stage::Pretrain, best.1, &meta, &rng), log, dev_bleu4: best.0 })
}

/// Loads a prerequisite checkpoint and checks its stage and vocabulary.
fn load_prior(init: &Checkpoint, want: Stage, corpus: &Corpus) -> Result<(Meta, Vocabulary), HarnessError> {
    if init.stage != want {
        return Err(HarnessError::Stage(format!("expected a {} checkpoint, got {}", want.name(), init.stage.name())));
    }
    let meta = Meta::of(init)?;
    if meta.vocab != corpus.grammar.words {
        return Err(HarnessError::Stage("checkpoint vocabulary does not match the corpus".into()));
    }
    let vocab = Vocabulary::new(&meta.vocab).map_err(HarnessError::Format)?;
    Ok((meta, vocab))
}

/// The caller's settings with the model shape taken from the checkpoint.
fn with_model(cfg: &RunConfig, meta: &Meta) -> RunConfig {
    let mut c = cfg.clone();
    c.model = meta.config.model.clone();
    c.corpus.feature_dim = meta.config.corpus.feature_dim;
    c
}

/// Stage 2: adapters on the translator plus the prefix projector and cue
/// projections, with the skeleton encoder frozen.
pub fn run_sft(cfg: &RunConfig, corpus: &Corpus, init: &Checkpoint) -> Result<StageOutput, HarnessError> {
    cfg.validate()?;
    let (prior, vocab) = load_prior(init, Stage::Pretrain, corpus)?;
    let cfg = &with_model(cfg, &prior);
    let train = prepare(&corpus.train, &vocab)?;
    let dev = prepare(&corpus.dev, &vocab)?;
    let mut rng = stage_rng(cfg, Stage::Sft);
    let spec = sft_adapters(cfg);
    let mut params = init.params.clone();
    params.extend_from(&init_adapters(&params, &spec, &mut rng)?);
    let policy = policy_for(cfg, vocab.len());
    let fusion = fusion_config(cfg);
    let trainable = Trainable::Union(vec![Trainable::Prefixes(vec!["prefix.".into(), "fusion.".into()]), Trainable::Adapters]);
    let z_train = train.iter().map(|ex| skeleton_encoding(&params, ex)).collect::<Result<Vec<_>, _>>()?;
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.sft.weight_decay, ..AdamWConfig::default() });
    let epochs = cfg.scaled(cfg.sft.epochs);
    let bs = cfg.sft.batch_size.min(train.len());
    let total = epochs * train.len().div_ceil(bs);
    let decode = decode_config(cfg);
    let clock = Clock::new(cfg.log_wall_time);
    let mut log = RunLog::new();
    let mut best = (f64::NEG_INFINITY, params.clone(), 0u64);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0usize;
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let mut losses = Vec::new();
        for chunk in order.chunks(bs) {
            let dropout = ChaCha8Rng::seed_from_u64(rng.gen());
            let mut s = Scope::train(&params, trainable.clone(), Some(&spec), Some(dropout));
            let mut batch: Vec<(Var, &[usize])> = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let p = prefix_var(&mut s, &z_train[i], &train[i], &fusion)?;
                batch.push((p, &train[i].target));
            }
            let loss = policy.sft_loss(&mut s, &batch, vocab.bos())?;
            let value = s.g.scalar(loss);
            if !value.is_finite() {
                return Err(HarnessError::NonFinite { stage: "sft", step: step as u64 + 1 });
            }
            let grads = s.g.backward(loss)?.params();
            drop(s);
            let m = schedule(cfg, step, total);
            let (lr, plr) = (cfg.sft.lr * m, cfg.sft.projector_lr * m);
            opt.step(&mut params, &grads, |n| if crate::nn::is_adapter_weight(n) { lr } else { plr })?;
            losses.push(value);
            step += 1;
        }
        let pre = prefixes(&params, &dev, &fusion)?;
        let eval = evaluate_prepared(&policy, &params, Some(&spec), &pre, &dev, &vocab, &decode)?;
        let mut rec = LogRecord::new("sft", epoch as u64, Some(mean(&losses)));
        rec.bleu4 = Some(eval.report.bleu_4);
        rec.rouge_l = Some(eval.report.rouge_l);
        clock.stamp(&mut rec);
        log.push(rec).map_err(log_err)?;
        if eval.report.bleu_4 > best.0 {
            best = (eval.report.bleu_4, params.clone(), epoch as u64);
        }
    }
    let (params, adapters) = if cfg.sft.merge { (merge_adapters(&best.1, &spec)?, None) } else { (best.1, Some(spec)) };
    let meta = Meta {
        config: cfg.clone(),
        vocab: prior.vocab,
        merged: cfg.sft.merge,
        adapters,
        dev_bleu4: best.0,
        step: best.2,
    };
    Ok(StageOutput { checkpoint: checkpoint(Stage::Sft, params, &meta, &rng), log, dev_bleu4: best.0 })
}

/// Translation as a GRPO task: prompts are fixed prefixes, candidates are
/// sampled token sequences, rewards compare content words with the reference.
#[derive(Clone)]
pub struct TranslationTask<'a> {
    pub policy: &'a Policy,
    pub prefixes: &'a [ProjectedPrefix],
    pub targets: Vec<Vec<usize>>,
    pub adapters: &'a AdapterSpec,
    pub reward: RewardConfig,
    pub sampling: DecodeConfig,
    pub bos: usize,
    pub eos: usize,
}

impl TranslationTask<'_> {
    fn words<'b>(&self, tokens: &'b [usize]) -> Vec<usize> {
        tokens.iter().copied().take_while(|&t| t != self.eos).filter(|&t| t < self.bos).collect()
    }
}

impl RlTask for TranslationTask<'_> {
    fn num_prompts(&self) -> usize {
        self.prefixes.len()
    }

    fn adapters(&self) -> Option<&AdapterSpec> {
        Some(self.adapters)
    }

    fn sample(&self, params: &ParamStore, prompt: usize, n: usize, seed: u64) -> Result<Vec<Vec<usize>>, GrpoError> {
        let stepper = PolicyStepper {
            policy: self.policy,
            params,
            adapters: Some(self.adapters),
            prefix: &self.prefixes[prompt],
            bos: self.bos,
            eos: self.eos,
        };
        Ok(sample_candidates(&stepper, n, &self.sampling, seed)?)
    }

    fn log_probs(&self, params: &ParamStore, prompt: usize, tokens: &[usize]) -> Result<Vec<f64>, GrpoError> {
        Ok(self.policy.sequence_log_prob(params, Some(self.adapters), &self.prefixes[prompt], tokens, self.bos)?.1)
    }

    fn log_probs_var(&self, s: &mut Scope, prompt: usize, tokens: &[usize]) -> Result<Var, GrpoError> {
        let p = s.constant(self.prefixes[prompt].z.clone());
        Ok(self.policy.token_log_probs(s, p, tokens, self.bos)?)
    }

    fn reward(&self, prompt: usize, tokens: &[usize]) -> Result<f64, GrpoError> {
        reward_tokens(&self.words(tokens), &self.targets[prompt], &self.reward)
    }
}

pub fn reward_config(cfg: &RunConfig) -> RewardConfig {
    RewardConfig { lambda: cfg.rft.lambda, smoothing: cfg.rft.smoothing, pad_short_targets: cfg.rft.pad_short_targets }
}

pub fn grpo_config(cfg: &RunConfig) -> GrpoConfig {
    let r = &cfg.rft;
    GrpoConfig {
        group_size: r.group_size,
        epsilon_clip: r.epsilon_clip,
        kl_coefficient: r.kl_coefficient,
        eps_std: r.eps_std,
        lr: r.lr,
        epochs: cfg.scaled(r.epochs),
        refresh_every: r.refresh_every,
        prompts_per_step: r.batch_size,
        ratio_level: r.ratio_level,
        cosine_decay: cfg.lr_schedule == Schedule::Cosine,
    }
}

/// Mean reward of `n` sampled candidates per prompt. Seeds depend only on
/// `seed` and the prompt index, so successive policies are compared on the
/// same random draws.
pub fn probe_reward(task: &TranslationTask, params: &ParamStore, n: usize, seed: u64) -> Result<f64, HarnessError> {
    let mut total = 0.0;
    for p in 0..task.num_prompts() {
        for c in task.sample(params, p, n, seed ^ (p as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))? {
            total += task.reward(p, &c)?;
        }
    }
    Ok(total / (task.num_prompts() * n).max(1) as f64)
}

/// Stage name of the periodic evaluation records: dev BLEU-4 and ROUGE-L of
/// beam outputs, and the probe reward on a fixed slice of training prompts.
pub const RFT_EVAL: &str = "rft-eval";

/// Training prompts scored at every evaluation to trace the reward.
pub const PROBE_PROMPTS: usize = 128;

pub fn step_checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("rft-step-{step:06}.rvck"))
}

/// Stage 3: fresh adapters over the merged SFT model, trained with GRPO
/// against the frozen SFT model as reference. Step checkpoints go to
/// `step_dir` when `rft.checkpoint_every > 0`.
pub fn run_rft(cfg: &RunConfig, corpus: &Corpus, init: &Checkpoint, step_dir: Option<&Path>) -> Result<StageOutput, HarnessError> {
    cfg.validate()?;
    let (prior, vocab) = load_prior(init, Stage::Sft, corpus)?;
    if !prior.merged || prior.adapters.is_some() {
        return Err(HarnessError::Stage("rft requires an sft checkpoint with merged adapters".into()));
    }
    let cfg = &with_model(cfg, &prior);
    let train = prepare(&corpus.train, &vocab)?;
    let dev = prepare(&corpus.dev, &vocab)?;
    if train.is_empty() {
        return Err(HarnessError::Stage("empty training split".into()));
    }
    let mut rng = stage_rng(cfg, Stage::Rft);
    let spec = rft_adapters(cfg);
    let base = init.params.clone();
    let mut start = base.clone();
    start.extend_from(&init_adapters(&base, &spec, &mut rng)?);
    let policy = policy_for(cfg, vocab.len());
    // the prefix path is frozen during this stage
    let fusion = FusionConfig { alpha: prior.config.sft.alpha, beta_hand: prior.config.sft.beta_hand };
    let train_prefixes = prefixes(&base, &train, &fusion)?;
    let dev_prefixes = prefixes(&base, &dev, &fusion)?;
    let task = TranslationTask {
        policy: &policy,
        prefixes: &train_prefixes,
        targets: train.iter().map(|e| e.words().to_vec()).collect(),
        adapters: &spec,
        reward: reward_config(cfg),
        sampling: DecodeConfig { beam_width: 1, max_len: cfg.decode.max_len, temperature: cfg.rft.temperature },
        bos: vocab.bos(),
        eos: vocab.eos(),
    };
    let probe_n = train.len().min(PROBE_PROMPTS);
    let probe = TranslationTask {
        prefixes: &train_prefixes[..probe_n],
        targets: task.targets[..probe_n].to_vec(),
        ..task.clone()
    };
    let gcfg = grpo_config(cfg);
    let decode = decode_config(cfg);
    let steps_per_epoch = train.len().div_ceil(gcfg.prompts_per_step) as u64;
    let eval_every = if cfg.rft.eval_every == 0 { steps_per_epoch } else { cfg.rft.eval_every as u64 };
    let total_steps = steps_per_epoch * gcfg.epochs as u64;
    let clock = Clock::new(cfg.log_wall_time);

    let mut meta = Meta {
        config: cfg.clone(),
        vocab: prior.vocab.clone(),
        merged: false,
        adapters: Some(spec.clone()),
        dev_bleu4: prior.dev_bleu4,
        step: 0,
    };
    let mut evals: Vec<LogRecord> = Vec::new();
    let initial = evaluate_prepared(&policy, &start, Some(&spec), &dev_prefixes, &dev, &vocab, &decode)?;
    let mut rec = LogRecord::new(RFT_EVAL, 0, None);
    rec.bleu4 = Some(initial.report.bleu_4);
    rec.rouge_l = Some(initial.report.rouge_l);
    let probe_seed: u64 = rng.gen();
    rec.reward_mean = Some(probe_reward(&probe, &start, gcfg.group_size, probe_seed)?);
    evals.push(rec);
    let mut best = (initial.report.bleu_4, start.clone(), 0u64);
    let mut triple = PolicyTriple::new(start, base);
    let seed: u64 = rng.gen();
    let mut step_ms = Vec::new();
    let log = rft_train(&task, &mut triple, &gcfg, seed, |report, triple| {
        step_ms.push(clock.start.elapsed().as_millis() as u64);
        let fail = |e: HarnessError| GrpoError::Config(e.to_string());
        if report.step % eval_every == 0 || report.step == total_steps {
            let eval = evaluate_prepared(&policy, &triple.theta, Some(&spec), &dev_prefixes, &dev, &vocab, &decode)
                .map_err(fail)?;
            let mut rec = LogRecord::new(RFT_EVAL, report.step, None);
            rec.bleu4 = Some(eval.report.bleu_4);
            rec.rouge_l = Some(eval.report.rouge_l);
            rec.reward_mean = Some(probe_reward(&probe, &triple.theta, gcfg.group_size, probe_seed).map_err(fail)?);
            clock.stamp(&mut rec);
            evals.push(rec);
            if eval.report.bleu_4 > best.0 {
                best = (eval.report.bleu_4, triple.theta.clone(), report.step);
            }
        }
        if let Some(dir) = step_dir.filter(|_| cfg.rft.checkpoint_every > 0) {
            if report.step % cfg.rft.checkpoint_every as u64 == 0 {
                let m = Meta { step: report.step, ..meta.clone() };
                checkpoint(Stage::Rft, triple.theta.clone(), &m, &rng)
                    .save(&step_checkpoint_path(dir, report.step))
                    .map_err(fail)?;
            }
        }
        Ok(())
    })
    .map_err(|e| match e {
        GrpoError::NonFiniteLoss { step } => HarnessError::NonFinite { stage: "rft", step },
        other => HarnessError::Stage(other.to_string()),
    })?;
    let mut full = RunLog::new();
    for (mut r, ms) in log.records.into_iter().zip(step_ms) {
        r.wall_ms = clock.on.then_some(ms);
        full.push(r).map_err(log_err)?;
    }
    for r in evals {
        full.push(r).map_err(log_err)?;
    }
    meta.dev_bleu4 = best.0;
    meta.step = best.2;
    Ok(StageOutput { checkpoint: checkpoint(Stage::Rft, best.1, &meta, &rng), log: full, dev_bleu4: best.0 })
}

/// `(step, bleu4)` for every step checkpoint in `dir` whose step is a
/// multiple of `every`, in step order.
pub fn learning_curve(dir: &Path, examples: &[Example], every: u64) -> Result<Vec<(u64, f64)>, HarnessError> {
    if every == 0 {
        return Err(HarnessError::Config("--every must be >= 1".into()));
    }
    let mut found = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().to_string();
        let step = name.strip_prefix("rft-step-").and_then(|s| s.strip_suffix(".rvck")).and_then(|s| s.parse::<u64>().ok());
        if let Some(step) = step.filter(|s| s % every == 0) {
            found.insert(step, dir.join(name));
        }
    }
    if found.is_empty() {
        return Err(HarnessError::Missing(format!("step checkpoints in {}", dir.display())));
    }
    found
        .into_iter()
        .map(|(step, path)| Ok((step, evaluate(&Checkpoint::load(&path)?, examples)?.report.bleu_4)))
        .collect()
}
