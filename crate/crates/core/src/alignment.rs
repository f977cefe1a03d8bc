//! Contrastive sign/text alignment: segment-token similarity with a trainable
//! temperature, global bidirectional similarities, batch InfoNCE, and the
//! combined pre-training objective.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fusion::{project_prefix_var, PREFIX};
use crate::nn::{init_mlp2, normal_matrix, Activation, Scope};
use crate::policy::Policy;
use crate::tensor::{ParamStore, Result, Tensor, TensorError, Var};

pub const LOG_TAU: &str = "align.log_tau";
const SKEL_PROJ: &str = "align.skel_proj";
const TEXT_PROJ: &str = "align.text_proj";
const TEXT_EMB: &str = "align.text_emb";

/// Bounds applied to `log τ` after each optimizer step.
pub const LOG_TAU_RANGE: (f64, f64) = (-4.605_170_185_988_091, 2.302_585_092_994_046); // ln 0.01, ln 10

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    Skeleton,
    Face,
    Hand,
}

/// Per-frame features of one cue channel, padded to `frames.rows()`; rows at
/// or beyond `valid` are masked.
#[derive(Debug, Clone, PartialEq)]
pub struct CueFeatureSequence {
    pub channel: Channel,
    pub frames: Tensor,
    pub valid: usize,
}

impl CueFeatureSequence {
    pub fn new(channel: Channel, frames: Tensor) -> Result<Self> {
        let valid = frames.rows();
        Self::padded(channel, frames, valid)
    }

    pub fn padded(channel: Channel, frames: Tensor, valid: usize) -> Result<Self> {
        if valid == 0 || valid > frames.rows() || frames.shape().len() != 2 {
            return Err(TensorError::Invalid(format!(
                "cue sequence needs 1 <= valid ({valid}) <= rows ({})",
                frames.rows()
            )));
        }
        Ok(Self { channel, frames, valid })
    }

    pub fn row_mask(&self) -> Vec<bool> {
        (0..self.frames.rows()).map(|i| i < self.valid).collect()
    }
}

/// Token features of one sentence, padded like [`CueFeatureSequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatureSequence {
    pub tokens: Tensor,
    pub valid: usize,
}

impl TextFeatureSequence {
    pub fn new(tokens: Tensor, valid: usize) -> Result<Self> {
        if valid == 0 || valid > tokens.rows() {
            return Err(TensorError::Invalid(format!("text sequence needs 1 <= valid ({valid}) <= rows")));
        }
        Ok(Self { tokens, valid })
    }

    pub fn row_mask(&self) -> Vec<bool> {
        (0..self.tokens.rows()).map(|i| i < self.valid).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub embed_dim: usize,
    pub tau_init: f64,
    pub tau_prime: f64,
    pub beta_dir: f64,
    pub batch_size: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        Self { embed_dim: 32, tau_init: 0.1, tau_prime: 0.07, beta_dir: 0.5, batch_size: 16 }
    }
}

/// Values of one sign/text similarity computation.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityBundle {
    /// Segment-token cosine similarities, `(M, L)`.
    pub e: Tensor,
    /// Masked row-softmax of `e / τ`, `(M, L)`.
    pub p: Tensor,
    pub z_st: f64,
    pub z_ts: f64,
    pub row_mask: Vec<bool>,
    pub col_mask: Vec<bool>,
}

/// Sizes of the toy encoders.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub skel_dim: usize,
    pub vocab_size: usize,
}

/// Adds the skeleton encoder, text embedding, projectors and `log τ`.
pub fn init_alignment(store: &mut ParamStore, rng: &mut ChaCha8Rng, enc: &EncoderConfig, cfg: &ContrastiveConfig) {
    let (f, d, e) = (enc.feature_dim, enc.skel_dim, cfg.embed_dim);
    store.insert("skel.frame.w", normal_matrix(rng, f, d, (1.0 / f as f64).sqrt()));
    store.insert("skel.frame.b", Tensor::zeros(&[1, d]));
    for m in ["q", "k", "v", "o"] {
        store.insert(format!("skel.mix.{m}"), normal_matrix(rng, d, d, (1.0 / d as f64).sqrt()));
    }
    store.insert(TEXT_EMB, normal_matrix(rng, enc.vocab_size, d, 1.0));
    init_mlp2(store, rng, SKEL_PROJ, d, 2 * e, e);
    init_mlp2(store, rng, TEXT_PROJ, d, 2 * e, e);
    store.insert(LOG_TAU, Tensor::scalar(cfg.tau_init.ln()));
}

/// Toy skeleton encoder: per-frame feed-forward map followed by one masked
/// self-attention mixing layer with a residual connection. `(m, f) -> (m, d)`.
pub fn encode_skeleton(s: &mut Scope, frames: Var, valid: usize) -> Result<Var> {
    let h = s.linear(frames, "skel.frame.w", false)?;
    let b = s.p("skel.frame.b")?;
    let h = s.g.add(h, b)?;
    let h = s.g.tanh(h)?;
    let m = s.g.value(h).rows();
    let d = s.g.value(h).cols();
    let q = s.linear(h, "skel.mix.q", false)?;
    let k = s.linear(h, "skel.mix.k", false)?;
    let v = s.linear(h, "skel.mix.v", false)?;
    let scores = s.g.matmul_t(q, k, false, true)?;
    let mask: Vec<bool> = (0..m * m).map(|i| i % m < valid).collect();
    let att = s.g.softmax_rows(scores, (d as f64).sqrt(), Some(&mask))?;
    let mixed = s.g.matmul(att, v)?;
    let o = s.linear(mixed, "skel.mix.o", false)?;
    s.g.add(h, o)
}

/// Token-embedding lookup standing in for a text encoder.
pub fn embed_text(s: &mut Scope, tokens: &[usize]) -> Result<Var> {
    let emb = s.p(TEXT_EMB)?;
    s.g.gather_rows(emb, tokens)
}

fn mask_column(rows: &[bool]) -> Tensor {
    Tensor::matrix(rows.len(), 1, rows.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect())
}

/// Projects both streams into the shared space and unit-normalizes every
/// unmasked row; masked rows come out exactly zero.
pub fn embed_streams(
    s: &mut Scope,
    skeleton: Var,
    skel_mask: &[bool],
    text: Var,
    text_mask: &[bool],
) -> Result<(Var, Var)> {
    let fs = project_normalize(s, skeleton, skel_mask, SKEL_PROJ)?;
    let ft = project_normalize(s, text, text_mask, TEXT_PROJ)?;
    Ok((fs, ft))
}

fn project_normalize(s: &mut Scope, x: Var, mask: &[bool], prefix: &str) -> Result<Var> {
    if s.g.value(x).rows() != mask.len() {
        return Err(TensorError::Invalid("row mask length".into()));
    }
    let h = s.mlp2(x, prefix, Activation::Tanh)?;
    let n = s.g.l2_normalize_rows(h, 0.0)?;
    if mask.iter().all(|&k| k) {
        return Ok(n);
    }
    let m = s.constant(mask_column(mask));
    s.g.mul(n, m)
}

fn valid_rows(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
}

/// One direction: masked row-softmax of `a·bᵀ / τ`, re-weighted similarity per
/// row, averaged over unmasked rows. Returns `(z, E, P)`.
fn directed_similarity(
    s: &mut Scope,
    a: Var,
    b: Var,
    log_tau: Var,
    a_mask: &[bool],
    b_mask: &[bool],
) -> Result<(Var, Var, Var)> {
    let rows = valid_rows(a_mask);
    if rows.is_empty() {
        return Err(TensorError::Invalid("all rows masked".into()));
    }
    let e = s.g.matmul_t(a, b, false, true)?;
    let neg = s.g.scale(log_tau, -1.0)?;
    let inv_tau = s.g.exp(neg)?;
    let scaled = s.g.mul(e, inv_tau)?;
    let n_cols = b_mask.len();
    let mask: Vec<bool> = (0..a_mask.len() * n_cols).map(|i| b_mask[i % n_cols]).collect();
    let p = s.g.softmax_rows(scaled, 1.0, Some(&mask))?;
    let pe = s.g.mul(p, e)?;
    let per_row = s.g.sum_axis(pe, 1)?;
    let kept = s.g.gather_rows(per_row, &rows)?;
    let z = s.g.mean(kept)?;
    Ok((z, e, p))
}

/// Graph form of the global similarities `(z_st, z_ts)` for one pair.
pub fn global_similarity_var(
    s: &mut Scope,
    fs: Var,
    ft: Var,
    log_tau: Var,
    skel_mask: &[bool],
    text_mask: &[bool],
) -> Result<(Var, Var)> {
    let (z_st, _, _) = directed_similarity(s, fs, ft, log_tau, skel_mask, text_mask)?;
    let (z_ts, _, _) = directed_similarity(s, ft, fs, log_tau, text_mask, skel_mask)?;
    Ok((z_st, z_ts))
}

/// Value form of the global similarity for one pair of embedded streams.
pub fn global_similarity(
    fs: &Tensor,
    ft: &Tensor,
    tau: f64,
    skel_mask: &[bool],
    text_mask: &[bool],
) -> Result<SimilarityBundle> {
    if !(tau > 0.0) {
        return Err(TensorError::Invalid("temperature must be > 0".into()));
    }
    let empty = ParamStore::new();
    let mut s = Scope::eval(&empty, None);
    let (a, b) = (s.constant(fs.clone()), s.constant(ft.clone()));
    let lt = s.constant(Tensor::scalar(tau.ln()));
    let (z_st, e, p) = directed_similarity(&mut s, a, b, lt, skel_mask, text_mask)?;
    let (z_ts, _, _) = directed_similarity(&mut s, b, a, lt, text_mask, skel_mask)?;
    Ok(SimilarityBundle {
        e: s.g.value(e).clone(),
        p: s.g.value(p).clone(),
        z_st: s.g.scalar(z_st),
        z_ts: s.g.scalar(z_ts),
        row_mask: skel_mask.to_vec(),
        col_mask: text_mask.to_vec(),
    })
}

/// Indicator `(total, B)` with `1/scale_b` where row belongs to block `b`.
fn block_indicator(lens: &[usize], mean: bool) -> Tensor {
    let total: usize = lens.iter().sum();
    let b = lens.len();
    let mut data = vec![0.0; total * b];
    let mut row = 0;
    for (k, &len) in lens.iter().enumerate() {
        for _ in 0..len {
            data[row * b + k] = if mean { 1.0 / len as f64 } else { 1.0 };
            row += 1;
        }
    }
    Tensor::matrix(total, b, data)
}

/// `Z[b, b']` = similarity of stream `b` of `a` to stream `b'` of `b`, for
/// all pairs at once. Inputs hold only unmasked, unit-norm rows.
fn batch_direction(s: &mut Scope, a_all: Var, a_lens: &[usize], b_all: Var, b_lens: &[usize], log_tau: Var) -> Result<Var> {
    let e = s.g.matmul_t(a_all, b_all, false, true)?;
    // entries are cosines <= 1, so shifting by 1 keeps every exponent <= 0
    let shifted = s.g.add_scalar(e, -1.0)?;
    let neg = s.g.scale(log_tau, -1.0)?;
    let inv_tau = s.g.exp(neg)?;
    let scaled = s.g.mul(shifted, inv_tau)?;
    let w = s.g.exp(scaled)?;
    let ind = s.constant(block_indicator(b_lens, false));
    let den = s.g.matmul(w, ind)?;
    let we = s.g.mul(w, e)?;
    let num = s.g.matmul(we, ind)?;
    let per_row = s.g.div_pos(num, den)?;
    let avg = s.constant(block_indicator(a_lens, true));
    s.g.matmul_t(avg, per_row, true, false)
}

/// Batch similarity matrices `(Z_S2T, Z_T2S)` from per-example embedded
/// streams (unmasked rows only).
pub fn batch_similarity_matrices(
    s: &mut Scope,
    skel: &[Var],
    text: &[Var],
    log_tau: Var,
) -> Result<(Var, Var)> {
    if skel.len() != text.len() || skel.is_empty() {
        return Err(TensorError::Invalid("batch needs equal, non-zero numbers of streams".into()));
    }
    let d = s.g.value(skel[0]).cols();
    for &v in skel.iter().chain(text) {
        if s.g.value(v).cols() != d {
            return Err(TensorError::ShapeMismatch {
                op: "batch_similarity",
                node: v.index(),
                lhs: vec![d],
                rhs: vec![s.g.value(v).cols()],
            });
        }
    }
    let s_lens: Vec<usize> = skel.iter().map(|&v| s.g.value(v).rows()).collect();
    let t_lens: Vec<usize> = text.iter().map(|&v| s.g.value(v).rows()).collect();
    let s_all = s.g.concat(skel, 0)?;
    let t_all = s.g.concat(text, 0)?;
    let z_s2t = batch_direction(s, s_all, &s_lens, t_all, &t_lens, log_tau)?;
    let z_t2s = batch_direction(s, t_all, &t_lens, s_all, &s_lens, log_tau)?;
    Ok((z_s2t, z_t2s))
}

/// Mean over `b` of `-log softmax(Z[b, :] / τ')[b]`.
fn directional_infonce(s: &mut Scope, z: Var, tau_prime: f64) -> Result<Var> {
    let b = s.g.value(z).rows();
    if s.g.value(z).cols() != b {
        return Err(TensorError::ShapeMismatch {
            op: "infonce",
            node: z.index(),
            lhs: s.g.shape(z).to_vec(),
            rhs: vec![b, b],
        });
    }
    let scaled = s.g.scale(z, 1.0 / tau_prime)?;
    let lsm = s.g.log_softmax_rows(scaled)?;
    let diag: Vec<usize> = (0..b).map(|i| i * b + i).collect();
    let d = s.g.gather(lsm, &diag)?;
    let m = s.g.mean(d)?;
    s.g.scale(m, -1.0)
}

/// `β·L_S2T + (1-β)·L_T2S`.
pub fn infonce_loss(s: &mut Scope, z_s2t: Var, z_t2s: Var, tau_prime: f64, beta_dir: f64) -> Result<Var> {
    if !(tau_prime > 0.0) {
        return Err(TensorError::Invalid("tau' must be > 0".into()));
    }
    let l1 = directional_infonce(s, z_s2t, tau_prime)?;
    let l2 = directional_infonce(s, z_t2s, tau_prime)?;
    let a = s.g.scale(l1, beta_dir)?;
    let b = s.g.scale(l2, 1.0 - beta_dir)?;
    s.g.add(a, b)
}

/// Value form of [`infonce_loss`].
pub fn infonce_value(z_s2t: &Tensor, z_t2s: &Tensor, tau_prime: f64, beta_dir: f64) -> Result<f64> {
    let empty = ParamStore::new();
    let mut s = Scope::eval(&empty, None);
    let a = s.constant(z_s2t.clone());
    let b = s.constant(z_t2s.clone());
    let l = infonce_loss(&mut s, a, b, tau_prime, beta_dir)?;
    Ok(s.g.scalar(l))
}

/// One pre-training example: skeleton frames and reference token ids
/// (content words, then `<eos>`).
#[derive(Debug, Clone)]
pub struct PretrainItem<'a> {
    pub skeleton: &'a Tensor,
    pub target: &'a [usize],
}

/// Graph pieces of the pre-training loss, for logging.
pub struct PretrainLoss {
    pub total: Var,
    pub contrastive: Var,
    pub translation: Var,
}

/// `L_pt = L_con + L_slt` over one batch. The decoder reads the skeleton
/// encoding through the prefix projector.
pub fn pretrain_objective(
    s: &mut Scope,
    batch: &[PretrainItem],
    policy: &Policy,
    cfg: &ContrastiveConfig,
    bos: usize,
) -> Result<PretrainLoss> {
    let mut fs = Vec::with_capacity(batch.len());
    let mut ft = Vec::with_capacity(batch.len());
    let mut dec = Vec::with_capacity(batch.len());
    for item in batch {
        let m = item.skeleton.rows();
        let frames = s.constant(item.skeleton.clone());
        let zs = encode_skeleton(s, frames, m)?;
        let words = &item.target[..item.target.len().saturating_sub(1)];
        if words.is_empty() {
            return Err(TensorError::Invalid("empty reference".into()));
        }
        let zt = embed_text(s, words)?;
        let (a, b) = embed_streams(s, zs, &vec![true; m], zt, &vec![true; words.len()])?;
        fs.push(a);
        ft.push(b);
        let prefix = project_prefix_var(s, zs, PREFIX)?;
        dec.push(prefix);
    }
    let log_tau = s.p(LOG_TAU)?;
    let (z1, z2) = batch_similarity_matrices(s, &fs, &ft, log_tau)?;
    let con = infonce_loss(s, z1, z2, cfg.tau_prime, cfg.beta_dir)?;
    let pairs: Vec<(Var, &[usize])> = dec.iter().zip(batch).map(|(&p, it)| (p, it.target)).collect();
    let slt = policy.sft_loss(s, &pairs, bos)?;
    let total = s.g.add(con, slt)?;
    Ok(PretrainLoss { total, contrastive: con, translation: slt })
}

/// Embeds a batch in evaluation mode and returns `Z_S2T` as a plain tensor.
pub fn batch_similarity_values(params: &ParamStore, batch: &[PretrainItem]) -> Result<Tensor> {
    let mut s = Scope::eval(params, None);
    let mut fs = Vec::new();
    let mut ft = Vec::new();
    for item in batch {
        let m = item.skeleton.rows();
        let frames = s.constant(item.skeleton.clone());
        let zs = encode_skeleton(&mut s, frames, m)?;
        let words = &item.target[..item.target.len().saturating_sub(1)];
        let zt = embed_text(&mut s, words)?;
        let (a, b) = embed_streams(&mut s, zs, &vec![true; m], zt, &vec![true; words.len()])?;
        fs.push(a);
        ft.push(b);
    }
    let lt = s.p(LOG_TAU)?;
    let (z, _) = batch_similarity_matrices(&mut s, &fs, &ft, lt)?;
    Ok(s.g.value(z).clone())
}

/// Fraction of rows whose largest entry sits on the diagonal (ties count as misses).
pub fn top1_diagonal_accuracy(z: &Tensor) -> f64 {
    let b = z.rows();
    let hits = (0..b)
        .filter(|&i| {
            let row = z.row_slice(i);
            row.iter().enumerate().all(|(j, &v)| j == i || v < row[i])
        })
        .count();
    hits as f64 / b as f64
}
