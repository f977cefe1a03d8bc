//! Additive fusion of skeleton, face and hand cues and the prefix projector
//! that maps fused frames into the translator's embedding space.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::CueFeatureSequence;
use crate::nn::{init_mlp2, Activation, Scope};
use crate::policy::ProjectedPrefix;
use crate::tensor::{ParamStore, Result, Tensor, TensorError, Var};

/// Parameter prefix of the prefix projector.
pub const PREFIX: &str = "prefix";
pub const FACE_PROJ: &str = "fusion.face_proj";
pub const HAND_PROJ: &str = "fusion.hand_proj";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub alpha: f64,
    pub beta_hand: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { alpha: 1.0, beta_hand: 1.0 }
    }
}

/// `z_s + alpha * z_face + beta_hand * z_hand`.
pub fn fuse_cues(z_s: &Tensor, z_face: &Tensor, z_hand: &Tensor, cfg: &FusionConfig) -> Result<Tensor> {
    let empty = ParamStore::new();
    let mut s = Scope::eval(&empty, None);
    let a = s.constant(z_s.clone());
    let b = s.constant(z_face.clone());
    let c = s.constant(z_hand.clone());
    let out = fuse_vars(&mut s, a, b, c, cfg)?;
    Ok(s.g.value(out).clone())
}

/// Graph form of [`fuse_cues`]. Terms with a zero coefficient are skipped so
/// the skeleton-only case is bit-identical to not fusing at all.
pub fn fuse_vars(s: &mut Scope, z_s: Var, z_face: Var, z_hand: Var, cfg: &FusionConfig) -> Result<Var> {
    for v in [z_face, z_hand] {
        if s.g.shape(v) != s.g.shape(z_s) {
            return Err(TensorError::ShapeMismatch {
                op: "fuse_cues",
                node: v.index(),
                lhs: s.g.shape(z_s).to_vec(),
                rhs: s.g.shape(v).to_vec(),
            });
        }
    }
    let mut out = z_s;
    for (v, c) in [(z_face, cfg.alpha), (z_hand, cfg.beta_hand)] {
        if c != 0.0 {
            let t = s.g.scale(v, c)?;
            out = s.g.add(out, t)?;
        }
    }
    Ok(out)
}

/// Adds the prefix projector (`input -> 4*d_model -> d_model`).
pub fn init_prefix_projector(store: &mut ParamStore, rng: &mut ChaCha8Rng, input: usize, d_model: usize) {
    init_mlp2(store, rng, PREFIX, input, 4 * d_model, d_model);
}

/// Linear maps from raw face/hand frames into the skeleton feature space,
/// zero-initialized so fusion starts out as a no-op.
pub fn init_cue_projections(store: &mut ParamStore, feature_dim: usize, skel_dim: usize) {
    store.insert(FACE_PROJ, Tensor::zeros(&[feature_dim, skel_dim]));
    store.insert(HAND_PROJ, Tensor::zeros(&[feature_dim, skel_dim]));
}

pub fn project_prefix_var(s: &mut Scope, z_e: Var, prefix: &str) -> Result<Var> {
    s.mlp2(z_e, prefix, Activation::Tanh)
}

/// Two-layer projector applied per frame; frame count is preserved.
pub fn project_prefix(params: &ParamStore, z_e: &Tensor, act: Activation) -> Result<ProjectedPrefix> {
    let w1 = params.get(&format!("{PREFIX}.w1"))?;
    if w1.rows() != z_e.cols() {
        return Err(TensorError::ShapeMismatch {
            op: "project_prefix",
            node: 0,
            lhs: z_e.shape().to_vec(),
            rhs: w1.shape().to_vec(),
        });
    }
    let mut s = Scope::eval(params, None);
    let x = s.constant(z_e.clone());
    let z = s.mlp2(x, PREFIX, act)?;
    ProjectedPrefix::new(s.g.value(z).clone())
}

/// Face/hand streams projected into skeleton feature space and fused.
pub fn fused_features(
    s: &mut Scope,
    z_s: Var,
    face: &CueFeatureSequence,
    hand: &CueFeatureSequence,
    cfg: &FusionConfig,
) -> Result<Var> {
    let mut out = z_s;
    for (stream, name, c) in [(face, FACE_PROJ, cfg.alpha), (hand, HAND_PROJ, cfg.beta_hand)] {
        if c == 0.0 {
            continue;
        }
        let x = s.constant(stream.frames.clone());
        let z = s.linear(x, name, false)?;
        let z = s.g.scale(z, c)?;
        out = s.g.add(out, z)?;
    }
    Ok(out)
}

/// Replaces frames whose detection failed with the most recent detected
/// frame; a leading run of failures copies the first detected frame.
pub fn repair_missing_frames(stream: &CueFeatureSequence, detected: &[bool]) -> Result<CueFeatureSequence> {
    let m = stream.frames.rows();
    if detected.len() != m {
        return Err(TensorError::Invalid(format!("{} detection flags for {m} frames", detected.len())));
    }
    let first = detected
        .iter()
        .position(|&d| d)
        .ok_or_else(|| TensorError::Invalid(format!("no detected frame in {:?} stream", stream.channel)))?;
    let c = stream.frames.cols();
    let src = stream.frames.data();
    let mut data = Vec::with_capacity(src.len());
    let mut last = first;
    for (i, &ok) in detected.iter().enumerate() {
        if ok {
            last = i;
        }
        let from = if ok { i } else { last };
        data.extend_from_slice(&src[from * c..(from + 1) * c]);
    }
    CueFeatureSequence::padded(stream.channel, Tensor::matrix(m, c, data), stream.valid)
}

/// Skeleton, face and hand streams must agree on frame count and width.
pub fn check_streams(streams: [&CueFeatureSequence; 3]) -> Result<()> {
    let [s, f, h] = streams;
    for other in [f, h] {
        if other.frames.shape() != s.frames.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "cue_frames",
                node: 0,
                lhs: s.frames.shape().to_vec(),
                rhs: other.frames.shape().to_vec(),
            });
        }
    }
    Ok(())
}
