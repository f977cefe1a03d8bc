//! Parameter binding, linear layers with optional low-rank adapters, and
//! small initialization helpers shared by every model component.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Graph, ParamStore, Result, Tensor, TensorError, Var};

/// Which named parameters receive gradients in a [`Scope`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trainable {
    None,
    All,
    /// Names starting with any of these prefixes.
    Prefixes(Vec<String>),
    /// Low-rank adapter weights only.
    Adapters,
    /// Anything allowed by one of the members.
    Union(Vec<Trainable>),
}

impl Trainable {
    pub fn allows(&self, name: &str) -> bool {
        match self {
            Trainable::None => false,
            Trainable::All => true,
            Trainable::Prefixes(p) => p.iter().any(|p| name.starts_with(p.as_str())),
            Trainable::Adapters => is_adapter_weight(name),
            Trainable::Union(all) => all.iter().any(|t| t.allows(name)),
        }
    }
}

pub fn is_adapter_weight(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

/// Low-rank adapter configuration: each targeted matrix `W` acts as
/// `W + (scale / rank) * B * A`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdapterSpec {
    /// Matched against the last dotted segment of a parameter name.
    pub targets: Vec<String>,
    pub rank: usize,
    pub scale: f64,
    pub dropout: f64,
}

impl AdapterSpec {
    pub fn targets_param(&self, name: &str) -> bool {
        let last = name.rsplit('.').next().unwrap_or(name);
        self.targets.iter().any(|t| t == last || t == name)
    }

    pub fn factor(&self) -> f64 {
        self.scale / self.rank as f64
    }
}

/// Elementwise nonlinearity between the two layers of [`Scope::mlp2`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    /// Test hook: no nonlinearity.
    Identity,
}

/// One graph plus the parameter table it reads from.
pub struct Scope<'a> {
    pub g: Graph,
    params: &'a ParamStore,
    trainable: Trainable,
    adapters: Option<&'a AdapterSpec>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'a> Scope<'a> {
    /// Evaluation scope: nothing trainable, adapter dropout off.
    pub fn eval(params: &'a ParamStore, adapters: Option<&'a AdapterSpec>) -> Self {
        Self { g: Graph::new(), params, trainable: Trainable::None, adapters, dropout_rng: None }
    }

    /// Training scope. Adapter dropout draws from `dropout_rng` when given.
    pub fn train(
        params: &'a ParamStore,
        trainable: Trainable,
        adapters: Option<&'a AdapterSpec>,
        dropout_rng: Option<ChaCha8Rng>,
    ) -> Self {
        Self { g: Graph::new(), params, trainable, adapters, dropout_rng }
    }

    pub fn params(&self) -> &'a ParamStore {
        self.params
    }

    pub fn p(&mut self, name: &str) -> Result<Var> {
        let t = self.params.get(name)?;
        let trainable = self.trainable.allows(name);
        Ok(self.g.named_leaf(name, t, trainable))
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.g.constant(t)
    }

    /// `x · W` (or `x · Wᵀ` when `transposed`), plus the adapter branch when
    /// `W` is targeted by the active adapter spec.
    pub fn linear(&mut self, x: Var, name: &str, transposed: bool) -> Result<Var> {
        let w = self.p(name)?;
        let base = self.g.matmul_t(x, w, false, transposed)?;
        let Some(spec) = self.adapters else { return Ok(base) };
        if !spec.targets_param(name) {
            return Ok(base);
        }
        let (wa, wb) = (format!("{name}.lora_a"), format!("{name}.lora_b"));
        if !self.params.contains(&wa) {
            return Ok(base);
        }
        check_rank(spec, self.params.get(name)?)?;
        let a = self.p(&wa)?;
        let b = self.p(&wb)?;
        let xin = self.dropout(x, spec.dropout)?;
        // W is (in, out): x·B·A.  W is (out, in) used transposed: x·Aᵀ·Bᵀ.
        let delta = if transposed {
            let xa = self.g.matmul_t(xin, a, false, true)?;
            self.g.matmul_t(xa, b, false, true)?
        } else {
            let xb = self.g.matmul(xin, b)?;
            self.g.matmul(xb, a)?
        };
        let delta = self.g.scale(delta, spec.factor())?;
        self.g.add(base, delta)
    }

    fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.dropout_rng.as_mut() else { return Ok(x) };
        if rate <= 0.0 {
            return Ok(x);
        }
        let shape = self.g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - rate);
        let mask = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        let m = self.g.constant(Tensor::new(shape, mask)?);
        self.g.mul(x, m)
    }

    /// `act(x · W1 + b1) · W2 + b2` with parameters `{prefix}.w1` etc.
    pub fn mlp2(&mut self, x: Var, prefix: &str, act: Activation) -> Result<Var> {
        let h = self.linear(x, &format!("{prefix}.w1"), false)?;
        let b1 = self.p(&format!("{prefix}.b1"))?;
        let h = self.g.add(h, b1)?;
        let h = match act {
            Activation::Tanh => self.g.tanh(h)?,
            Activation::Identity => h,
        };
        let o = self.linear(h, &format!("{prefix}.w2"), false)?;
        let b2 = self.p(&format!("{prefix}.b2"))?;
        self.g.add(o, b2)
    }

    /// Row-wise RMS-style normalization: `sqrt(d) * x / |x|`.
    pub fn norm_rows(&mut self, x: Var) -> Result<Var> {
        let d = self.g.value(x).cols() as f64;
        let n = self.g.l2_normalize_rows(x, 1e-12)?;
        self.g.scale(n, d.sqrt())
    }
}

pub(crate) fn check_rank(spec: &AdapterSpec, w: &Tensor) -> Result<()> {
    if spec.rank == 0 || spec.rank > w.rows().min(w.cols()) {
        return Err(TensorError::Invalid(format!(
            "adapter rank {} exceeds matrix dims {:?}",
            spec.rank,
            w.shape()
        )));
    }
    Ok(())
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("valid std");
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| dist.sample(rng)).collect())
}

/// Adds `{prefix}.w1/b1/w2/b2` for an `input -> hidden -> output` MLP.
pub fn init_mlp2(
    store: &mut ParamStore,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    input: usize,
    hidden: usize,
    output: usize,
) {
    store.insert(format!("{prefix}.w1"), normal_matrix(rng, input, hidden, (1.0 / input as f64).sqrt()));
    store.insert(format!("{prefix}.b1"), Tensor::zeros(&[1, hidden]));
    store.insert(format!("{prefix}.w2"), normal_matrix(rng, hidden, output, (1.0 / hidden as f64).sqrt()));
    store.insert(format!("{prefix}.b2"), Tensor::zeros(&[1, output]));
}

/// Fixed sinusoidal position codes, `(len, dim)`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(len, dim, data)
}
