//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node to the tape, so building the
//! graph *is* the forward pass. Node outputs are never mutated; a graph is
//! rebuilt for every step. All values are rank-2; scalars are `(1, 1)`.

use std::collections::BTreeMap;

use super::{matmul_raw, Result, Tensor, TensorError};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// When to test for NaN/Inf.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CheckMode {
    /// After every op.
    #[default]
    EveryOp,
    /// Only on the value handed to [`Graph::backward`].
    LossOnly,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    SoftmaxRows { x: Var, inv_temp: f64 },
    LogSumExpRows(Var),
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Mean(Var),
    Gather { x: Var, index: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    L2NormalizeRows { x: Var, eps: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MatMul { .. } => "matmul",
            Op::Scale(..) => "scale",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Tanh(_) => "tanh",
            Op::SoftmaxRows { .. } => "softmax_rows",
            Op::LogSumExpRows(_) => "logsumexp_rows",
            Op::Sum(_) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Mean(_) => "mean",
            Op::Gather { .. } => "gather",
            Op::GatherRows { .. } => "gather_rows",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::L2NormalizeRows { .. } => "l2_normalize_rows",
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
}

/// Tape of evaluated ops plus the table of named parameter leaves.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    named: BTreeMap<String, Var>,
    check: CheckMode,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    named: BTreeMap<String, Var>,
    trainable: Vec<bool>,
}

impl Gradients {
    /// Gradient with respect to any node; zeros if the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.by_node[v.0].clone().unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    /// Gradient of a named parameter leaf.
    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.named.get(name).map(|&v| self.wrt(v))
    }

    /// Gradients of every trainable named parameter, in name order.
    pub fn params(&self) -> BTreeMap<String, Tensor> {
        self.named
            .iter()
            .filter(|(_, v)| self.trainable[v.0])
            .map(|(k, &v)| (k.clone(), self.wrt(v)))
            .collect()
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    if t.shape().len() == 2 {
        t
    } else {
        let (r, c) = (t.rows(), t.cols());
        Tensor::matrix(r, c, t.into_data())
    }
}

/// How `rhs` broadcasts against `lhs` in elementwise binary ops.
#[derive(Clone, Copy)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

fn bcast(op: &'static str, node: usize, lhs: &Tensor, rhs: &Tensor) -> Result<Bcast> {
    let (lr, lc) = (lhs.rows(), lhs.cols());
    let (rr, rc) = (rhs.rows(), rhs.cols());
    if (lr, lc) == (rr, rc) {
        Ok(Bcast::Same)
    } else if rr == 1 && rc == 1 {
        Ok(Bcast::Scalar)
    } else if rr == 1 && rc == lc {
        Ok(Bcast::Row)
    } else if rc == 1 && rr == lr {
        Ok(Bcast::Col)
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            node,
            lhs: lhs.shape().to_vec(),
            rhs: rhs.shape().to_vec(),
        })
    }
}

#[inline]
fn bidx(b: Bcast, i: usize, j: usize, cols: usize) -> usize {
    match b {
        Bcast::Same => i * cols + j,
        Bcast::Scalar => 0,
        Bcast::Row => j,
        Bcast::Col => i,
    }
}

fn reduce_to(b: Bcast, g: &Tensor, shape: &[usize]) -> Tensor {
    let (r, c) = (g.rows(), g.cols());
    match b {
        Bcast::Same => g.clone(),
        Bcast::Scalar => Tensor::new(shape.to_vec(), vec![g.data().iter().sum()]).unwrap(),
        Bcast::Row => {
            let mut out = vec![0.0; c];
            for i in 0..r {
                for (o, v) in out.iter_mut().zip(g.row_slice(i)) {
                    *o += v;
                }
            }
            Tensor::new(shape.to_vec(), out).unwrap()
        }
        Bcast::Col => {
            let out = (0..r).map(|i| g.row_slice(i).iter().sum()).collect();
            Tensor::new(shape.to_vec(), out).unwrap()
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_check(check: CheckMode) -> Self {
        Self { check, ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let id = self.nodes.len();
        if self.check == CheckMode::EveryOp && !value.is_finite() {
            return Err(TensorError::NonFinite { op: op.name(), node: id });
        }
        self.nodes.push(Node { value, op, trainable: false });
        Ok(Var(id))
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            node: self.nodes.len(),
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    /// Constant leaf (no gradient reported by name).
    pub fn constant(&mut self, t: Tensor) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node { value: as_matrix(t), op: Op::Leaf, trainable: false });
        Var(id)
    }

    /// Named leaf. Binding the same name twice returns the first handle.
    pub fn named_leaf(&mut self, name: &str, value: &Tensor, trainable: bool) -> Var {
        if let Some(&v) = self.named.get(name) {
            return v;
        }
        let id = self.nodes.len();
        self.nodes.push(Node { value: as_matrix(value.clone()), op: Op::Leaf, trainable });
        self.named.insert(name.to_string(), Var(id));
        Var(id)
    }

    /// Trainable named parameter leaf.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        self.named_leaf(name, value, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let bc = bcast(name, self.nodes.len(), ta, tb)?;
        let (r, c) = (ta.rows(), ta.cols());
        let (ad, bd) = (ta.data(), tb.data());
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                out.push(f(ad[i * c + j], bd[bidx(bc, i, j, c)]));
            }
        }
        self.push(Tensor::matrix(r, c, out), op)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (m, k) = if ta { (x.cols(), x.rows()) } else { (x.rows(), x.cols()) };
        let (k2, n) = if tb { (y.cols(), y.rows()) } else { (y.rows(), y.cols()) };
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let out = matmul_raw(x, ta, y, tb, m, k, n);
        self.push(Tensor::matrix(m, n, out), Op::MatMul { a, b, ta, tb })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * c);
        self.push(v, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// Row-wise softmax of `a / temperature`. Entries whose `mask` flag is
    /// false are excluded from normalization and come out exactly zero.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64, mask: Option<&[bool]>) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(TensorError::Invalid(format!("temperature must be > 0, got {temperature}")));
        }
        let x = self.value(a);
        if let Some(m) = mask {
            if m.len() != x.numel() {
                return Err(TensorError::Invalid("softmax mask length".into()));
            }
        }
        let out = softmax_rows_values(x, 1.0 / temperature, mask)?;
        self.push(out, Op::SoftmaxRows { x: a, inv_temp: 1.0 / temperature })
    }

    /// Row-wise log-sum-exp, shape `(m, 1)`.
    pub fn logsumexp_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let out = (0..x.rows()).map(|i| logsumexp(x.row_slice(i))).collect();
        self.push(Tensor::matrix(x.rows(), 1, out), Op::LogSumExpRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    /// Sum along `axis`: 0 gives `(1, n)`, 1 gives `(m, 1)`.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let out = match axis {
            0 => {
                let mut s = vec![0.0; c];
                for i in 0..r {
                    for (o, v) in s.iter_mut().zip(x.row_slice(i)) {
                        *o += v;
                    }
                }
                Tensor::matrix(1, c, s)
            }
            1 => Tensor::matrix(r, 1, (0..r).map(|i| x.row_slice(i).iter().sum()).collect()),
            _ => return Err(TensorError::Invalid(format!("axis {axis} out of range"))),
        };
        self.push(out, Op::SumAxis { x: a, axis })
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if x.numel() == 0 {
            return Err(TensorError::Invalid("mean of empty tensor".into()));
        }
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a))
    }

    /// Selects elements by flat row-major index into a `(1, k)` row.
    pub fn gather(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= x.numel()) {
            return Err(TensorError::Invalid(format!("gather index {bad} out of range {}", x.numel())));
        }
        let out = index.iter().map(|&i| x.data()[i]).collect::<Vec<_>>();
        self.push(Tensor::matrix(1, index.len(), out), Op::Gather { x: a, index: index.to_vec() })
    }

    /// Selects whole rows (also used as an embedding lookup).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= x.rows() {
                return Err(TensorError::Invalid(format!("row {r} out of range {}", x.rows())));
            }
            out.extend_from_slice(x.row_slice(r));
        }
        self.push(Tensor::matrix(rows.len(), c, out), Op::GatherRows { x: a, rows: rows.to_vec() })
    }

    /// Concatenates along `axis` (0 stacks rows, 1 stacks columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| TensorError::Invalid("concat of nothing".into()))?;
        let out = match axis {
            0 => {
                let c = self.value(first).cols();
                let mut data = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    let t = self.value(p);
                    if t.cols() != c {
                        return Err(self.mismatch("concat", first, p));
                    }
                    rows += t.rows();
                    data.extend_from_slice(t.data());
                }
                Tensor::matrix(rows, c, data)
            }
            1 => {
                let r = self.value(first).rows();
                for &p in parts {
                    if self.value(p).rows() != r {
                        return Err(self.mismatch("concat", first, p));
                    }
                }
                let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
                let mut data = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for &p in parts {
                        data.extend_from_slice(self.value(p).row_slice(i));
                    }
                }
                Tensor::matrix(r, cols, data)
            }
            _ => return Err(TensorError::Invalid(format!("axis {axis} out of range"))),
        };
        self.push(out, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Half-open range `[start, end)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let extent = if axis == 0 { r } else { c };
        if start > end || end > extent || axis > 1 {
            return Err(TensorError::Invalid(format!(
                "slice [{start}, {end}) on axis {axis} of {:?}",
                x.shape()
            )));
        }
        let out = if axis == 0 {
            Tensor::matrix(end - start, c, x.data()[start * c..end * c].to_vec())
        } else {
            let mut d = Vec::with_capacity(r * (end - start));
            for i in 0..r {
                d.extend_from_slice(&x.row_slice(i)[start..end]);
            }
            Tensor::matrix(r, end - start, d)
        };
        self.push(out, Op::Slice { x: a, axis, start })
    }

    /// `x / sqrt(|x|^2 + eps)` per row; an all-zero row stays zero.
    pub fn l2_normalize_rows(&mut self, a: Var, eps: f64) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        let mut out = Vec::with_capacity(x.numel());
        for i in 0..x.rows() {
            let row = x.row_slice(i);
            let n = (row.iter().map(|v| v * v).sum::<f64>() + eps).sqrt();
            if n == 0.0 {
                out.extend(std::iter::repeat(0.0).take(c));
            } else {
                out.extend(row.iter().map(|v| v / n));
            }
        }
        let t = Tensor::matrix(x.rows(), c, out);
        self.push(t, Op::L2NormalizeRows { x: a, eps })
    }

    // Composite helpers built only from the ops above.

    /// `x - logsumexp_rows(x)`.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let lse = self.logsumexp_rows(a)?;
        self.sub(a, lse)
    }

    /// `a / b` composed as `a * exp(-log b)`; `b` must be positive.
    pub fn div_pos(&mut self, a: Var, b: Var) -> Result<Var> {
        let lb = self.log(b)?;
        let nl = self.scale(lb, -1.0)?;
        let inv = self.exp(nl)?;
        self.mul(a, inv)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.add(a, k)
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarSeed(lv.shape().to_vec()));
        }
        if !lv.is_finite() {
            return Err(TensorError::NonFinite { op: self.nodes[loss.0].op.name(), node: loss.0 });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0]).unwrap());
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            by_node: grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            named: self.named.clone(),
            trainable: self.nodes.iter().map(|n| n.trainable).collect(),
        })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[id];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                accumulate(grads, *a, g.clone());
                let bv = self.value(*b);
                let bc = bcast("add", id, self.value(*a), bv)?;
                let gb = reduce_to(bc, g, bv.shape());
                accumulate(grads, *b, if sign < 0.0 { gb.map(|v| -v) } else { gb });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bc = bcast("mul", id, av, bv)?;
                let (r, c) = (av.rows(), av.cols());
                let mut ga = Vec::with_capacity(r * c);
                let mut gb_full = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        let k = i * c + j;
                        ga.push(g.data()[k] * bv.data()[bidx(bc, i, j, c)]);
                        gb_full.push(g.data()[k] * av.data()[k]);
                    }
                }
                accumulate(grads, *a, Tensor::matrix(r, c, ga));
                let gb = reduce_to(bc, &Tensor::matrix(r, c, gb_full), bv.shape());
                accumulate(grads, *b, gb);
            }
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = if !ta {
                    g.matmul(bv, false, !tb)?
                } else {
                    bv.matmul(g, *tb, true)?
                };
                let gb = if !tb {
                    av.matmul(g, !ta, false)?
                } else {
                    g.matmul(av, true, *ta)?
                };
                accumulate(grads, *a, ga);
                accumulate(grads, *b, gb);
            }
            Op::Scale(a, c) => accumulate(grads, *a, g.map(|v| v * c)),
            Op::Exp(a) => accumulate(grads, *a, zip(g, out, |gv, y| gv * y)),
            Op::Log(a) => accumulate(grads, *a, zip(g, self.value(*a), |gv, x| gv / x)),
            Op::Tanh(a) => accumulate(grads, *a, zip(g, out, |gv, y| gv * (1.0 - y * y))),
            Op::SoftmaxRows { x, inv_temp } => {
                let (r, c) = (out.rows(), out.cols());
                let mut gx = Vec::with_capacity(r * c);
                for i in 0..r {
                    let y = out.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(y.iter().zip(gr).map(|(yv, gv)| yv * (gv - dot) * inv_temp));
                }
                accumulate(grads, *x, Tensor::matrix(r, c, gx));
            }
            Op::LogSumExpRows(x) => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let mut gx = Vec::with_capacity(r * c);
                for i in 0..r {
                    let l = out.data()[i];
                    gx.extend(xv.row_slice(i).iter().map(|v| g.data()[i] * (v - l).exp()));
                }
                accumulate(grads, *x, Tensor::matrix(r, c, gx));
            }
            Op::Sum(x) => {
                let s = self.value(*x).shape().to_vec();
                accumulate(grads, *x, Tensor::full(&s, g.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, Tensor::full(xv.shape(), g.item() / xv.numel() as f64));
            }
            Op::SumAxis { x, axis } => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let mut gx = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        gx.push(if *axis == 0 { g.data()[j] } else { g.data()[i] });
                    }
                }
                accumulate(grads, *x, Tensor::matrix(r, c, gx));
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let mut gx = Tensor::zeros(xv.shape());
                for (k, &i) in index.iter().enumerate() {
                    gx.data_mut()[i] += g.data()[k];
                }
                accumulate(grads, *x, gx);
            }
            Op::GatherRows { x, rows } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                for (k, &r) in rows.iter().enumerate() {
                    let dst = &mut gx.data_mut()[r * c..(r + 1) * c];
                    for (d, s) in dst.iter_mut().zip(g.row_slice(k)) {
                        *d += s;
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Concat { parts, axis } => {
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let (r, c) = (pv.rows(), pv.cols());
                    let gp = if *axis == 0 {
                        let cols = g.cols();
                        Tensor::matrix(r, c, g.data()[offset * cols..(offset + r) * cols].to_vec())
                    } else {
                        let mut d = Vec::with_capacity(r * c);
                        for i in 0..r {
                            d.extend_from_slice(&g.row_slice(i)[offset..offset + c]);
                        }
                        Tensor::matrix(r, c, d)
                    };
                    offset += if *axis == 0 { r } else { c };
                    accumulate(grads, p, gp);
                }
            }
            Op::Slice { x, axis, start } => {
                let xv = self.value(*x);
                let c = xv.cols();
                let mut gx = Tensor::zeros(xv.shape());
                if *axis == 0 {
                    gx.data_mut()[start * c..start * c + g.numel()].copy_from_slice(g.data());
                } else {
                    let w = g.cols();
                    for i in 0..xv.rows() {
                        gx.data_mut()[i * c + start..i * c + start + w].copy_from_slice(g.row_slice(i));
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::L2NormalizeRows { x, eps } => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let mut gx = Vec::with_capacity(r * c);
                for i in 0..r {
                    let row = xv.row_slice(i);
                    let gr = g.row_slice(i);
                    let n2 = row.iter().map(|v| v * v).sum::<f64>() + eps;
                    if n2 == 0.0 {
                        gx.extend(std::iter::repeat(0.0).take(c));
                        continue;
                    }
                    let n = n2.sqrt();
                    let xg: f64 = row.iter().zip(gr).map(|(a, b)| a * b).sum();
                    gx.extend(row.iter().zip(gr).map(|(xv, gv)| gv / n - xv * xg / (n2 * n)));
                }
                accumulate(grads, *x, Tensor::matrix(r, c, gx));
            }
        }
        Ok(())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

pub(crate) fn softmax_rows_values(x: &Tensor, inv_temp: f64, mask: Option<&[bool]>) -> Result<Tensor> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = x.row_slice(i);
        let keep = |j: usize| mask.map_or(true, |m| m[i * c + j]);
        let mut mx = f64::NEG_INFINITY;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) {
                mx = mx.max(v * inv_temp);
            }
        }
        if mx == f64::NEG_INFINITY {
            return Err(TensorError::AllMasked { row: i });
        }
        let mut z = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if keep(j) {
                let e = (v * inv_temp - mx).exp();
                out[i * c + j] = e;
                z += e;
            }
        }
        for o in &mut out[i * c..(i + 1) * c] {
            *o /= z;
        }
    }
    Ok(Tensor::matrix(r, c, out))
}
