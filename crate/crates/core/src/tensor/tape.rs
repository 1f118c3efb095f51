use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::{softmax_rows_slice, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
    Min,
    Max,
}

#[derive(Clone, Copy, Debug)]
enum UnOp {
    Relu,
    Sigmoid,
    Exp,
    Log,
    Abs,
    Scale(f64),
    AddConst(f64),
    ClampMin(f64),
    ClampMax(f64),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Binary(BinOp, Var, Var),
    AddBias(Var, Var),
    MulRows(Var, Var),
    Unary(UnOp, Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    GatherRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    SinCos { x: Var, freqs: Vec<f64> },
    SigmoidFocal {
        logits: Var,
        targets: Vec<f64>,
        alpha: f64,
        gamma: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records primitive operations so that adjoints can be replayed by [`Tape::backward`].
///
/// A tape lives for one forward/backward pass. Parameters are bound up front with
/// [`Tape::with_params`]; after `backward`, [`Tape::write_param_grads`] adds the
/// parameter adjoints into the store.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: Vec<Var>,
    record: bool,
}

const LN_EPS: f64 = 1e-5;
const FOCAL_EPS: f64 = 1e-8;

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            record: true,
        }
    }

    /// Binds every parameter of `store`. With `record == false` parameters are
    /// constants and no adjoint work is ever done.
    pub fn with_params(store: &ParamStore, record: bool) -> Self {
        let mut tape = Self {
            nodes: Vec::with_capacity(1024),
            params: Vec::with_capacity(store.len()),
            record,
        };
        for id in store.ids() {
            let mut value = store.get(id).clone();
            value.zero_grad();
            let v = tape.push_raw(value, Op::Param(id), record);
            tape.params.push(v);
        }
        tape
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.params.clear();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// The bound node of parameter `id`.
    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_raw(value, Op::Leaf, false)
    }

    /// A differentiable input that is not a parameter (used by gradient checks).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let ng = self.record;
        self.push_raw(value, Op::Leaf, ng)
    }

    /// Copy of `v` cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let mut value = self.nodes[v.0].value.clone();
        value.zero_grad();
        self.push_raw(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push_raw(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_raw(value, op, needs_grad))
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [m, n] => Ok((*m, *n)),
            s => Err(Error::shape(op, s, &[])),
        }
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let ng = self.ng(a) || self.ng(b);
        self.push("matmul_nt", Tensor::from_parts(vec![m, n], out), Op::MatMulNt(a, b), ng)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).transpose()?;
        let ng = self.ng(x);
        self.push("transpose", t, Op::Transpose(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        self.push("reshape", t, Op::Reshape(x), ng)
    }

    // ---- elementwise -------------------------------------------------------

    fn binary(&mut self, op: BinOp, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (na, nb) = (ta.numel(), tb.numel());
        let shape = if ta.shape() == tb.shape() || nb == 1 {
            ta.shape().to_vec()
        } else if na == 1 {
            tb.shape().to_vec()
        } else {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        };
        let n = na.max(nb);
        let (da, db) = (ta.data(), tb.data());
        let at = |i: usize| if na == 1 { da[0] } else { da[i] };
        let bt = |i: usize| if nb == 1 { db[0] } else { db[i] };
        if let BinOp::Div = op {
            if let Some(bad) = (0..n).map(bt).find(|v| v.abs() < 1e-12) {
                return Err(Error::Domain {
                    op: name,
                    detail: format!("divisor {bad:e} below 1e-12 in magnitude"),
                });
            }
        }
        let out: Vec<f64> = (0..n)
            .map(|i| {
                let (x, y) = (at(i), bt(i));
                match op {
                    BinOp::Add => x + y,
                    BinOp::Sub => x - y,
                    BinOp::Mul => x * y,
                    BinOp::Div => x / y,
                    BinOp::Min => x.min(y),
                    BinOp::Max => x.max(y),
                }
            })
            .collect();
        let ng = self.ng(a) || self.ng(b);
        self.push(name, Tensor::from_parts(shape, out), Op::Binary(op, a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Div, "div", a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Min, "minimum", a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinOp::Max, "maximum", a, b)
    }

    /// `x[m×n] + b[n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2("add_bias", x)?;
        if self.value(b).numel() != n {
            return Err(Error::shape("add_bias", self.shape(x), self.shape(b)));
        }
        let bd = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().zip(bd).for_each(|(o, &bv)| *o += bv);
        }
        let ng = self.ng(x) || self.ng(b);
        self.push("add_bias", Tensor::from_parts(vec![m, n], out), Op::AddBias(x, b), ng)
    }

    /// `x[m×n]` with row `i` multiplied by `s[i]`.
    pub fn mul_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (m, n) = self.dims2("mul_rows", x)?;
        if self.value(s).numel() != m {
            return Err(Error::shape("mul_rows", self.shape(x), self.shape(s)));
        }
        let sd = self.value(s).data();
        let mut out = self.value(x).data().to_vec();
        for (row, &sv) in out.chunks_mut(n).zip(sd) {
            row.iter_mut().for_each(|o| *o *= sv);
        }
        let ng = self.ng(x) || self.ng(s);
        self.push("mul_rows", Tensor::from_parts(vec![m, n], out), Op::MulRows(x, s), ng)
    }

    fn unary(&mut self, op: UnOp, name: &'static str, x: Var) -> Result<Var> {
        let t = self.value(x);
        if let UnOp::Log = op {
            if let Some(bad) = t.data().iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: name,
                    detail: format!("log of non-positive value {bad:e}"),
                });
            }
        }
        let out: Vec<f64> = t
            .data()
            .iter()
            .map(|&v| match op {
                UnOp::Relu => v.max(0.0),
                UnOp::Sigmoid => super::sigmoid(v),
                UnOp::Exp => v.exp(),
                UnOp::Log => v.ln(),
                UnOp::Abs => v.abs(),
                UnOp::Scale(c) => v * c,
                UnOp::AddConst(c) => v + c,
                UnOp::ClampMin(c) => v.max(c),
                UnOp::ClampMax(c) => v.min(c),
            })
            .collect();
        let shape = t.shape().to_vec();
        let ng = self.ng(x);
        self.push(name, Tensor::from_parts(shape, out), Op::Unary(op, x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Relu, "relu", x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Sigmoid, "sigmoid", x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Exp, "exp", x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Log, "log", x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(UnOp::Abs, "abs", x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnOp::Scale(c), "scale", x)
    }

    pub fn add_const(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnOp::AddConst(c), "add_const", x)
    }

    pub fn clamp_min(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnOp::ClampMin(c), "clamp_min", x)
    }

    pub fn clamp_max(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(UnOp::ClampMax(c), "clamp_max", x)
    }

    // ---- row-wise ----------------------------------------------------------

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.dims2("softmax_rows", x)?;
        let out = softmax_rows_slice(self.value(x).data(), n);
        let ng = self.ng(x);
        self.push("softmax_rows", Tensor::from_parts(vec![m, n], out), Op::SoftmaxRows(x), ng)
    }

    /// Per-row layer normalization with learned gain and bias of length `n`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims2("layer_norm", x)?;
        if self.value(gamma).numel() != n || self.value(beta).numel() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xd = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; m * n];
        let mut rstd = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            "layer_norm",
            Tensor::from_parts(vec![m, n], out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        )
    }

    // ---- structural --------------------------------------------------------

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let m = self.dims2("concat_cols", first)?.0;
        let mut total = 0;
        for &v in xs {
            let (mv, nv) = self.dims2("concat_cols", v)?;
            if mv != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(v)));
            }
            total += nv;
        }
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for &v in xs {
            let t = self.value(v);
            let nv = t.cols();
            for i in 0..m {
                out[i * total + off..i * total + off + nv].copy_from_slice(t.row(i));
            }
            off += nv;
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(
            "concat_cols",
            Tensor::from_parts(vec![m, total], out),
            Op::ConcatCols(xs.to_vec()),
            ng,
        )
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2("slice_cols", x)?;
        if start > end || end > n {
            return Err(Error::contract(format!(
                "slice_cols {start}..{end} out of range for {n} columns"
            )));
        }
        let w = end - start;
        let t = self.value(x);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&t.row(i)[start..end]);
        }
        let ng = self.ng(x);
        self.push(
            "slice_cols",
            Tensor::from_parts(vec![m, w], out),
            Op::SliceCols { x, start },
            ng,
        )
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let n = self.dims2("concat_rows", first)?.1;
        let mut m = 0;
        let mut out = Vec::new();
        for &v in xs {
            let (mv, nv) = self.dims2("concat_rows", v)?;
            if nv != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(v)));
            }
            m += mv;
            out.extend_from_slice(self.value(v).data());
        }
        let ng = xs.iter().any(|&v| self.ng(v));
        self.push(
            "concat_rows",
            Tensor::from_parts(vec![m, n], out),
            Op::ConcatRows(xs.to_vec()),
            ng,
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2("gather_rows", x)?;
        if let Some(bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::contract(format!(
                "gather_rows index {bad} out of range for {m} rows"
            )));
        }
        let t = self.value(x);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(t.row(i));
        }
        let ng = self.ng(x);
        self.push(
            "gather_rows",
            Tensor::from_parts(vec![idx.len(), n], out),
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let ng = self.ng(x);
        self.push("sum", Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    // ---- fused primitives --------------------------------------------------

    /// Sinusoidal encoding of every element of `x`: each scalar `v` expands to
    /// `[sin(f₀v), cos(f₀v), sin(f₁v), cos(f₁v), …]` in place along the last axis.
    pub fn sincos(&mut self, x: Var, freqs: &[f64]) -> Result<Var> {
        let t = self.value(x);
        let per = 2 * freqs.len();
        let mut out = Vec::with_capacity(t.numel() * per);
        for &v in t.data() {
            for &f in freqs {
                let (s, c) = (f * v).sin_cos();
                out.push(s);
                out.push(c);
            }
        }
        let mut shape = t.shape().to_vec();
        match shape.last_mut() {
            Some(last) => *last *= per,
            None => shape.push(per),
        }
        let ng = self.ng(x);
        self.push(
            "sincos",
            Tensor::from_parts(shape, out),
            Op::SinCos {
                x,
                freqs: freqs.to_vec(),
            },
            ng,
        )
    }

    /// Sum over elements of the sigmoid focal loss with per-element targets in [0, 1].
    pub fn sigmoid_focal(&mut self, logits: Var, targets: &[f64], alpha: f64, gamma: f64) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != targets.len() {
            return Err(Error::shape("sigmoid_focal", t.shape(), &[targets.len()]));
        }
        let total: f64 = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| focal_value(z, y, alpha, gamma))
            .sum();
        let ng = self.ng(logits);
        self.push(
            "sigmoid_focal",
            Tensor::scalar(total),
            Op::SigmoidFocal {
                logits,
                targets: targets.to_vec(),
                alpha,
                gamma,
            },
            ng,
        )
    }

    // ---- reverse pass ------------------------------------------------------

    /// Replays adjoints from a scalar `loss`, leaving gradients on every node that
    /// depends on a differentiable leaf or parameter.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            self.nodes[i].value.set_grad(g);
        }
        Ok(())
    }

    /// Adds the adjoint of every bound parameter into `store`.
    pub fn write_param_grads(&self, store: &mut ParamStore) {
        for node in &self.nodes {
            if let (Op::Param(id), Some(g)) = (&node.op, node.value.grad()) {
                store.get_mut(*id).accumulate_grad(g);
            }
        }
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        // Accumulate into the adjoint of `v` if it participates in differentiation.
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let target = &self.nodes[v.0];
            if !target.needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; target.value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.cols();
                acc(*a, &mut |ga| matmul_nt(g, tb.data(), ga, m, n, k));
                acc(*b, &mut |gb| matmul_tn(ta.data(), g, gb, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.rows(), ta.cols());
                let n = tb.rows();
                acc(*a, &mut |ga| matmul_nn(g, tb.data(), ga, m, n, k));
                acc(*b, &mut |gb| matmul_tn(g, ta.data(), gb, m, n, k));
            }
            Op::Binary(op, a, b) => {
                let (da, db) = (val(*a).data(), val(*b).data());
                let (na, nb) = (da.len(), db.len());
                let n = g.len();
                let at = |j: usize| if na == 1 { da[0] } else { da[j] };
                let bt = |j: usize| if nb == 1 { db[0] } else { db[j] };
                let ia = |j: usize| if na == 1 { 0 } else { j };
                let ib = |j: usize| if nb == 1 { 0 } else { j };
                acc(*a, &mut |ga| {
                    for j in 0..n {
                        let d = match op {
                            BinOp::Add | BinOp::Sub => 1.0,
                            BinOp::Mul => bt(j),
                            BinOp::Div => 1.0 / bt(j),
                            BinOp::Min => f64::from(u8::from(at(j) <= bt(j))),
                            BinOp::Max => f64::from(u8::from(at(j) >= bt(j))),
                        };
                        ga[ia(j)] += g[j] * d;
                    }
                });
                acc(*b, &mut |gb| {
                    for j in 0..n {
                        let d = match op {
                            BinOp::Add => 1.0,
                            BinOp::Sub => -1.0,
                            BinOp::Mul => at(j),
                            BinOp::Div => -at(j) / (bt(j) * bt(j)),
                            BinOp::Min => f64::from(u8::from(at(j) > bt(j))),
                            BinOp::Max => f64::from(u8::from(at(j) < bt(j))),
                        };
                        gb[ib(j)] += g[j] * d;
                    }
                });
            }
            Op::AddBias(x, b) => {
                let n = out.cols();
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, &v)| *a += v));
                acc(*b, &mut |gb| {
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                });
            }
            Op::MulRows(x, s) => {
                let n = out.cols();
                let (dx, ds) = (val(*x).data(), val(*s).data());
                acc(*x, &mut |gx| {
                    for (i, (grow, gxrow)) in g.chunks(n).zip(gx.chunks_mut(n)).enumerate() {
                        gxrow.iter_mut().zip(grow).for_each(|(a, &v)| *a += v * ds[i]);
                    }
                });
                acc(*s, &mut |gs| {
                    for (i, (grow, xrow)) in g.chunks(n).zip(dx.chunks(n)).enumerate() {
                        gs[i] += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            Op::Unary(op, x) => {
                let dx = val(*x).data();
                let dy = out.data();
                acc(*x, &mut |gx| {
                    for j in 0..g.len() {
                        let d = match op {
                            UnOp::Relu => f64::from(u8::from(dx[j] > 0.0)),
                            UnOp::Sigmoid => dy[j] * (1.0 - dy[j]),
                            UnOp::Exp => dy[j],
                            UnOp::Log => 1.0 / dx[j],
                            UnOp::Abs => {
                                if dx[j] > 0.0 {
                                    1.0
                                } else if dx[j] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnOp::Scale(c) => *c,
                            UnOp::AddConst(_) => 1.0,
                            UnOp::ClampMin(c) => f64::from(u8::from(dx[j] >= *c)),
                            UnOp::ClampMax(c) => f64::from(u8::from(dx[j] <= *c)),
                        };
                        gx[j] += g[j] * d;
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let n = out.cols();
                let y = out.data();
                acc(*x, &mut |gx| {
                    for ((yr, gr), gxr) in y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                        let s: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            gxr[j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = out.cols();
                let gm = val(*gamma).data();
                acc(*gamma, &mut |gg| {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            gg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for gr in g.chunks(n) {
                        gb.iter_mut().zip(gr).for_each(|(a, &v)| *a += v);
                    }
                });
                acc(*x, &mut |gx| {
                    let nf = n as f64;
                    for (i, ((gr, hr), gxr)) in g
                        .chunks(n)
                        .zip(xhat.chunks(n))
                        .zip(gx.chunks_mut(n))
                        .enumerate()
                    {
                        let mut mean_gh = 0.0;
                        let mut mean_ghh = 0.0;
                        for j in 0..n {
                            let gh = gr[j] * gm[j];
                            mean_gh += gh;
                            mean_ghh += gh * hr[j];
                        }
                        mean_gh /= nf;
                        mean_ghh /= nf;
                        for j in 0..n {
                            let gh = gr[j] * gm[j];
                            gxr[j] += rstd[i] * (gh - mean_gh - hr[j] * mean_ghh);
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = (out.rows(), out.cols());
                acc(*x, &mut |gx| {
                    // out is m×n, x is n×m
                    for i in 0..m {
                        for j in 0..n {
                            gx[j * m + i] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(a, &v)| *a += v));
            }
            Op::ConcatCols(xs) => {
                let total = out.cols();
                let m = out.rows();
                let mut off = 0;
                for &v in xs {
                    let nv = val(v).cols();
                    acc(v, &mut |gv| {
                        for i in 0..m {
                            let src = &g[i * total + off..i * total + off + nv];
                            gv[i * nv..(i + 1) * nv]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(a, &b)| *a += b);
                        }
                    });
                    off += nv;
                }
            }
            Op::SliceCols { x, start } => {
                let (m, w) = (out.rows(), out.cols());
                let n = val(*x).cols();
                acc(*x, &mut |gx| {
                    for i in 0..m {
                        let dst = &mut gx[i * n + start..i * n + start + w];
                        dst.iter_mut()
                            .zip(&g[i * w..(i + 1) * w])
                            .for_each(|(a, &b)| *a += b);
                    }
                });
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &v in xs {
                    let len = val(v).numel();
                    acc(v, &mut |gv| {
                        gv.iter_mut()
                            .zip(&g[off..off + len])
                            .for_each(|(a, &b)| *a += b)
                    });
                    off += len;
                }
            }
            Op::GatherRows { x, idx } => {
                let n = out.cols();
                acc(*x, &mut |gx| {
                    for (r, &src) in idx.iter().enumerate() {
                        gx[src * n..(src + 1) * n]
                            .iter_mut()
                            .zip(&g[r * n..(r + 1) * n])
                            .for_each(|(a, &b)| *a += b);
                    }
                });
            }
            Op::Sum(x) => {
                let g0 = g[0];
                acc(*x, &mut |gx| gx.iter_mut().for_each(|a| *a += g0));
            }
            Op::SinCos { x, freqs } => {
                let per = 2 * freqs.len();
                let y = out.data();
                acc(*x, &mut |gx| {
                    for (e, gxe) in gx.iter_mut().enumerate() {
                        let base = e * per;
                        let mut s = 0.0;
                        for (k, &f) in freqs.iter().enumerate() {
                            let (sv, cv) = (y[base + 2 * k], y[base + 2 * k + 1]);
                            s += f * (g[base + 2 * k] * cv - g[base + 2 * k + 1] * sv);
                        }
                        *gxe += s;
                    }
                });
            }
            Op::SigmoidFocal {
                logits,
                targets,
                alpha,
                gamma,
            } => {
                let z = val(*logits).data();
                let g0 = g[0];
                acc(*logits, &mut |gz| {
                    for j in 0..gz.len() {
                        gz[j] += g0 * focal_dlogit(z[j], targets[j], *alpha, *gamma);
                    }
                });
            }
        }
    }
}

/// Focal loss of one logit against a target in [0, 1].
pub(crate) fn focal_value(z: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = super::sigmoid(z).clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    let pos = -alpha * (1.0 - p).powf(gamma) * p.ln();
    let neg = -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln();
    y * pos + (1.0 - y) * neg
}

fn focal_dlogit(z: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = super::sigmoid(z);
    if !(FOCAL_EPS..=1.0 - FOCAL_EPS).contains(&p) {
        return 0.0;
    }
    let q = 1.0 - p;
    let dpos = alpha * q.powf(gamma) * (gamma * p * p.ln() - q);
    let dneg = (1.0 - alpha) * p.powf(gamma) * (p - gamma * q * q.ln());
    y * dpos + (1.0 - y) * dneg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.3, -2.0, 5.0]));
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(p).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn detached_branch_gets_no_gradient() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        let d = tape.detach(p);
        let q = tape.mul(d, d).unwrap();
        let s = tape.sum(q).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(p).is_none());
        assert!(tape.grad(d).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![0.0, 1.0, -3.0]));
        let s = tape.sigmoid(z).unwrap();
        assert_eq!(tape.value(s).data()[0], 0.5);
        assert!((tape.value(s).data()[1] - 0.731_058_578_630_004_9).abs() < 1e-15);
        let r = tape.relu(z).unwrap();
        assert_eq!(tape.value(r).data()[2], 0.0);
    }

    #[test]
    fn domain_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let tiny = tape.constant(Tensor::vector(vec![1.0, 1e-13]));
        assert!(matches!(tape.div(a, tiny), Err(Error::Domain { .. })));
        let neg = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(neg), Err(Error::Domain { .. })));
        let big = tape.constant(Tensor::vector(vec![800.0]));
        assert!(matches!(tape.exp(big), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn scalar_broadcast_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let s = tape.leaf(Tensor::scalar(2.0));
        let p = tape.mul(s, a).unwrap();
        assert_eq!(tape.shape(p), &[2, 2]);
        let t = tape.sum(p).unwrap();
        tape.backward(t).unwrap();
        assert_eq!(tape.grad(s).unwrap(), &[10.0]);
        assert_eq!(tape.grad(a).unwrap(), &[2.0; 4]);
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(tape.add(a, b).is_err());
    }
}
