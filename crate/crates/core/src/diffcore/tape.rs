//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Parameters
//! are read from a borrowed [`ParamStore`]; calling [`Tape::backward`] on a
//! scalar node returns the gradient of that node with respect to every
//! parameter it depends on.

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param(ParamId),
    MatMul { a: Var, b: Var, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    MeanRows(Var),
    SegmentMeanRows { a: Var, seg: usize },
    SumAll(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { a: Var, start: usize },
    TileRows { a: Var, times: usize },
    RepeatRows { a: Var, times: usize },
    GatherRows { a: Var, idx: Vec<usize> },
    SoftmaxRows(Var),
    LayerNorm(Var),
    LogSumExpCols(Var),
    Reshape(Var),
    Transpose(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Const => "const",
            Op::Param(_) => "param",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::MeanRows(_) => "mean_rows",
            Op::SegmentMeanRows { .. } => "segment_mean_rows",
            Op::SumAll(_) => "sum",
            Op::ConcatCols(_) => "concat_cols",
            Op::ConcatRows(_) => "concat_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::TileRows { .. } => "tile_rows",
            Op::RepeatRows { .. } => "repeat_rows",
            Op::GatherRows { .. } => "gather_rows",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::LayerNorm(_) => "layer_norm",
            Op::LogSumExpCols(_) => "logsumexp_cols",
            Op::Reshape(_) => "reshape",
            Op::Transpose(_) => "transpose",
        }
    }
}

struct Node {
    // `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records a computation graph for one forward pass.
pub struct Tape<'p> {
    store: &'p ParamStore,
    track_params: bool,
    nodes: Vec<Node>,
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape_err(what: &str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape(format!(
        "{what}: {}x{} vs {}x{}",
        a.rows(),
        a.cols(),
        b.rows(),
        b.cols()
    ))
}

impl<'p> Tape<'p> {
    /// Tape whose parameter leaves receive gradients.
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store,
            track_params: true,
            nodes: Vec::with_capacity(256),
        }
    }

    /// Tape that treats parameters as constants (no backward needed).
    pub fn inference(store: &'p ParamStore) -> Self {
        Self {
            store,
            track_params: false,
            nodes: Vec::with_capacity(256),
        }
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.value(v).shape()
    }

    /// Convenience: the value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.track_params,
        });
        Var(self.nodes.len() - 1)
    }

    /// `a · b`, or `a · bᵀ` when `transpose_b`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (kb, n) = if transpose_b {
            (tb.cols(), tb.rows())
        } else {
            (tb.rows(), tb.cols())
        };
        if k != kb {
            return Err(shape_err("matmul", ta, tb));
        }
        let mut out = Tensor::zeros(m, n);
        gemm(
            m,
            k,
            n,
            1.0,
            ta.data(),
            false,
            tb.data(),
            transpose_b,
            0.0,
            out.data_mut(),
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul { a, b, tb: transpose_b }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(what, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(ta.rows(), ta.cols(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err(what, ta, tr));
        }
        let cols = ta.cols();
        let r = tr.data();
        let data = ta.data().iter().enumerate().map(|(i, &x)| f(x, r[i % cols])).collect();
        let out = Tensor::new(ta.rows(), cols, data)?;
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(out, op, rg))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "add_row", |x, y| x + y, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, "mul_row", |x, y| x * y, Op::MulRow(a, row))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    /// Column means: `m x n -> 1 x n`, summed in row order.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rows() == 0 {
            return Err(Error::Contract("mean over zero rows".into()));
        }
        let out = segment_mean(ta, ta.rows());
        let rg = self.rg(a);
        Ok(self.push(out, Op::MeanRows(a), rg))
    }

    /// Means over consecutive blocks of `seg` rows: `(k·seg) x n -> k x n`.
    pub fn segment_mean_rows(&mut self, a: Var, seg: usize) -> Result<Var> {
        let ta = self.value(a);
        if seg == 0 || ta.rows() % seg != 0 {
            return Err(Error::Shape(format!(
                "segment {seg} does not divide {} rows",
                ta.rows()
            )));
        }
        let out = segment_mean(ta, seg);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SegmentMeanRows { a, seg }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut cols = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != rows {
                return Err(shape_err("concat_cols", self.value(parts[0]), t));
            }
            cols += t.cols();
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(rows, cols, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != cols {
                return Err(shape_err("concat_rows", self.value(parts[0]), t));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(rows, cols, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let ta = self.value(a);
        if start + len > ta.cols() {
            return Err(Error::Shape(format!(
                "slice {start}..{} of {} columns",
                start + len,
                ta.cols()
            )));
        }
        let out = Tensor::from_fn(ta.rows(), len, |r, c| ta.get(r, start + c));
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols { a, start }, rg))
    }

    /// Stacks `times` copies of `a` vertically.
    pub fn tile_rows(&mut self, a: Var, times: usize) -> Var {
        let ta = self.value(a);
        let mut data = Vec::with_capacity(ta.len() * times);
        for _ in 0..times {
            data.extend_from_slice(ta.data());
        }
        let out = Tensor::new(ta.rows() * times, ta.cols(), data).expect("tile shape");
        let rg = self.rg(a);
        self.push(out, Op::TileRows { a, times }, rg)
    }

    /// Repeats every row `times` times in place: row r lands at `r*times..(r+1)*times`.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let ta = self.value(a);
        let mut data = Vec::with_capacity(ta.len() * times);
        for r in 0..ta.rows() {
            for _ in 0..times {
                data.extend_from_slice(ta.row_slice(r));
            }
        }
        let out = Tensor::new(ta.rows() * times, ta.cols(), data).expect("repeat shape");
        let rg = self.rg(a);
        self.push(out, Op::RepeatRows { a, times }, rg)
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= ta.rows()) {
            return Err(Error::Shape(format!("gather index {bad} of {} rows", ta.rows())));
        }
        let mut data = Vec::with_capacity(idx.len() * ta.cols());
        for &i in idx {
            data.extend_from_slice(ta.row_slice(i));
        }
        let out = Tensor::new(idx.len(), ta.cols(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::GatherRows { a, idx: idx.to_vec() }, rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let mut out = ta.clone();
        let cols = ta.cols();
        for r in 0..ta.rows() {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Per-row standardisation `(x - mean) / sqrt(var + 1e-5)` without affine terms.
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut out = ta.clone();
        for r in 0..ta.rows() {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let (mean, inv) = row_stats(row);
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm(a), rg)
    }

    /// Row-wise `log Σ_c exp(a[r, c])`: `m x k -> m x 1`.
    pub fn logsumexp_cols(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = Tensor::from_fn(ta.rows(), 1, |r, _| logsumexp(ta.row_slice(r)));
        let rg = self.rg(a);
        self.push(out, Op::LogSumExpCols(a), rg)
    }

    /// Same data viewed as `rows x cols` (row-major order preserved).
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let data = self.value(a).data().to_vec();
        let out = Tensor::new(rows, cols, data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// First node whose value contains a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| n.value.as_ref().is_some_and(|t| !t.is_finite()))
            .map(|(i, n)| (i, n.op.name()))
    }

    /// Gradients of the scalar `loss` with respect to all parameters.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            let [r, c] = self.shape(loss);
            return Err(Error::Contract(format!("backward needs a scalar loss, got {r}x{c}")));
        }
        if let Some((node, op)) = self.first_non_finite() {
            return Err(Error::NonFinite { node, op });
        }
        let mut out = Gradients::empty(self.store.len());
        if !self.rg(loss) {
            return Ok(out);
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(i, &node.op, g, &mut grads, &mut out);
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => t.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, i: usize, op: &Op, g: Tensor, grads: &mut [Option<Tensor>], out: &mut Gradients) {
        let y = || self.value(Var(i));
        match op {
            Op::Const => {}
            Op::Param(id) => out.add(*id, &g),
            Op::MatMul { a, b, tb } => {
                let (ta, tbv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), g.cols());
                if self.rg(*a) {
                    // dA = G · op(B)ᵀ
                    let mut ga = Tensor::zeros(m, k);
                    gemm(m, n, k, 1.0, g.data(), false, tbv.data(), !tb, 0.0, ga.data_mut());
                    self.acc(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros(tbv.rows(), tbv.cols());
                    if *tb {
                        // B is n x k: dB = Gᵀ · A
                        gemm(n, m, k, 1.0, g.data(), true, ta.data(), false, 0.0, gb.data_mut());
                    } else {
                        gemm(k, m, n, 1.0, ta.data(), true, g.data(), false, 0.0, gb.data_mut());
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *b, g.clone());
                self.acc(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *b, g.map(|v| -v));
                self.acc(grads, *a, g);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.acc(grads, *a, zip_map(&g, tb, |gv, bv| gv * bv));
                }
                if self.rg(*b) {
                    self.acc(grads, *b, zip_map(&g, ta, |gv, av| gv * av));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    self.acc(grads, *a, zip_map(&g, tb, |gv, bv| gv / bv));
                }
                if self.rg(*b) {
                    let mut gb = zip_map(&g, ta, |gv, av| gv * av);
                    for (v, bv) in gb.data_mut().iter_mut().zip(tb.data()) {
                        *v = -*v / (bv * bv);
                    }
                    self.acc(grads, *b, gb);
                }
            }
            Op::AddRow(a, row) => {
                if self.rg(*row) {
                    self.acc(grads, *row, col_sums(&g));
                }
                self.acc(grads, *a, g);
            }
            Op::MulRow(a, row) => {
                let (ta, tr) = (self.value(*a), self.value(*row));
                let cols = ta.cols();
                if self.rg(*row) {
                    let mut gr = Tensor::zeros(1, cols);
                    for (idx, (&gv, &av)) in g.data().iter().zip(ta.data()).enumerate() {
                        gr.data_mut()[idx % cols] += gv * av;
                    }
                    self.acc(grads, *row, gr);
                }
                if self.rg(*a) {
                    let mut ga = g;
                    for (idx, v) in ga.data_mut().iter_mut().enumerate() {
                        *v *= tr.data()[idx % cols];
                    }
                    self.acc(grads, *a, ga);
                }
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.acc(grads, *a, g.map(|v| v * c));
            }
            Op::AddScalar(a) => self.acc(grads, *a, g),
            Op::Relu(a) => {
                let ga = zip_map(&g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                self.acc(grads, *a, ga);
            }
            Op::Sigmoid(a) => {
                let ga = zip_map(&g, y(), |gv, s| gv * s * (1.0 - s));
                self.acc(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let ga = zip_map(&g, self.value(*a), |gv, x| gv * sigmoid(x));
                self.acc(grads, *a, ga);
            }
            Op::Exp(a) => {
                let ga = zip_map(&g, y(), |gv, e| gv * e);
                self.acc(grads, *a, ga);
            }
            Op::Log(a) => {
                let ga = zip_map(&g, self.value(*a), |gv, x| gv / x);
                self.acc(grads, *a, ga);
            }
            Op::Square(a) => {
                let ga = zip_map(&g, self.value(*a), |gv, x| 2.0 * gv * x);
                self.acc(grads, *a, ga);
            }
            Op::MeanRows(a) => {
                let ta = self.value(*a);
                self.acc(grads, *a, segment_mean_grad(&g, ta.rows(), ta.rows()));
            }
            Op::SegmentMeanRows { a, seg } => {
                let ta = self.value(*a);
                self.acc(grads, *a, segment_mean_grad(&g, ta.rows(), *seg));
            }
            Op::SumAll(a) => {
                let ta = self.value(*a);
                let gv = g.data()[0];
                self.acc(grads, *a, Tensor::filled(ta.rows(), ta.cols(), gv));
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let w = tp.cols();
                    if self.rg(p) {
                        let gp = Tensor::from_fn(tp.rows(), w, |r, c| g.get(r, start + c));
                        self.acc(grads, p, gp);
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let len = tp.len();
                    if self.rg(p) {
                        let gp = Tensor::new(tp.rows(), tp.cols(), g.data()[offset..offset + len].to_vec())
                            .expect("concat_rows grad");
                        self.acc(grads, p, gp);
                    }
                    offset += len;
                }
            }
            Op::SliceCols { a, start } => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..g.rows() {
                    for c in 0..g.cols() {
                        ga.set(r, start + c, g.get(r, c));
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::TileRows { a, times } => {
                let ta = self.value(*a);
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for t in 0..*times {
                    let chunk = &g.data()[t * ta.len()..(t + 1) * ta.len()];
                    for (x, y) in ga.data_mut().iter_mut().zip(chunk) {
                        *x += y;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::RepeatRows { a, times } => {
                let ta = self.value(*a);
                let cols = ta.cols();
                let mut ga = Tensor::zeros(ta.rows(), cols);
                for r in 0..ta.rows() {
                    let dst = &mut ga.data_mut()[r * cols..(r + 1) * cols];
                    for t in 0..*times {
                        for (x, y) in dst.iter_mut().zip(g.row_slice(r * times + t)) {
                            *x += y;
                        }
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::GatherRows { a, idx } => {
                let ta = self.value(*a);
                let cols = ta.cols();
                let mut ga = Tensor::zeros(ta.rows(), cols);
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut ga.data_mut()[src * cols..(src + 1) * cols];
                    for (x, y) in dst.iter_mut().zip(g.row_slice(r)) {
                        *x += y;
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let s = y();
                let cols = s.cols();
                let mut ga = Tensor::zeros(s.rows(), cols);
                for r in 0..s.rows() {
                    let (sr, gr) = (s.row_slice(r), g.row_slice(r));
                    let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        ga.set(r, c, sr[c] * (gr[c] - dot));
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LayerNorm(a) => {
                let ta = self.value(*a);
                let yv = y();
                let cols = ta.cols();
                let n = cols as f64;
                let mut ga = Tensor::zeros(ta.rows(), cols);
                for r in 0..ta.rows() {
                    let (_, inv) = row_stats(ta.row_slice(r));
                    let (yr, gr) = (yv.row_slice(r), g.row_slice(r));
                    let g_mean: f64 = gr.iter().sum::<f64>() / n;
                    let gy_mean: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for c in 0..cols {
                        ga.set(r, c, inv * (gr[c] - g_mean - yr[c] * gy_mean));
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::LogSumExpCols(a) => {
                let ta = self.value(*a);
                let yv = y();
                let mut ga = Tensor::zeros(ta.rows(), ta.cols());
                for r in 0..ta.rows() {
                    let (lse, gv) = (yv.get(r, 0), g.get(r, 0));
                    for c in 0..ta.cols() {
                        ga.set(r, c, gv * (ta.get(r, c) - lse).exp());
                    }
                }
                self.acc(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let ta = self.value(*a);
                let ga = Tensor::new(ta.rows(), ta.cols(), g.into_data()).expect("reshape grad");
                self.acc(grads, *a, ga);
            }
            Op::Transpose(a) => self.acc(grads, *a, g.transpose()),
        }
    }
}

/// Gradient of `loss` written into the store's gradient slots (added to
/// whatever they already hold).
pub fn grad(tape: &Tape<'_>, loss: Var, store: &mut ParamStore) -> Result<()> {
    let g = tape.backward(loss)?;
    store.accumulate(&g, 1.0);
    Ok(())
}

/// `ln Σ exp(x)` with the maximum factored out.
pub fn logsumexp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + LN_EPS).sqrt())
}

fn zip_map(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(g.rows(), g.cols(), data).expect("zip_map shape")
}

fn col_sums(g: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.data_mut().iter_mut().zip(g.row_slice(r)) {
            *o += v;
        }
    }
    out
}

fn segment_mean(t: &Tensor, seg: usize) -> Tensor {
    let cols = t.cols();
    let k = t.rows() / seg;
    let mut out = Tensor::zeros(k, cols);
    let inv = 1.0 / seg as f64;
    for s in 0..k {
        let dst = &mut out.data_mut()[s * cols..(s + 1) * cols];
        for r in s * seg..(s + 1) * seg {
            for (o, v) in dst.iter_mut().zip(t.row_slice(r)) {
                *o += v;
            }
        }
        dst.iter_mut().for_each(|v| *v *= inv);
    }
    out
}

fn segment_mean_grad(g: &Tensor, rows: usize, seg: usize) -> Tensor {
    let cols = g.cols();
    let inv = 1.0 / seg as f64;
    Tensor::from_fn(rows, cols, |r, c| g.get(r / seg, c) * inv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values.iter().map(|(n, t)| s.add(*n, t.clone())).collect();
        (s, ids)
    }

    #[test]
    fn square_derivative() {
        let (mut store, ids) = store_with(&[("w", Tensor::scalar(3.0))]);
        let tape_store = store.clone();
        let mut tape = Tape::new(&tape_store);
        let w = tape.param(ids[0]);
        let y = tape.square(w);
        grad(&tape, y, &mut store).unwrap();
        assert_eq!(store.grad(ids[0]).item().unwrap(), 6.0);
    }

    #[test]
    fn softplus_derivative_at_zero() {
        let (store, ids) = store_with(&[("w", Tensor::scalar(0.0))]);
        let mut tape = Tape::new(&store);
        let w = tape.param(ids[0]);
        let y = tape.softplus(w);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(ids[0]).unwrap().item().unwrap(), 0.5);
    }

    #[test]
    fn unused_parameter_has_no_gradient() {
        let (mut store, ids) = store_with(&[("a", Tensor::scalar(2.0)), ("b", Tensor::scalar(5.0))]);
        let s2 = store.clone();
        let mut tape = Tape::new(&s2);
        let a = tape.param(ids[0]);
        let y = tape.exp(a);
        grad(&tape, y, &mut store).unwrap();
        assert_eq!(store.grad(ids[1]).item().unwrap(), 0.0);
        assert!((store.grad(ids[0]).item().unwrap() - 2f64.exp()).abs() < 1e-12);
    }

    #[test]
    fn non_scalar_loss_is_contract_violation() {
        let (store, ids) = store_with(&[("w", Tensor::zeros(2, 2))]);
        let mut tape = Tape::new(&store);
        let w = tape.param(ids[0]);
        let y = tape.relu(w);
        assert!(matches!(tape.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn nan_is_reported_with_node() {
        let (store, ids) = store_with(&[("w", Tensor::scalar(-1.0))]);
        let mut tape = Tape::new(&store);
        let w = tape.param(ids[0]);
        let y = tape.log(w);
        let s = tape.sum(y);
        match tape.backward(s) {
            Err(Error::NonFinite { node, op }) => {
                assert_eq!(node, 1);
                assert_eq!(op, "log");
            }
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let a = tape.constant(Tensor::zeros(2, 3));
        let b = tape.constant(Tensor::zeros(2, 3));
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.add(a, b).is_ok());
        let c = tape.constant(Tensor::zeros(3, 2));
        assert!(tape.add(a, c).is_err());
    }

    #[test]
    fn logsumexp_is_stable() {
        assert!((logsumexp(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(logsumexp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }
}
