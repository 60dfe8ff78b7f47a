use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::tensor::gemm;
use crate::nn::{ParamId, ParameterStore, Tensor};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param { store: u64, index: usize },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Vec<f64>),
    ScaleRows(Var, Vec<f64>),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    Clamp(Var, f64, f64),
    LogSoftmax(Var, Vec<usize>),
    Softmax(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SumAll(Var),
    SumCols(Var),
    GatherCols(Var, Vec<usize>),
    RowNormalize(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode autodiff tape.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a single reverse sweep visits each node once. All values are treated
/// as `rows × cols` matrices.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<(u64, usize), Var>,
}

fn shape_str(t: &Tensor) -> String {
    format!("{}x{}", t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn rows(&self, v: Var) -> usize {
        self.nodes[v.0].value.rows()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.nodes[v.0].value.cols()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn mat(&self, rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::matrix(rows, cols, data).expect("internal shape bookkeeping")
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        let (r, c) = (value.rows(), value.cols());
        let value = self.mat(r, c, value.into_data());
        self.push(value, Op::Constant, false)
    }

    /// Trainable parameter; repeated requests for the same parameter share one node.
    pub fn param(&mut self, store: &ParameterStore, id: ParamId) -> Var {
        let key = (store.uid(), id.0);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let t = store.value(id);
        let value = self.mat(t.rows(), t.cols(), t.data().to_vec());
        let v = self.push(value, Op::Param { store: key.0, index: key.1 }, true);
        self.params.insert(key, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.rows() {
            return Err(Error::dim(
                "matmul",
                format!("lhs {} vs rhs {}", shape_str(ta), shape_str(tb)),
            ));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        let value = self.mat(m, n, out);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.cols() != tb.cols() {
            return Err(Error::dim(
                "matmul_t",
                format!("lhs {} vs rhs {} (transposed)", shape_str(ta), shape_str(tb)),
            ));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), true, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        let value = self.mat(m, n, out);
        Ok(self.push(value, Op::MatMulT(a, b), rg))
    }

    /// Adds a `1 × m` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        if tb.rows() != 1 || tb.cols() != tx.cols() {
            return Err(Error::dim(
                "add_bias",
                format!("input {} vs bias {}", shape_str(tx), shape_str(tb)),
            ));
        }
        let m = tx.cols();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        let value = self.mat(tx.rows(), m, out);
        Ok(self.push(value, Op::AddBias(x, b), rg))
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
        if !ta.same_shape(tb) {
            return Err(Error::dim(name, format!("lhs {} vs rhs {}", shape_str(ta), shape_str(tb))));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let rg = self.rg(a) || self.rg(b);
        let value = self.mat(ta.rows(), ta.cols(), out);
        Ok(self.push(value, op, rg))
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

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let tx = self.value(x);
        let out = tx.data().iter().map(|v| f(*v)).collect();
        let rg = self.rg(x);
        let value = self.mat(tx.rows(), tx.cols(), out);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x))
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if !tx.same_shape(c) {
            return Err(Error::dim(
                "mul_const",
                format!("input {} vs constant {}", shape_str(tx), shape_str(c)),
            ));
        }
        let out = tx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let rg = self.rg(x);
        let value = self.mat(tx.rows(), tx.cols(), out);
        Ok(self.push(value, Op::MulConst(x, c.data().to_vec()), rg))
    }

    /// Multiplies row `i` of `x` by `weights[i]`.
    pub fn scale_rows(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        let tx = self.value(x);
        if tx.rows() != weights.len() {
            return Err(Error::dim(
                "scale_rows",
                format!("input {} vs {} row weights", shape_str(tx), weights.len()),
            ));
        }
        let c = tx.cols();
        let mut out = tx.data().to_vec();
        for (row, w) in out.chunks_mut(c.max(1)).zip(weights) {
            row.iter_mut().for_each(|v| *v *= w);
        }
        let rg = self.rg(x);
        let value = self.mat(tx.rows(), c, out);
        Ok(self.push(value, Op::ScaleRows(x, weights.to_vec()), rg))
    }

    /// ReLU with subgradient 0 at 0.
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > 0.0 { v } else { 0.0 }, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the clamp is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    fn check_segments(&self, name: &'static str, x: Var, segments: &[usize]) -> Result<()> {
        let tx = self.value(x);
        if segments.contains(&0) || segments.iter().sum::<usize>() != tx.cols() {
            return Err(Error::dim(
                name,
                format!("segments {:?} do not tile {} columns", segments, tx.cols()),
            ));
        }
        if !tx.is_finite() {
            return Err(Error::Numeric(format!("{name}: non-finite logits")));
        }
        Ok(())
    }

    /// Row-wise log-softmax applied independently to consecutive column
    /// segments (one segment per categorical head).
    pub fn log_softmax(&mut self, x: Var, segments: &[usize]) -> Result<Var> {
        self.check_segments("log_softmax", x, segments)?;
        let tx = self.value(x);
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(tx.cols()) {
            let mut off = 0;
            for &s in segments {
                let seg = &mut row[off..off + s];
                let max = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + seg.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                seg.iter_mut().for_each(|v| *v -= lse);
                off += s;
            }
        }
        let rg = self.rg(x);
        let value = self.mat(tx.rows(), tx.cols(), out);
        Ok(self.push(value, Op::LogSoftmax(x, segments.to_vec()), rg))
    }

    /// Row-wise softmax per column segment, with max subtraction.
    pub fn softmax(&mut self, x: Var, segments: &[usize]) -> Result<Var> {
        self.check_segments("softmax", x, segments)?;
        let tx = self.value(x);
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(tx.cols()) {
            let mut off = 0;
            for &s in segments {
                softmax_in_place(&mut row[off..off + s]);
                off += s;
            }
        }
        let rg = self.rg(x);
        let value = self.mat(tx.rows(), tx.cols(), out);
        Ok(self.push(value, Op::Softmax(x, segments.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = self.rows(xs[0]);
        if let Some(bad) = xs.iter().find(|v| self.rows(**v) != rows) {
            return Err(Error::dim(
                "concat_cols",
                format!("{} rows vs {} rows", rows, self.rows(*bad)),
            ));
        }
        let cols: usize = xs.iter().map(|v| self.cols(*v)).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for v in xs {
                out.extend_from_slice(self.value(*v).row(r));
            }
        }
        let rg = xs.iter().any(|v| self.rg(*v));
        let value = self.mat(rows, cols, out);
        Ok(self.push(value, Op::ConcatCols(xs.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let cols = self.cols(xs[0]);
        if let Some(bad) = xs.iter().find(|v| self.cols(**v) != cols) {
            return Err(Error::dim(
                "concat_rows",
                format!("{} cols vs {} cols", cols, self.cols(*bad)),
            ));
        }
        let rows: usize = xs.iter().map(|v| self.rows(*v)).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for v in xs {
            out.extend_from_slice(self.value(*v).data());
        }
        let rg = xs.iter().any(|v| self.rg(*v));
        let value = self.mat(rows, cols, out);
        Ok(self.push(value, Op::ConcatRows(xs.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        if start + len > tx.cols() {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {}..{} of {}", start, start + len, shape_str(tx)),
            ));
        }
        let mut out = Vec::with_capacity(tx.rows() * len);
        for r in 0..tx.rows() {
            out.extend_from_slice(&tx.row(r)[start..start + len]);
        }
        let rg = self.rg(x);
        let value = self.mat(tx.rows(), len, out);
        Ok(self.push(value, Op::SliceCols(x, start), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        let value = self.mat(1, 1, vec![s]);
        self.push(value, Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Per-row sums, `n × 1`.
    pub fn sum_cols(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = (0..tx.rows()).map(|r| tx.row(r).iter().sum()).collect();
        let rg = self.rg(x);
        let value = self.mat(tx.rows(), 1, out);
        self.push(value, Op::SumCols(x), rg)
    }

    /// Picks `cols[r][j]` from each row `r`; every row must pick the same
    /// number of columns. Output is `n × picks`.
    pub fn gather_cols(&mut self, x: Var, cols: &[Vec<usize>]) -> Result<Var> {
        let tx = self.value(x);
        if cols.len() != tx.rows() {
            return Err(Error::dim(
                "gather_cols",
                format!("{} index rows for input {}", cols.len(), shape_str(tx)),
            ));
        }
        let picks = cols.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(tx.rows() * picks);
        for (r, row) in cols.iter().enumerate() {
            if row.len() != picks || row.iter().any(|&c| c >= tx.cols()) {
                return Err(Error::dim(
                    "gather_cols",
                    format!("row {r}: indices {:?} for {} columns", row, tx.cols()),
                ));
            }
            flat.extend(row.iter().map(|&c| r * tx.cols() + c));
        }
        let out = flat.iter().map(|&i| tx.data()[i]).collect();
        let rg = self.rg(x);
        let value = self.mat(tx.rows(), picks, out);
        Ok(self.push(value, Op::GatherCols(x, flat), rg))
    }

    /// Scales each row to unit L2 norm. Zero rows are a numeric error.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let mut norms = Vec::with_capacity(tx.rows());
        let mut out = tx.data().to_vec();
        for (r, row) in out.chunks_mut(tx.cols()).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(n > 0.0) || !n.is_finite() {
                return Err(Error::Numeric(format!("row_normalize: row {r} has norm {n}")));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(x);
        let value = self.mat(tx.rows(), tx.cols(), out);
        Ok(self.push(value, Op::RowNormalize(x, norms), rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Gradients are accumulated (added) into the matching entries of the
    /// given stores; parameters owned by stores not listed receive nothing.
    /// The tape is consumed.
    pub fn backward(self, loss: Var, stores: &mut [&mut ParameterStore]) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got {}",
                shape_str(lv)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, stores);
        }
        Ok(())
    }

    fn propagate(
        &self,
        node: &Node,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        stores: &mut [&mut ParameterStore],
    ) {
        let y = &node.value;
        match &node.op {
            Op::Constant => {}
            Op::Param { store, index } => {
                if let Some(s) = stores.iter_mut().find(|s| s.uid() == *store) {
                    s.accumulate_grad(*index, g);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.rg(*a) {
                    let buf = grad_buf(grads, *a, m * k);
                    gemm(m, n, k, g, false, tb.data(), true, buf, true);
                }
                if self.rg(*b) {
                    let buf = grad_buf(grads, *b, k * n);
                    gemm(k, m, n, ta.data(), true, g, false, buf, true);
                }
            }
            Op::MatMulT(a, b) => {
                // y = a bᵀ, a: m×k, b: n×k, g: m×n
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                if self.rg(*a) {
                    let buf = grad_buf(grads, *a, m * k);
                    gemm(m, n, k, g, false, tb.data(), false, buf, true);
                }
                if self.rg(*b) {
                    let buf = grad_buf(grads, *b, n * k);
                    gemm(n, m, k, g, true, ta.data(), false, buf, true);
                }
            }
            Op::AddBias(x, b) => {
                let cols = y.cols();
                if self.rg(*x) {
                    add_into(grad_buf(grads, *x, g.len()), g);
                }
                if self.rg(*b) {
                    let buf = grad_buf(grads, *b, cols);
                    for row in g.chunks(cols) {
                        add_into(buf, row);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.rg(*v) {
                        add_into(grad_buf(grads, *v, g.len()), g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    add_into(grad_buf(grads, *a, g.len()), g);
                }
                if self.rg(*b) {
                    let buf = grad_buf(grads, *b, g.len());
                    buf.iter_mut().zip(g).for_each(|(o, d)| *o -= d);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let buf = grad_buf(grads, *a, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * tb[i];
                    }
                }
                if self.rg(*b) {
                    let buf = grad_buf(grads, *b, g.len());
                    for i in 0..g.len() {
                        buf[i] += g[i] * ta[i];
                    }
                }
            }
            Op::Scale(x, s) => {
                let buf = grad_buf(grads, *x, g.len());
                buf.iter_mut().zip(g).for_each(|(o, d)| *o += d * s);
            }
            Op::AddScalar(x) => add_into(grad_buf(grads, *x, g.len()), g),
            Op::MulConst(x, c) => {
                let buf = grad_buf(grads, *x, g.len());
                for i in 0..g.len() {
                    buf[i] += g[i] * c[i];
                }
            }
            Op::ScaleRows(x, w) => {
                let cols = y.cols().max(1);
                let buf = grad_buf(grads, *x, g.len());
                for (r, (brow, grow)) in buf.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                    brow.iter_mut().zip(grow).for_each(|(o, d)| *o += d * w[r]);
                }
            }
            Op::Relu(x) => {
                let buf = grad_buf(grads, *x, g.len());
                for (i, yv) in y.data().iter().enumerate() {
                    if *yv > 0.0 {
                        buf[i] += g[i];
                    }
                }
            }
            Op::Sigmoid(x) => {
                let buf = grad_buf(grads, *x, g.len());
                for (i, yv) in y.data().iter().enumerate() {
                    buf[i] += g[i] * yv * (1.0 - yv);
                }
            }
            Op::Tanh(x) => {
                let buf = grad_buf(grads, *x, g.len());
                for (i, yv) in y.data().iter().enumerate() {
                    buf[i] += g[i] * (1.0 - yv * yv);
                }
            }
            Op::Exp(x) => {
                let buf = grad_buf(grads, *x, g.len());
                for (i, yv) in y.data().iter().enumerate() {
                    buf[i] += g[i] * yv;
                }
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let buf = grad_buf(grads, *x, g.len());
                for i in 0..g.len() {
                    buf[i] += 2.0 * g[i] * xv[i];
                }
            }
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x).data();
                let buf = grad_buf(grads, *x, g.len());
                for i in 0..g.len() {
                    if xv[i] >= *lo && xv[i] <= *hi {
                        buf[i] += g[i];
                    }
                }
            }
            Op::LogSoftmax(x, segments) => {
                let cols = y.cols();
                let buf = grad_buf(grads, *x, g.len());
                for ((brow, grow), yrow) in
                    buf.chunks_mut(cols).zip(g.chunks(cols)).zip(y.data().chunks(cols))
                {
                    let mut off = 0;
                    for &s in segments {
                        let gs: f64 = grow[off..off + s].iter().sum();
                        for j in off..off + s {
                            brow[j] += grow[j] - yrow[j].exp() * gs;
                        }
                        off += s;
                    }
                }
            }
            Op::Softmax(x, segments) => {
                let cols = y.cols();
                let buf = grad_buf(grads, *x, g.len());
                for ((brow, grow), yrow) in
                    buf.chunks_mut(cols).zip(g.chunks(cols)).zip(y.data().chunks(cols))
                {
                    let mut off = 0;
                    for &s in segments {
                        let dot: f64 = (off..off + s).map(|j| grow[j] * yrow[j]).sum();
                        for j in off..off + s {
                            brow[j] += yrow[j] * (grow[j] - dot);
                        }
                        off += s;
                    }
                }
            }
            Op::ConcatCols(xs) => {
                let cols = y.cols();
                let mut off = 0;
                for v in xs {
                    let c = self.cols(*v);
                    if self.rg(*v) {
                        let buf = grad_buf(grads, *v, y.rows() * c);
                        for (brow, grow) in buf.chunks_mut(c.max(1)).zip(g.chunks(cols)) {
                            add_into(brow, &grow[off..off + c]);
                        }
                    }
                    off += c;
                }
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for v in xs {
                    let n = self.value(*v).len();
                    if self.rg(*v) {
                        add_into(grad_buf(grads, *v, n), &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceCols(x, start) => {
                let xc = self.cols(*x);
                let len = y.cols();
                let buf = grad_buf(grads, *x, y.rows() * xc);
                for (brow, grow) in buf.chunks_mut(xc).zip(g.chunks(len.max(1))) {
                    add_into(&mut brow[*start..*start + len], grow);
                }
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                let buf = grad_buf(grads, *x, n);
                buf.iter_mut().for_each(|o| *o += g[0]);
            }
            Op::SumCols(x) => {
                let xc = self.cols(*x);
                let buf = grad_buf(grads, *x, y.rows() * xc);
                for (brow, gv) in buf.chunks_mut(xc.max(1)).zip(g) {
                    brow.iter_mut().for_each(|o| *o += gv);
                }
            }
            Op::GatherCols(x, flat) => {
                let n = self.value(*x).len();
                let buf = grad_buf(grads, *x, n);
                for (gv, &i) in g.iter().zip(flat) {
                    buf[i] += gv;
                }
            }
            Op::RowNormalize(x, norms) => {
                let cols = y.cols();
                let buf = grad_buf(grads, *x, g.len());
                for (((brow, grow), yrow), n) in buf
                    .chunks_mut(cols)
                    .zip(g.chunks(cols))
                    .zip(y.data().chunks(cols))
                    .zip(norms)
                {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for j in 0..cols {
                        brow[j] += (grow[j] - yrow[j] * dot) / n;
                    }
                }
            }
        }
    }
}

fn grad_buf(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(seg: &mut [f64]) {
    let max = seg.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in seg.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    seg.iter_mut().for_each(|v| *v /= total);
}
