use super::{gemm, ParamId, ParamStore, Tensor, TensorError};
use std::collections::HashMap;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBroadcast(Var, Var),
    MulBroadcast(Var, Var),
    Scale(Var, f64),
    Conv1d {
        x: Var,
        w: Var,
        cols: Vec<f64>,
        width: usize,
    },
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    LogSoftmax(Var),
    Relu(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MeanAxis1(Var),
    Concat(Vec<Var>),
    SliceLast {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    RowOuter(Var, Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Constant | Input | Param => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBroadcast(a, b)
            | MulBroadcast(a, b) | RowOuter(a, b) => vec![*a, *b],
            Conv1d { x, w, .. } => vec![*x, *w],
            Scale(a, _) | Softmax(a) | LogSoftmax(a) | Relu(a) | Sum(a) | Mean(a) | SumLast(a)
            | MeanAxis1(a) | Reshape(a) => vec![*a],
            LayerNorm { x, .. } | SliceLast { x, .. } => vec![*x],
            Gather { table, .. } => vec![*table],
            Concat(vs) => vs.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation for one backward pass.
///
/// The tape is rebuilt for every forward pass. Parameters enter through
/// [`Tape::param`]; free inputs whose gradient is wanted enter through
/// [`Tape::input`].
pub struct Tape {
    nodes: Vec<Node>,
    params_trainable: bool,
    param_vars: HashMap<ParamId, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl Tape {
    /// A tape on which parameters receive gradients (training).
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            params_trainable: true,
            param_vars: HashMap::new(),
        }
    }

    /// A tape on which parameters are treated as constants; only
    /// [`Tape::input`] leaves and their descendants carry gradients.
    pub fn frozen() -> Self {
        Tape {
            params_trainable: false,
            ..Self::new()
        }
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

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Input => true,
            Op::Param => self.params_trainable,
            other => other.parents().iter().any(|p| self.nodes[p.0].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var, TensorError> {
        self.push("constant", t, Op::Constant)
    }

    /// A leaf whose gradient is retained by [`Tape::backward`].
    pub fn input(&mut self, t: Tensor) -> Result<Var, TensorError> {
        self.push("input", t, Op::Input)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var, TensorError> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let v = self.push("param", store.value(id).clone(), Op::Param)?;
        self.param_vars.insert(id, v);
        Ok(v)
    }

    /// `[.., K] × [K, N] → [.., N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.shape().len() != 2 || ta.shape().is_empty() || ta.cols() != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, 0.0);
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push("add", v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let v = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push("mul", v, Op::Mul(a, b))
    }

    fn check_suffix(&self, name: &'static str, a: Var, b: Var) -> Result<(), TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(mismatch(name, ta, tb));
        }
        Ok(())
    }

    /// `a + b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_suffix("add_broadcast", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = tb.numel();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tb.data()[i % n])
            .collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add_broadcast", v, Op::AddBroadcast(a, b))
    }

    /// `a * b` where `b`'s shape is a trailing suffix of `a`'s.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.check_suffix("mul_broadcast", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = tb.numel();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * tb.data()[i % n])
            .collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul_broadcast", v, Op::MulBroadcast(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let v = self.value(a).map(|x| x * c);
        self.push("scale", v, Op::Scale(a, c))
    }

    /// Same-padded 1-D convolution: `x [B, L, Cin]` (or `[L, Cin]`) with
    /// `w [width, Cin, Cout]`; `width` must be odd.
    pub fn conv1d(&mut self, x: Var, w: Var) -> Result<Var, TensorError> {
        let (tx, tw) = (self.value(x), self.value(w));
        let ws = tw.shape();
        let (batch, len, cin, squeeze) = match *tx.shape() {
            [b, l, c] => (b, l, c, false),
            [l, c] => (1, l, c, true),
            _ => return Err(mismatch("conv1d", tx, tw)),
        };
        if ws.len() != 3 || ws[1] != cin || ws[0] % 2 == 0 {
            return Err(mismatch("conv1d", tx, tw));
        }
        let (width, cout) = (ws[0], ws[2]);
        let pad = width / 2;
        let kc = width * cin;
        let mut cols = vec![0.0; batch * len * kc];
        let xd = tx.data();
        for b in 0..batch {
            for l in 0..len {
                let row = &mut cols[(b * len + l) * kc..(b * len + l + 1) * kc];
                for k in 0..width {
                    let src = l as isize + k as isize - pad as isize;
                    if src < 0 || src >= len as isize {
                        continue;
                    }
                    let s = (b * len + src as usize) * cin;
                    row[k * cin..(k + 1) * cin].copy_from_slice(&xd[s..s + cin]);
                }
            }
        }
        let mut out = vec![0.0; batch * len * cout];
        gemm(batch * len, kc, cout, &cols, false, tw.data(), false, &mut out, 0.0);
        let shape = if squeeze {
            vec![len, cout]
        } else {
            vec![batch, len, cout]
        };
        let v = Tensor::new(shape, out)?;
        self.push("conv1d", v, Op::Conv1d { x, w, cols, width })
    }

    /// Normalizes each row over the last axis (no affine transform).
    pub fn layer_norm(&mut self, x: Var) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let (rows, cols) = (tx.rows(), tx.cols());
        let mut out = vec![0.0; tx.numel()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = tx.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let v = Tensor::new(tx.shape().to_vec(), out)?;
        self.push("layer_norm", v, Op::LayerNorm { x, inv_std })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = softmax_rows(self.value(x));
        self.push("softmax", v, Op::Softmax(x))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = log_softmax_rows(self.value(x));
        self.push("log_softmax", v, Op::LogSoftmax(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = self.value(x).map(|a| a.max(0.0));
        self.push("relu", v, Op::Relu(x))
    }

    /// Embedding lookup: rows of `table [V, E]` selected by `ids`, shaped `[ids.len(), E]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: t.shape().to_vec(),
            });
        }
        let (rows, e) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { index: i, rows });
            }
            out.extend_from_slice(t.row(i));
        }
        let v = Tensor::new(vec![ids.len(), e], out)?;
        self.push(
            "gather_rows",
            v,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let v = Tensor::scalar(self.value(x).sum());
        self.push("sum", v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let v = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push("mean", v, Op::Mean(x))
    }

    /// Sums the last axis away: `[.., K] → [..]`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.shape().is_empty() {
            return Err(TensorError::InvalidShape {
                op: "sum_last",
                shape: vec![],
            });
        }
        let data = (0..t.rows()).map(|r| t.row(r).iter().sum()).collect();
        let shape = t.shape()[..t.shape().len() - 1].to_vec();
        let v = Tensor::new(shape, data)?;
        self.push("sum_last", v, Op::SumLast(x))
    }

    /// Averages over the middle axis: `[B, L, C] → [B, C]`.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let [b, l, c] = *t.shape() else {
            return Err(TensorError::InvalidShape {
                op: "mean_axis1",
                shape: t.shape().to_vec(),
            });
        };
        let mut out = vec![0.0; b * c];
        for bi in 0..b {
            for li in 0..l {
                let row = t.row(bi * l + li);
                for (o, v) in out[bi * c..(bi + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for o in &mut out {
            *o /= l as f64;
        }
        let v = Tensor::new(vec![b, c], out)?;
        self.push("mean_axis1", v, Op::MeanAxis1(x))
    }

    /// Concatenates along the last axis; leading shapes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var, TensorError> {
        let first = self.value(xs[0]);
        let lead = first.shape()[..first.shape().len() - 1].to_vec();
        let rows = first.rows();
        let mut total = 0;
        for &x in xs {
            let t = self.value(x);
            if t.shape().is_empty() || t.shape()[..t.shape().len() - 1] != lead[..] {
                return Err(mismatch("concat", first, t));
            }
            total += t.cols();
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(r));
            }
        }
        let mut shape = lead;
        shape.push(total);
        let v = Tensor::new(shape, out)?;
        self.push("concat", v, Op::Concat(xs.to_vec()))
    }

    /// Columns `start..end` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, end: usize) -> Result<Var, TensorError> {
        let t = self.value(x);
        if start >= end || end > t.cols() || t.shape().is_empty() {
            return Err(TensorError::InvalidShape {
                op: "slice_last",
                shape: t.shape().to_vec(),
            });
        }
        let mut out = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            out.extend_from_slice(&t.row(r)[start..end]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = end - start;
        let v = Tensor::new(shape, out)?;
        self.push("slice_last", v, Op::SliceLast { x, start })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x))
    }

    /// Per-row outer product: `[N, K1] ⊗ [N, K2] → [N, K1·K2]` (row-major in `K1`).
    pub fn row_outer(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.rows() != tb.rows() {
            return Err(mismatch("row_outer", ta, tb));
        }
        let (n, k1, k2) = (ta.rows(), ta.cols(), tb.cols());
        let mut out = Vec::with_capacity(n * k1 * k2);
        for r in 0..n {
            for &x in ta.row(r) {
                out.extend(tb.row(r).iter().map(|y| x * y));
            }
        }
        let v = Tensor::new(vec![n, k1 * k2], out)?;
        self.push("row_outer", v, Op::RowOuter(a, b))
    }

    /// Reverse pass from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients, TensorError> {
        let root = self.value(out);
        if !root.shape().is_empty() {
            return Err(TensorError::NotScalar(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::scalar(1.0));
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let y = &node.value;
        match &node.op {
            Op::Constant | Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
                if self.wants(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, g.data(), false, tb.data(), true, &mut da, 0.0);
                    accumulate(grads, *a, ta.shape(), da);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g.data(), false, &mut db, 0.0);
                    accumulate(grads, *b, tb.shape(), db);
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, y.shape(), g.data().to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, y.shape(), g.data().to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, y.shape(), g.data().to_vec());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, y.shape(), g.data().iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(g, b)| g * b).collect();
                    accumulate(grads, *a, y.shape(), d);
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(g, a)| g * a).collect();
                    accumulate(grads, *b, y.shape(), d);
                }
            }
            Op::AddBroadcast(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, y.shape(), g.data().to_vec());
                }
                if self.wants(*b) {
                    let tb = self.value(*b);
                    let n = tb.numel();
                    let mut d = vec![0.0; n];
                    for (i, gv) in g.data().iter().enumerate() {
                        d[i % n] += gv;
                    }
                    accumulate(grads, *b, tb.shape(), d);
                }
            }
            Op::MulBroadcast(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let n = tb.numel();
                if self.wants(*a) {
                    let d = g
                        .data()
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * tb.data()[i % n])
                        .collect();
                    accumulate(grads, *a, ta.shape(), d);
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; n];
                    for (i, (gv, av)) in g.data().iter().zip(ta.data()).enumerate() {
                        d[i % n] += gv * av;
                    }
                    accumulate(grads, *b, tb.shape(), d);
                }
            }
            Op::Scale(a, c) => {
                accumulate(grads, *a, y.shape(), g.data().iter().map(|x| x * c).collect());
            }
            Op::Conv1d { x, w, cols, width } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (len, cin) = {
                    let s = tx.shape();
                    (s[s.len() - 2], s[s.len() - 1])
                };
                let batch = tx.numel() / (len * cin);
                let cout = tw.shape()[2];
                let kc = width * cin;
                let rows = batch * len;
                if self.wants(*w) {
                    let mut dw = vec![0.0; kc * cout];
                    gemm(kc, rows, cout, cols, true, g.data(), false, &mut dw, 0.0);
                    accumulate(grads, *w, tw.shape(), dw);
                }
                if self.wants(*x) {
                    let mut dcols = vec![0.0; rows * kc];
                    gemm(rows, cout, kc, g.data(), false, tw.data(), true, &mut dcols, 0.0);
                    let pad = width / 2;
                    let mut dx = vec![0.0; tx.numel()];
                    for b in 0..batch {
                        for l in 0..len {
                            let row = &dcols[(b * len + l) * kc..(b * len + l + 1) * kc];
                            for k in 0..*width {
                                let src = l as isize + k as isize - pad as isize;
                                if src < 0 || src >= len as isize {
                                    continue;
                                }
                                let s = (b * len + src as usize) * cin;
                                for (d, v) in dx[s..s + cin].iter_mut().zip(&row[k * cin..(k + 1) * cin]) {
                                    *d += v;
                                }
                            }
                        }
                    }
                    accumulate(grads, *x, tx.shape(), dx);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                let cols = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for (r, inv) in inv_std.iter().enumerate() {
                    let gy = g.row(r);
                    let yr = y.row(r);
                    let mean_g = gy.iter().sum::<f64>() / cols as f64;
                    let mean_gy = gy.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                    for c in 0..cols {
                        dx[r * cols + c] = inv * (gy[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                accumulate(grads, *x, y.shape(), dx);
            }
            Op::Softmax(x) => {
                let cols = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let (gy, yr) = (g.row(r), y.row(r));
                    let dot: f64 = gy.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        dx[r * cols + c] = yr[c] * (gy[c] - dot);
                    }
                }
                accumulate(grads, *x, y.shape(), dx);
            }
            Op::LogSoftmax(x) => {
                let cols = y.cols();
                let mut dx = vec![0.0; y.numel()];
                for r in 0..y.rows() {
                    let (gy, yr) = (g.row(r), y.row(r));
                    let total: f64 = gy.iter().sum();
                    for c in 0..cols {
                        dx[r * cols + c] = gy[c] - yr[c].exp() * total;
                    }
                }
                accumulate(grads, *x, y.shape(), dx);
            }
            Op::Relu(x) => {
                let tx = self.value(*x);
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(grads, *x, y.shape(), d);
            }
            Op::Gather { table, ids } => {
                let tt = self.value(*table);
                let e = tt.shape()[1];
                let mut d = vec![0.0; tt.numel()];
                for (r, &i) in ids.iter().enumerate() {
                    for (dv, gv) in d[i * e..(i + 1) * e].iter_mut().zip(g.row(r)) {
                        *dv += gv;
                    }
                }
                accumulate(grads, *table, tt.shape(), d);
            }
            Op::Sum(x) => {
                let tx = self.value(*x);
                accumulate(grads, *x, tx.shape(), vec![g.item(); tx.numel()]);
            }
            Op::Mean(x) => {
                let tx = self.value(*x);
                let n = tx.numel() as f64;
                accumulate(grads, *x, tx.shape(), vec![g.item() / n; tx.numel()]);
            }
            Op::SumLast(x) => {
                let tx = self.value(*x);
                let k = tx.cols();
                let d = (0..tx.numel()).map(|i| g.data()[i / k]).collect();
                accumulate(grads, *x, tx.shape(), d);
            }
            Op::MeanAxis1(x) => {
                let tx = self.value(*x);
                let [b, l, c] = *tx.shape() else { unreachable!() };
                let mut d = vec![0.0; tx.numel()];
                for bi in 0..b {
                    for li in 0..l {
                        for ci in 0..c {
                            d[(bi * l + li) * c + ci] = g.data()[bi * c + ci] / l as f64;
                        }
                    }
                }
                accumulate(grads, *x, tx.shape(), d);
            }
            Op::Concat(xs) => {
                let total = y.cols();
                let mut offset = 0;
                for &x in xs {
                    let tx = self.value(x);
                    let k = tx.cols();
                    if self.wants(x) {
                        let mut d = Vec::with_capacity(tx.numel());
                        for r in 0..y.rows() {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + k]);
                        }
                        accumulate(grads, x, tx.shape(), d);
                    }
                    offset += k;
                }
            }
            Op::SliceLast { x, start } => {
                let tx = self.value(*x);
                let (full, k) = (tx.cols(), y.cols());
                let mut d = vec![0.0; tx.numel()];
                for r in 0..y.rows() {
                    d[r * full + start..r * full + start + k].copy_from_slice(g.row(r));
                }
                accumulate(grads, *x, tx.shape(), d);
            }
            Op::Reshape(x) => {
                let tx = self.value(*x);
                accumulate(grads, *x, tx.shape(), g.data().to_vec());
            }
            Op::RowOuter(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (n, k1, k2) = (ta.rows(), ta.cols(), tb.cols());
                if self.wants(*a) {
                    let mut d = vec![0.0; n * k1];
                    for r in 0..n {
                        for i in 0..k1 {
                            d[r * k1 + i] = (0..k2)
                                .map(|j| g.data()[r * k1 * k2 + i * k2 + j] * tb.data()[r * k2 + j])
                                .sum();
                        }
                    }
                    accumulate(grads, *a, ta.shape(), d);
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; n * k2];
                    for r in 0..n {
                        for i in 0..k1 {
                            let av = ta.data()[r * k1 + i];
                            for j in 0..k2 {
                                d[r * k2 + j] += g.data()[r * k1 * k2 + i * k2 + j] * av;
                            }
                        }
                    }
                    accumulate(grads, *b, tb.shape(), d);
                }
            }
        }
    }

    pub(crate) fn param_vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.param_vars.iter().map(|(&id, &v)| (id, v))
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], data: Vec<f64>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(data) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), data).expect("gradient shape matches value"));
        }
    }
}

pub(crate) fn softmax_rows(t: &Tensor) -> Tensor {
    let cols = t.cols();
    let mut out = vec![0.0; t.numel()];
    for r in 0..t.rows() {
        let row = t.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = &mut out[r * cols..(r + 1) * cols];
        let mut z = 0.0;
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - max).exp();
            z += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= z;
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

pub(crate) fn log_softmax_rows(t: &Tensor) -> Tensor {
    let cols = t.cols();
    let mut out = vec![0.0; t.numel()];
    for r in 0..t.rows() {
        let row = t.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *o = v - lse;
        }
    }
    Tensor::new(t.shape().to_vec(), out).expect("same shape")
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros of `v`'s shape when nothing flowed into it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    /// Central finite differences of `f` at `x`, checked against the tape gradient.
    fn check_grad(x0: &Tensor, f: impl Fn(&mut Tape, Var) -> Var) -> f64 {
        let mut tape = Tape::new();
        let x = tape.input(x0.clone()).unwrap();
        let out = f(&mut tape, x);
        let grads = tape.backward(out).unwrap();
        let analytic = grads.wrt(&tape, x);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut t = Tape::new();
                let v = t.input(xp).unwrap();
                let o = f(&mut t, v);
                t.value(o).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            let rel = (fd - a).abs() / (fd.abs().max(a.abs()).max(1e-3));
            worst = worst.max(rel);
        }
        worst
    }

    /// Projects a tensor output to a scalar with fixed random weights so
    /// every output element contributes to the checked gradient.
    fn project(tape: &mut Tape, y: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random(tape.shape(y), &mut rng);
        let w = tape.constant(w).unwrap();
        let p = tape.mul(y, w).unwrap();
        tape.sum(p).unwrap()
    }

    #[test]
    fn softmax_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[4])).unwrap();
        let y = t.softmax(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = random(&[2, 7, 3], &mut rng);
        let mut w0 = Tensor::zeros(&[3, 3, 3]);
        for c in 0..3 {
            w0.data_mut()[(3 + c) * 3 + c] = 1.0;
        }
        let mut t = Tape::new();
        let x = t.constant(x0.clone()).unwrap();
        let w = t.constant(w0).unwrap();
        let y = t.conv1d(x, w).unwrap();
        assert_eq!(t.value(y), &x0);
    }

    #[test]
    fn layer_norm_constant_is_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::full(&[2, 5], 3.7)).unwrap();
        let y = t.layer_norm(x).unwrap();
        assert!(t.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut t = Tape::new();
        let x = t.input(Tensor::from_vec(vec![1.0, -2.0, 3.0])).unwrap();
        let s = t.sum(x).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn cross_entropy_gradient_at_uniform_logits() {
        let k = 5;
        let j = 2;
        let mut t = Tape::new();
        let z = t.input(Tensor::zeros(&[k])).unwrap();
        let lp = t.log_softmax(z).unwrap();
        let mut onehot = Tensor::zeros(&[k]);
        onehot.data_mut()[j] = -1.0;
        let target = t.constant(onehot).unwrap();
        let nll = t.mul(lp, target).unwrap();
        let loss = t.sum(nll).unwrap();
        let g = t.backward(loss).unwrap();
        for (i, &v) in g.get(z).unwrap().data().iter().enumerate() {
            let expect = 1.0 / k as f64 - if i == j { 1.0 } else { 0.0 };
            assert!((v - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn shape_errors_report_both_shapes() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = t.constant(Tensor::zeros(&[4, 2])).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![4, 2]
            }
        );
        assert!(t.add(a, b).is_err());
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::from_vec(vec![1e308, 1e308])).unwrap();
        assert_eq!(t.scale(a, 10.0).unwrap_err(), TensorError::NonFinite { op: "scale" });
    }

    #[test]
    fn backward_requires_scalar() {
        let mut t = Tape::new();
        let a = t.input(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(t.backward(a), Err(TensorError::NotScalar(_))));
    }

    #[test]
    fn finite_differences_per_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tol = 1e-5;
        let x23 = random(&[2, 3], &mut rng);
        let w34 = random(&[3, 4], &mut rng);
        let bl = random(&[2, 5, 3], &mut rng);
        let kw = random(&[3, 3, 4], &mut rng);
        let v3 = random(&[3], &mut rng);

        let cases: Vec<(&str, Tensor, Box<dyn Fn(&mut Tape, Var) -> Var>)> = vec![
            ("matmul_lhs", x23.clone(), Box::new({
                let w = w34.clone();
                move |t, x| { let w = t.constant(w.clone()).unwrap(); let y = t.matmul(x, w).unwrap(); project(t, y, 1) }
            })),
            ("matmul_rhs", w34.clone(), Box::new({
                let a = x23.clone();
                move |t, w| { let a = t.constant(a.clone()).unwrap(); let y = t.matmul(a, w).unwrap(); project(t, y, 2) }
            })),
            ("mul_self", x23.clone(), Box::new(|t, x| { let y = t.mul(x, x).unwrap(); project(t, y, 3) })),
            ("sub", x23.clone(), Box::new(|t, x| { let s = t.scale(x, 0.3).unwrap(); let y = t.sub(s, x).unwrap(); project(t, y, 4) })),
            ("add_broadcast", v3.clone(), Box::new({
                let a = bl.clone();
                move |t, b| { let a = t.constant(a.clone()).unwrap(); let y = t.add_broadcast(a, b).unwrap(); project(t, y, 5) }
            })),
            ("mul_broadcast_lhs", bl.clone(), Box::new({
                let b = v3.clone();
                move |t, a| { let b = t.constant(b.clone()).unwrap(); let y = t.mul_broadcast(a, b).unwrap(); project(t, y, 6) }
            })),
            ("mul_broadcast_rhs", v3.clone(), Box::new({
                let a = bl.clone();
                move |t, b| { let a = t.constant(a.clone()).unwrap(); let y = t.mul_broadcast(a, b).unwrap(); project(t, y, 7) }
            })),
            ("conv1d_x", bl.clone(), Box::new({
                let w = kw.clone();
                move |t, x| { let w = t.constant(w.clone()).unwrap(); let y = t.conv1d(x, w).unwrap(); project(t, y, 8) }
            })),
            ("conv1d_w", kw.clone(), Box::new({
                let x = bl.clone();
                move |t, w| { let x = t.constant(x.clone()).unwrap(); let y = t.conv1d(x, w).unwrap(); project(t, y, 9) }
            })),
            ("layer_norm", bl.clone(), Box::new(|t, x| { let y = t.layer_norm(x).unwrap(); project(t, y, 10) })),
            ("softmax", bl.clone(), Box::new(|t, x| { let y = t.softmax(x).unwrap(); project(t, y, 11) })),
            ("log_softmax", bl.clone(), Box::new(|t, x| { let y = t.log_softmax(x).unwrap(); project(t, y, 12) })),
            ("relu", bl.clone(), Box::new(|t, x| { let y = t.relu(x).unwrap(); project(t, y, 13) })),
            ("gather_rows", w34.clone(), Box::new(|t, x| { let y = t.gather_rows(x, &[2, 0, 2, 1]).unwrap(); project(t, y, 14) })),
            ("mean", bl.clone(), Box::new(|t, x| { let y = t.mul(x, x).unwrap(); t.mean(y).unwrap() })),
            ("sum_last", bl.clone(), Box::new(|t, x| { let y = t.sum_last(x).unwrap(); project(t, y, 15) })),
            ("mean_axis1", bl.clone(), Box::new(|t, x| { let y = t.mean_axis1(x).unwrap(); project(t, y, 16) })),
            ("concat", x23.clone(), Box::new(|t, x| { let s = t.scale(x, 2.0).unwrap(); let y = t.concat(&[x, s, x]).unwrap(); project(t, y, 17) })),
            ("slice_last", bl.clone(), Box::new(|t, x| { let y = t.slice_last(x, 1, 3).unwrap(); project(t, y, 18) })),
            ("reshape", bl.clone(), Box::new(|t, x| { let y = t.reshape(x, &[10, 3]).unwrap(); project(t, y, 19) })),
            ("row_outer", x23.clone(), Box::new(|t, x| { let s = t.softmax(x).unwrap(); let y = t.row_outer(x, s).unwrap(); project(t, y, 20) })),
        ];
        for (name, x0, f) in cases {
            let err = check_grad(&x0, |t, x| f(t, x));
            assert!(err < tol, "{name}: relative error {err}");
        }
    }

    #[test]
    fn backward_is_linear_in_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = random(&[3, 4], &mut rng);
        let grad_of = |which: u8| {
            let mut t = Tape::new();
            let x = t.input(x0.clone()).unwrap();
            let a = t.softmax(x).unwrap();
            let la = project(&mut t, a, 1);
            let b = t.relu(x).unwrap();
            let lb = project(&mut t, b, 2);
            let out = match which {
                0 => la,
                1 => lb,
                _ => t.add(la, lb).unwrap(),
            };
            t.backward(out).unwrap().wrt(&t, x)
        };
        let mut sum = grad_of(0);
        sum.add_assign(&grad_of(1));
        assert!(sum.max_abs_diff(&grad_of(2)) < 1e-14);
    }

    #[test]
    fn frozen_tape_skips_params() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[2, 2], 0.5));
        let mut t = Tape::frozen();
        let w = t.param(&store, id).unwrap();
        let x = t.input(Tensor::full(&[1, 2], 1.0)).unwrap();
        let y = t.matmul(x, w).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.backward(s).unwrap();
        assert!(g.get(w).is_none());
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0]);
    }
}
