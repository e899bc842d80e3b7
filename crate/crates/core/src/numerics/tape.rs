//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Nodes are appended in creation order, so the node index is already a
//! topological order; `backward` walks it in reverse and visits each node once.
//!
//! Several operations are *segmented*: a stack of `B` sequences of length `T`
//! is stored as a `(B·T)×D` matrix and pairwise token operations produce a
//! `(B·T)×T` matrix whose row `r` only refers to tokens of sequence `r / T`.
//! A single sequence is the special case `T = N`.

use crate::error::{Error, Result};
use crate::numerics::tensor::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use crate::numerics::{stable, Tensor};

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    SegMatMulNT { a: Var, b: Var, seg: usize },
    SegMatMul { a: Var, b: Var, seg: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, Var),
    MulRows(Var, Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    L2NormalizeRows { a: Var, norms: Vec<f64> },
    GatherRows { a: Var, idx: Vec<usize> },
    ScatterRows { a: Var, idx: Vec<usize> },
    GatherElems { a: Var, idx: Vec<(usize, usize)> },
    TopKRenorm { a: Var, sel: Vec<Vec<usize>> },
    SqDistSeg { u: Var, v: Var, seg: usize },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
    Sum(Var),
    SumN(Vec<Var>),
    MeanRows(Var),
    LogSumExpRows { a: Var, causal: bool },
    ConcatCols(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients returned by [`Graph::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` when `v` does not influence the loss
    /// or was created as a constant.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient w.r.t. `v`, zero-filled when absent.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

/// Operation tape. Build the forward pass with the op methods, then call [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mat_dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn shape_err(&self, what: &str, a: Var, b: Var) -> Error {
        Error::Dimension(format!(
            "{what}: {:?} vs {:?}",
            self.value(a).shape(),
            self.value(b).shape()
        ))
    }

    /// `a · b`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = mat_dims(self.value(a));
        let (k2, n) = mat_dims(self.value(b));
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = mat_dims(self.value(a));
        let (n, k2) = mat_dims(self.value(b));
        if k != k2 {
            return Err(self.shape_err("matmul_nt", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), &[a, b]))
    }

    /// Per-segment `a_s · b_sᵀ`, producing a `(B·T)×T` matrix.
    pub fn seg_matmul_nt(&mut self, a: Var, b: Var, seg: usize) -> Result<Var> {
        let (r, k) = mat_dims(self.value(a));
        let (r2, k2) = mat_dims(self.value(b));
        if r != r2 || k != k2 || seg == 0 || r % seg != 0 {
            return Err(self.shape_err("seg_matmul_nt", a, b));
        }
        let mut out = vec![0.0; r * seg];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for s in 0..r / seg {
            let o = s * seg;
            gemm_nt(
                &ad[o * k..(o + seg) * k],
                &bd[o * k..(o + seg) * k],
                &mut out[o * seg..(o + seg) * seg],
                seg,
                k,
                seg,
            );
        }
        Ok(self.push(
            Tensor::new(vec![r, seg], out)?,
            Op::SegMatMulNT { a, b, seg },
            &[a, b],
        ))
    }

    /// Per-segment `a_s · b_s` with `a` of shape `(B·T)×T` and `b` of shape `(B·T)×n`.
    pub fn seg_matmul(&mut self, a: Var, b: Var, seg: usize) -> Result<Var> {
        let (r, t) = mat_dims(self.value(a));
        let (r2, n) = mat_dims(self.value(b));
        if r != r2 || t != seg || seg == 0 || r % seg != 0 {
            return Err(self.shape_err("seg_matmul", a, b));
        }
        let mut out = vec![0.0; r * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for s in 0..r / seg {
            let o = s * seg;
            gemm_nn(
                &ad[o * seg..(o + seg) * seg],
                &bd[o * n..(o + seg) * n],
                &mut out[o * n..(o + seg) * n],
                seg,
                seg,
                n,
            );
        }
        Ok(self.push(
            Tensor::new(vec![r, n], out)?,
            Op::SegMatMul { a, b, seg },
            &[a, b],
        ))
    }

    fn zip(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err("elementwise", a, b));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(bias).numel() != n {
            return Err(self.shape_err("add_bias", a, bias));
        }
        let mut t = self.value(a).clone();
        let bd = self.value(bias).data().to_vec();
        for i in 0..t.rows() {
            for (x, b) in t.row_mut(i).iter_mut().zip(&bd) {
                *x += b;
            }
        }
        Ok(self.push(t, Op::AddBias(a, bias), &[a, bias]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).scale(c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    /// Divides every entry of `a` by the single-entry tensor `s`.
    pub fn div_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::Dimension("div_scalar expects a single-entry divisor".into()));
        }
        let d = self.value(s).data()[0];
        let t = self.value(a).scale(1.0 / d);
        Ok(self.push(t, Op::DivScalar(a, s), &[a, s]))
    }

    /// Scales row `i` of `a` by `w[i]`.
    pub fn mul_rows(&mut self, a: Var, w: Var) -> Result<Var> {
        let m = self.value(a).rows();
        if self.value(w).numel() != m {
            return Err(self.shape_err("mul_rows", a, w));
        }
        let mut t = self.value(a).clone();
        let wd = self.value(w).data().to_vec();
        for (i, wi) in wd.iter().enumerate() {
            for x in t.row_mut(i) {
                *x *= wi;
            }
        }
        Ok(self.push(t, Op::MulRows(a, w), &[a, w]))
    }

    /// `x · sigmoid(x)`
    pub fn silu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x * sigmoid(x));
        self.push(t, Op::Silu(a), &[a])
    }

    /// Row softmax. With `causal`, row `r` keeps only columns `j <= r % cols`,
    /// which is the lower-triangular mask for both single and segmented layouts.
    pub fn softmax(&mut self, a: Var, causal: bool) -> Var {
        let mut t = self.value(a).clone();
        let c = t.cols();
        for r in 0..t.rows() {
            let row = t.row_mut(r);
            if causal {
                for v in row.iter_mut().skip(r % c + 1) {
                    *v = f64::NEG_INFINITY;
                }
            }
            stable::softmax_in_place(row);
        }
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Row layer normalization with elementwise gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (m, n) = mat_dims(self.value(x));
        if self.value(gain).numel() != n || self.value(bias).numel() != n {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        let xv = self.value(x);
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = xv.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[i * n + j] = h;
                out[i * n + j] = h * g[j] + b[j];
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            &[x, gain, bias],
        ))
    }

    /// Scales each row to unit L2 norm; zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        let mut norms = Vec::with_capacity(t.rows());
        for i in 0..t.rows() {
            let row = t.row_mut(i);
            let nrm = dot(row, row).sqrt();
            norms.push(nrm);
            if nrm > 0.0 {
                row.iter_mut().for_each(|v| *v /= nrm);
            }
        }
        self.push(t, Op::L2NormalizeRows { a, norms }, &[a])
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let m = self.value(a).rows();
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Range(format!("row {bad} of {m}")));
        }
        let t = self.value(a).select_rows(idx);
        Ok(self.push(t, Op::GatherRows { a, idx: idx.to_vec() }, &[a]))
    }

    /// Places row `m` of `a` at row `idx[m]` of a zero `rows×n` matrix, accumulating duplicates.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let (m, n) = mat_dims(self.value(a));
        if idx.len() != m {
            return Err(Error::Dimension(format!("{} indices for {m} rows", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Range(format!("row {bad} of {rows}")));
        }
        let mut t = Tensor::zeros(&[rows, n]);
        for (k, &i) in idx.iter().enumerate() {
            let src = self.value(a).row(k).to_vec();
            axpy(1.0, &src, t.row_mut(i));
        }
        Ok(self.push(t, Op::ScatterRows { a, idx: idx.to_vec() }, &[a]))
    }

    /// Column vector of selected `(row, col)` entries.
    pub fn gather_elems(&mut self, a: Var, idx: &[(usize, usize)]) -> Result<Var> {
        let (m, n) = mat_dims(self.value(a));
        if let Some(&(i, j)) = idx.iter().find(|&&(i, j)| i >= m || j >= n) {
            return Err(Error::Range(format!("entry ({i},{j}) of {m}x{n}")));
        }
        let data = idx.iter().map(|&(i, j)| self.value(a).at(i, j)).collect();
        let t = Tensor::new(vec![idx.len(), 1], data)?;
        Ok(self.push(t, Op::GatherElems { a, idx: idx.to_vec() }, &[a]))
    }

    /// For each row `i`, the entries at `sel[i]` renormalized to sum to one.
    /// All rows must select the same number of entries.
    pub fn topk_renorm(&mut self, a: Var, sel: Vec<Vec<usize>>) -> Result<Var> {
        let (m, n) = mat_dims(self.value(a));
        if sel.len() != m {
            return Err(Error::Dimension(format!("{} selections for {m} rows", sel.len())));
        }
        let k = sel.first().map_or(0, Vec::len);
        if sel.iter().any(|s| s.len() != k || s.iter().any(|&j| j >= n)) || k == 0 {
            return Err(Error::Dimension("ragged or out-of-range selection".into()));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(m * k);
        for (i, s) in sel.iter().enumerate() {
            let z: f64 = s.iter().map(|&j| av.at(i, j)).sum();
            if !(z > 0.0) {
                return Err(Error::Validation(format!("row {i} selected mass is {z}")));
            }
            out.extend(s.iter().map(|&j| av.at(i, j) / z));
        }
        let t = Tensor::new(vec![m, k], out)?;
        Ok(self.push(t, Op::TopKRenorm { a, sel }, &[a]))
    }

    /// Per-segment squared distances `‖u_r − v_{s·T+j}‖²`, shape `(B·T)×T`.
    pub fn sq_dist_seg(&mut self, u: Var, v: Var, seg: usize) -> Result<Var> {
        let (r, d) = mat_dims(self.value(u));
        let (r2, d2) = mat_dims(self.value(v));
        if r != r2 || d != d2 || seg == 0 || r % seg != 0 {
            return Err(self.shape_err("sq_dist_seg", u, v));
        }
        let (ud, vd) = (self.value(u).data(), self.value(v).data());
        let mut out = vec![0.0; r * seg];
        for row in 0..r {
            let base = (row / seg) * seg;
            let ur = &ud[row * d..(row + 1) * d];
            for j in 0..seg {
                let vr = &vd[(base + j) * d..(base + j + 1) * d];
                out[row * seg + j] = ur.iter().zip(vr).map(|(a, b)| (a - b) * (a - b)).sum();
            }
        }
        Ok(self.push(
            Tensor::new(vec![r, seg], out)?,
            Op::SqDistSeg { u, v, seg },
            &[u, v],
        ))
    }

    /// Mean softmax cross-entropy of `logits` rows against integer targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = mat_dims(self.value(logits));
        if targets.len() != m || m == 0 {
            return Err(Error::Dimension(format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::Range(format!("target {bad} of {n} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &mut probs[i * n..(i + 1) * n];
            let lse = stable::logsumexp(row);
            loss += lse - row[t];
            stable::softmax_in_place(row);
        }
        let t = Tensor::scalar(loss / m as f64);
        Ok(self.push(
            t,
            Op::CrossEntropy { logits, targets: targets.to_vec(), probs },
            &[logits],
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        self.push(t, Op::Sum(a), &[a])
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn sum_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::EmptyInput("sum_n of nothing".into()))?;
        let mut t = self.value(first).clone();
        for &x in &xs[1..] {
            if self.value(x).shape() != t.shape() {
                return Err(self.shape_err("sum_n", first, x));
            }
            axpy(1.0, self.value(x).data(), t.data_mut());
        }
        Ok(self.push(t, Op::SumN(xs.to_vec()), xs))
    }

    /// Column means as a `1×n` row.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = mat_dims(self.value(a));
        let mut out = vec![0.0; n];
        for i in 0..m {
            axpy(1.0 / m as f64, self.value(a).row(i), &mut out);
        }
        let t = Tensor::new(vec![1, n], out).expect("1xn");
        self.push(t, Op::MeanRows(a), &[a])
    }

    /// Row log-sum-exp as an `m×1` column, honouring the same causal mask as [`Graph::softmax`].
    pub fn logsumexp_rows(&mut self, a: Var, causal: bool) -> Var {
        let t = self.value(a);
        let c = t.cols();
        let data = (0..t.rows())
            .map(|r| {
                let row = t.row(r);
                stable::logsumexp(if causal { &row[..=r % c] } else { row })
            })
            .collect();
        let t = Tensor::new(vec![t.rows(), 1], data).expect("column");
        self.push(t, Op::LogSumExpRows { a, causal }, &[a])
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::EmptyInput("concat of nothing".into()))?;
        let m = self.value(first).rows();
        if xs.iter().any(|&x| self.value(x).rows() != m) {
            return Err(Error::Dimension("concat_cols row mismatch".into()));
        }
        let widths: Vec<usize> = xs.iter().map(|&x| self.value(x).cols()).collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for &x in xs {
                out.extend_from_slice(self.value(x).row(i));
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::ConcatCols(xs.to_vec()), xs))
    }

    /// Reverse pass from a single-entry `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
            f(slot.data_mut());
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = mat_dims(val(a));
                let n = val(b).cols();
                acc(a, &mut |da| gemm_nt(gd, val(b).data(), da, m, n, k));
                acc(b, &mut |db| gemm_tn(val(a).data(), gd, db, k, m, n));
            }
            &Op::MatMulNT(a, b) => {
                let (m, k) = mat_dims(val(a));
                let n = val(b).rows();
                acc(a, &mut |da| gemm_nn(gd, val(b).data(), da, m, n, k));
                acc(b, &mut |db| gemm_tn(gd, val(a).data(), db, n, m, k));
            }
            &Op::SegMatMulNT { a, b, seg } => {
                let (r, k) = mat_dims(val(a));
                for s in 0..r / seg {
                    let o = s * seg;
                    let gs = &gd[o * seg..(o + seg) * seg];
                    acc(a, &mut |da| {
                        gemm_nn(gs, &val(b).data()[o * k..(o + seg) * k], &mut da[o * k..(o + seg) * k], seg, seg, k)
                    });
                    acc(b, &mut |db| {
                        gemm_tn(gs, &val(a).data()[o * k..(o + seg) * k], &mut db[o * k..(o + seg) * k], seg, seg, k)
                    });
                }
            }
            &Op::SegMatMul { a, b, seg } => {
                let (r, n) = mat_dims(val(b));
                for s in 0..r / seg {
                    let o = s * seg;
                    let gs = &gd[o * n..(o + seg) * n];
                    acc(a, &mut |da| {
                        gemm_nt(gs, &val(b).data()[o * n..(o + seg) * n], &mut da[o * seg..(o + seg) * seg], seg, n, seg)
                    });
                    acc(b, &mut |db| {
                        gemm_tn(&val(a).data()[o * seg..(o + seg) * seg], gs, &mut db[o * n..(o + seg) * n], seg, seg, n)
                    });
                }
            }
            &Op::Add(a, b) => {
                acc(a, &mut |da| axpy(1.0, gd, da));
                acc(b, &mut |db| axpy(1.0, gd, db));
            }
            &Op::Sub(a, b) => {
                acc(a, &mut |da| axpy(1.0, gd, da));
                acc(b, &mut |db| axpy(-1.0, gd, db));
            }
            &Op::Mul(a, b) => {
                acc(a, &mut |da| {
                    for ((d, g), y) in da.iter_mut().zip(gd).zip(val(b).data()) {
                        *d += g * y;
                    }
                });
                acc(b, &mut |db| {
                    for ((d, g), x) in db.iter_mut().zip(gd).zip(val(a).data()) {
                        *d += g * x;
                    }
                });
            }
            &Op::AddBias(a, bias) => {
                acc(a, &mut |da| axpy(1.0, gd, da));
                let n = val(a).cols();
                acc(bias, &mut |db| {
                    for row in gd.chunks(n) {
                        axpy(1.0, row, db);
                    }
                });
            }
            &Op::Scale(a, c) => acc(a, &mut |da| axpy(c, gd, da)),
            &Op::DivScalar(a, s) => {
                let d = val(s).data()[0];
                acc(a, &mut |da| axpy(1.0 / d, gd, da));
                acc(s, &mut |ds| ds[0] -= dot(gd, val(a).data()) / (d * d));
            }
            &Op::MulRows(a, w) => {
                let n = val(a).cols();
                let wd = val(w).data();
                acc(a, &mut |da| {
                    for (i, wi) in wd.iter().enumerate() {
                        axpy(*wi, &gd[i * n..(i + 1) * n], &mut da[i * n..(i + 1) * n]);
                    }
                });
                acc(w, &mut |dw| {
                    for (i, d) in dw.iter_mut().enumerate() {
                        *d += dot(&gd[i * n..(i + 1) * n], val(a).row(i));
                    }
                });
            }
            &Op::Silu(a) => acc(a, &mut |da| {
                for ((d, g), &x) in da.iter_mut().zip(gd).zip(val(a).data()) {
                    let s = sigmoid(x);
                    *d += g * (s + x * s * (1.0 - s));
                }
            }),
            &Op::Softmax(a) => {
                let y = &node.value;
                let n = y.cols();
                acc(a, &mut |da| {
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = &gd[i * n..(i + 1) * n];
                        let s = dot(yr, gr);
                        for j in 0..n {
                            da[i * n + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let (m, n) = mat_dims(val(*x));
                let gv = val(*gain).data();
                acc(*gain, &mut |dg| {
                    for i in 0..m {
                        for j in 0..n {
                            dg[j] += gd[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                acc(*bias, &mut |db| {
                    for row in gd.chunks(n) {
                        axpy(1.0, row, db);
                    }
                });
                acc(*x, &mut |dx| {
                    let nf = n as f64;
                    for i in 0..m {
                        let xh = &xhat[i * n..(i + 1) * n];
                        let dxh: Vec<f64> = (0..n).map(|j| gd[i * n + j] * gv[j]).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2 = dot(&dxh, xh);
                        for j in 0..n {
                            dx[i * n + j] += inv_std[i] / nf * (nf * dxh[j] - s1 - xh[j] * s2);
                        }
                    }
                });
            }
            Op::L2NormalizeRows { a, norms } => {
                let y = &node.value;
                let n = y.cols();
                acc(*a, &mut |da| {
                    for (i, &nrm) in norms.iter().enumerate() {
                        if nrm == 0.0 {
                            continue;
                        }
                        let yr = y.row(i);
                        let gr = &gd[i * n..(i + 1) * n];
                        let s = dot(yr, gr);
                        for j in 0..n {
                            da[i * n + j] += (gr[j] - yr[j] * s) / nrm;
                        }
                    }
                });
            }
            Op::GatherRows { a, idx } => {
                let n = val(*a).cols();
                acc(*a, &mut |da| {
                    for (k, &i) in idx.iter().enumerate() {
                        axpy(1.0, &gd[k * n..(k + 1) * n], &mut da[i * n..(i + 1) * n]);
                    }
                });
            }
            Op::ScatterRows { a, idx } => {
                let n = val(*a).cols();
                acc(*a, &mut |da| {
                    for (k, &i) in idx.iter().enumerate() {
                        axpy(1.0, &gd[i * n..(i + 1) * n], &mut da[k * n..(k + 1) * n]);
                    }
                });
            }
            Op::GatherElems { a, idx } => {
                let n = val(*a).cols();
                acc(*a, &mut |da| {
                    for (k, &(i, j)) in idx.iter().enumerate() {
                        da[i * n + j] += gd[k];
                    }
                });
            }
            Op::TopKRenorm { a, sel } => {
                let av = val(*a);
                let n = av.cols();
                let w = &node.value;
                let k = w.cols();
                acc(*a, &mut |da| {
                    for (i, s) in sel.iter().enumerate() {
                        let z: f64 = s.iter().map(|&j| av.at(i, j)).sum();
                        let gr = &gd[i * k..(i + 1) * k];
                        let inner = dot(gr, w.row(i));
                        for (slot, &j) in s.iter().enumerate() {
                            da[i * n + j] += (gr[slot] - inner) / z;
                        }
                    }
                });
            }
            &Op::SqDistSeg { u, v, seg } => {
                let (r, d) = mat_dims(val(u));
                let (ud, vd) = (val(u).data(), val(v).data());
                let du_needed = wants(u);
                let dv_needed = wants(v);
                let mut du = vec![0.0; if du_needed { r * d } else { 0 }];
                let mut dv = vec![0.0; if dv_needed { r * d } else { 0 }];
                for row in 0..r {
                    let base = (row / seg) * seg;
                    for j in 0..seg {
                        let gj = gd[row * seg + j];
                        if gj == 0.0 {
                            continue;
                        }
                        let col = base + j;
                        for c in 0..d {
                            let diff = 2.0 * gj * (ud[row * d + c] - vd[col * d + c]);
                            if du_needed {
                                du[row * d + c] += diff;
                            }
                            if dv_needed {
                                dv[col * d + c] -= diff;
                            }
                        }
                    }
                }
                acc(u, &mut |x| axpy(1.0, &du, x));
                acc(v, &mut |x| axpy(1.0, &dv, x));
            }
            Op::CrossEntropy { logits, targets, probs } => {
                let n = val(*logits).cols();
                let m = targets.len() as f64;
                let g0 = gd[0];
                acc(*logits, &mut |dl| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..n {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            dl[i * n + j] += g0 * (probs[i * n + j] - onehot) / m;
                        }
                    }
                });
            }
            &Op::Sum(a) => {
                let g0 = gd[0];
                acc(a, &mut |da| da.iter_mut().for_each(|d| *d += g0));
            }
            Op::SumN(xs) => {
                for &x in xs {
                    acc(x, &mut |dx| axpy(1.0, gd, dx));
                }
            }
            &Op::MeanRows(a) => {
                let (m, n) = mat_dims(val(a));
                acc(a, &mut |da| {
                    for i in 0..m {
                        axpy(1.0 / m as f64, gd, &mut da[i * n..(i + 1) * n]);
                    }
                });
            }
            &Op::LogSumExpRows { a, causal } => {
                let t = val(a);
                let (m, n) = mat_dims(t);
                let out = node.value.data();
                acc(a, &mut |da| {
                    for r in 0..m {
                        let end = if causal { r % n + 1 } else { n };
                        for j in 0..end {
                            da[r * n + j] += gd[r] * (t.at(r, j) - out[r]).exp();
                        }
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let total = node.value.cols();
                let mut off = 0;
                for &x in xs {
                    let (m, w) = mat_dims(val(x));
                    acc(x, &mut |dx| {
                        for i in 0..m {
                            axpy(1.0, &gd[i * total + off..i * total + off + w], &mut dx[i * w..(i + 1) * w]);
                        }
                    });
                    off += w;
                }
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
