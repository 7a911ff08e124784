//! Tape-based reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its output value and the rule to
//! push gradients back to its inputs. Nodes are only ever appended, so the
//! tape is in topological order by construction and the backward pass is a
//! single reverse sweep.
//!
//! Leaf gradients accumulate across [`Tape::backward`] calls until
//! [`Tape::zero_grad`] is called.

use std::rc::Rc;

use super::tensor::{kernels, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MaskBias {
        x: Var,
        beta: Var,
        mask: Rc<[f64]>,
    },
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        shift: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Tanh(Var),
    Square(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    SumAll(Var),
    MeanAll(Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Diag(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that computes values only; nothing on it requires grad.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node recorded after the first `len`.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.grads.truncate(len);
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    pub fn zero_grad(&mut self) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node, if any has reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds this node's accumulated gradient into `target.grad`.
    pub fn write_grad(&self, v: Var, target: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => target.accumulate_grad(g),
            None => Ok(()),
        }
    }

    /// Places a tensor on the tape as a leaf; it takes part in backward iff
    /// `t.requires_grad` and the tape has gradients enabled.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        let rg = value.requires_grad && self.grad_enabled;
        value.grad = None;
        self.push(value, Op::Leaf, rg)
    }

    /// Leaf that never requires grad.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        t.grad = None;
        self.push(t, Op::Leaf, false)
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.requires_grad = requires_grad;
        self.nodes.push(Node { value, op, requires_grad });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!("{what} of {:?} and {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    // ---- forward operations ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let ([r, k], [c, k2]) = (self.shape(a), self.shape(b));
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul of {:?} and transpose of {:?}: inner dimensions differ",
                [r, k],
                [c, k2]
            )));
        }
        let mut out = Tensor::zeros(r, c);
        kernels::matmul_nt(self.value(a).data(), self.value(b).data(), out.data_mut(), r, k, c);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(&[a]);
        self.push(out, Op::Transpose(a), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Tensor::from_vec(x.rows(), x.cols(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |p, q| p + q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |p, q| p - q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |p, q| p * q);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `x[r×c] + b[1×c]` with `b` added to every row.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let ([r, c], bs) = (self.shape(x), self.shape(b));
        if bs != [1, c] {
            return Err(Error::Dimension(format!("row bias {bs:?} for matrix {:?}", [r, c])));
        }
        let mut out = self.value(x).clone();
        let bias = self.value(b).data().to_vec();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bv) in row.iter_mut().zip(&bias) {
                *o += bv;
            }
        }
        let rg = self.rg(&[x, b]);
        Ok(self.push(out, Op::AddRow(x, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    /// `x[i][j] + beta_i · mask[j]`.
    ///
    /// `beta` is either `1 × 1` (one value shared by all rows) or `r × 1`
    /// (one value per row). `mask` has one entry per column.
    pub fn mask_bias(&mut self, x: Var, beta: Var, mask: Rc<[f64]>) -> Result<Var> {
        let [r, c] = self.shape(x);
        let bs = self.shape(beta);
        if mask.len() != c {
            return Err(Error::Dimension(format!("mask of length {} for logits {:?}", mask.len(), [r, c])));
        }
        if bs != [1, 1] && bs != [r, 1] {
            return Err(Error::Dimension(format!("bias scale {bs:?} for logits {:?}", [r, c])));
        }
        let b = self.value(beta).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, row) in out.data_mut().chunks_mut(c).enumerate() {
            let bi = if b.len() == 1 { b[0] } else { b[i] };
            for (o, m) in row.iter_mut().zip(mask.iter()) {
                *o += bi * m;
            }
        }
        let rg = self.rg(&[x, beta]);
        Ok(self.push(out, Op::MaskBias { x, beta, mask }, rg))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let c = src.cols();
        let mut out = Tensor::zeros(src.rows(), c);
        for (o, row) in out.data_mut().chunks_mut(c.max(1)).zip(src.data().chunks(c.max(1))) {
            kernels::softmax_row(row, o);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let c = src.cols();
        let mut out = src.clone();
        for row in out.data_mut().chunks_mut(c.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::LogSoftmaxRows(x), rg)
    }

    /// Per-row layer normalization with gain `gamma[1×c]` and shift `shift[1×c]`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, shift: Var) -> Result<Var> {
        let [r, c] = self.shape(x);
        for p in [gamma, shift] {
            if self.shape(p) != [1, c] {
                return Err(Error::Dimension(format!("layer-norm parameter {:?} for input {:?}", self.shape(p), [r, c])));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let s = self.value(shift).data();
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = Tensor::zeros(r, c);
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out.data_mut()[i * c + j] = g[j] * h + s[j];
            }
        }
        let rg = self.rg(&[x, gamma, shift]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                shift,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for v in out.data_mut() {
            let u = GELU_C * (*v + GELU_K * *v * *v * *v);
            *v = 0.5 * *v * (1.0 + u.tanh());
        }
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= *v);
        let rg = self.rg(&[x]);
        self.push(out, Op::Square(x), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|p| self.shape(*p)[1]).unwrap_or(0);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != c {
                return Err(Error::Dimension(format!("concat rows: width {} vs {}", t.cols(), c)));
            }
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        let out = Tensor::from_vec(rows, c, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|p| self.shape(*p)[0]).unwrap_or(0);
        if parts.iter().any(|p| self.shape(*p)[0] != r) {
            return Err(Error::Dimension("concat cols: row counts differ".into()));
        }
        let total: usize = parts.iter().map(|p| self.shape(*p)[1]).sum();
        let mut out = Tensor::zeros(r, total);
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            let c = t.cols();
            for i in 0..r {
                out.data_mut()[i * total + off..i * total + off + c].copy_from_slice(t.row_slice(i));
            }
            off += c;
        }
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [r, _] = self.shape(x);
        if start + len > r {
            return Err(Error::Dimension(format!("rows {start}..{} of {r}", start + len)));
        }
        let out = self.value(x).slice_rows(start, len);
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let [r, c] = self.shape(x);
        if start + len > c {
            return Err(Error::Dimension(format!("cols {start}..{} of {c}", start + len)));
        }
        let src = self.value(x);
        let mut out = Tensor::zeros(r, len);
        for i in 0..r {
            out.data_mut()[i * len..(i + 1) * len].copy_from_slice(&src.row_slice(i)[start..start + len]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Column-wise mean over rows: `r × c → 1 × c`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let (r, c) = (src.rows(), src.cols());
        let mut out = Tensor::zeros(1, c);
        for row in src.data().chunks(c.max(1)) {
            for (o, v) in out.data_mut().iter_mut().zip(row) {
                *o += v;
            }
        }
        out.data_mut().iter_mut().for_each(|v| *v /= r as f64);
        let rg = self.rg(&[x]);
        self.push(out, Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    /// Scales each row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let c = src.cols();
        let mut out = src.clone();
        let mut norms = Vec::with_capacity(src.rows());
        for row in out.data_mut().chunks_mut(c.max(1)) {
            let n = kernels::dot(row, row).sqrt();
            if n == 0.0 || !n.is_finite() {
                return Err(Error::Degenerate("cannot normalize a zero-norm row".into()));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::L2NormalizeRows { x, norms }, rg))
    }

    /// Diagonal of a square matrix as an `r × 1` column.
    pub fn diag(&mut self, x: Var) -> Result<Var> {
        let [r, c] = self.shape(x);
        if r != c {
            return Err(Error::Dimension(format!("diagonal of non-square {:?}", [r, c])));
        }
        let src = self.value(x);
        let data = (0..r).map(|i| src.get(i, i)).collect();
        let out = Tensor::from_vec(r, 1, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Diag(x), rg))
    }

    // ---- backward ----

    /// Propagates d(root)/d(node) to every node that requires grad and adds
    /// the result into the leaf gradient buffers.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.shape(root) != [1, 1] {
            return Err(Error::Contract(format!("backward needs a scalar root, got shape {:?}", self.shape(root))));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut g: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        g[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(gi) = g[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let slot = &mut self.grads[i];
                match slot {
                    Some(acc) => acc.iter_mut().zip(&gi).for_each(|(a, v)| *a += v),
                    None => *slot = Some(gi),
                }
                continue;
            }
            self.propagate(i, &gi, &mut g);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, gout: &[f64], g: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = g[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (r, k, c) = (av.rows(), av.cols(), bv.cols());
                if needs(*a) {
                    acc(*a, &mut |s| kernels::matmul_nt(gout, bv.data(), s, r, c, k));
                }
                if needs(*b) {
                    acc(*b, &mut |s| kernels::matmul_tn(av.data(), gout, s, k, r, c));
                }
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (r, k, c) = (av.rows(), av.cols(), bv.rows());
                if needs(*a) {
                    acc(*a, &mut |s| kernels::matmul(gout, bv.data(), s, r, c, k));
                }
                if needs(*b) {
                    acc(*b, &mut |s| kernels::matmul_tn(gout, av.data(), s, c, r, k));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (out.rows(), out.cols());
                acc(*a, &mut |s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[j * r + i] += gout[i * c + j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, gout));
                acc(*b, &mut |s| add_into(s, gout));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, gout));
                acc(*b, &mut |s| s.iter_mut().zip(gout).for_each(|(x, v)| *x -= v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                acc(*a, &mut |s| {
                    for ((x, gv), y) in s.iter_mut().zip(gout).zip(bv) {
                        *x += gv * y;
                    }
                });
                acc(*b, &mut |s| {
                    for ((x, gv), y) in s.iter_mut().zip(gout).zip(av) {
                        *x += gv * y;
                    }
                });
            }
            Op::AddRow(x, b) => {
                let c = out.cols();
                acc(*x, &mut |s| add_into(s, gout));
                acc(*b, &mut |s| {
                    for row in gout.chunks(c) {
                        add_into(s, row);
                    }
                });
            }
            Op::Scale(x, k) => {
                acc(*x, &mut |s| s.iter_mut().zip(gout).for_each(|(a, v)| *a += k * v));
            }
            Op::MaskBias { x, beta, mask } => {
                let c = out.cols();
                acc(*x, &mut |s| add_into(s, gout));
                acc(*beta, &mut |s| {
                    for (i, row) in gout.chunks(c).enumerate() {
                        let d = kernels::dot(row, mask);
                        if s.len() == 1 {
                            s[0] += d;
                        } else {
                            s[i] += d;
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let c = out.cols();
                acc(*x, &mut |s| {
                    for ((srow, y), gy) in s.chunks_mut(c).zip(out.data().chunks(c)).zip(gout.chunks(c)) {
                        let dotp = kernels::dot(y, gy);
                        for j in 0..c {
                            srow[j] += y[j] * (gy[j] - dotp);
                        }
                    }
                });
            }
            Op::LogSoftmaxRows(x) => {
                let c = out.cols();
                acc(*x, &mut |s| {
                    for ((srow, y), gy) in s.chunks_mut(c).zip(out.data().chunks(c)).zip(gout.chunks(c)) {
                        let total: f64 = gy.iter().sum();
                        for j in 0..c {
                            srow[j] += gy[j] - y[j].exp() * total;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                shift,
                xhat,
                inv_std,
            } => {
                let c = out.cols();
                let gm = nodes[gamma.0].value.data();
                acc(*x, &mut |s| {
                    for (i, ((srow, h), gy)) in s.chunks_mut(c).zip(xhat.chunks(c)).zip(gout.chunks(c)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let d = gy[j] * gm[j];
                            m1 += d;
                            m2 += d * h[j];
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let d = gy[j] * gm[j];
                            srow[j] += inv_std[i] * (d - m1 - h[j] * m2);
                        }
                    }
                });
                acc(*gamma, &mut |s| {
                    for (h, gy) in xhat.chunks(c).zip(gout.chunks(c)) {
                        for j in 0..c {
                            s[j] += gy[j] * h[j];
                        }
                    }
                });
                acc(*shift, &mut |s| {
                    for gy in gout.chunks(c) {
                        add_into(s, gy);
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |s| {
                    for ((a, v), gv) in s.iter_mut().zip(xv).zip(gout) {
                        let u = GELU_C * (v + GELU_K * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                        *a += gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
                    }
                });
            }
            Op::Tanh(x) => {
                acc(*x, &mut |s| {
                    for ((a, y), gv) in s.iter_mut().zip(out.data()).zip(gout) {
                        *a += gv * (1.0 - y * y);
                    }
                });
            }
            Op::Square(x) => {
                let xv = nodes[x.0].value.data();
                acc(*x, &mut |s| {
                    for ((a, v), gv) in s.iter_mut().zip(xv).zip(gout) {
                        *a += 2.0 * v * gv;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].value.len();
                    acc(*p, &mut |s| add_into(s, &gout[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (out.rows(), out.cols());
                let mut off = 0;
                for p in parts {
                    let c = nodes[p.0].value.cols();
                    acc(*p, &mut |s| {
                        for i in 0..r {
                            add_into(&mut s[i * c..(i + 1) * c], &gout[i * total + off..i * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                acc(*x, &mut |s| add_into(&mut s[start * c..start * c + gout.len()], gout));
            }
            Op::SliceCols { x, start } => {
                let (r, len) = (out.rows(), out.cols());
                let c = nodes[x.0].value.cols();
                acc(*x, &mut |s| {
                    for i in 0..r {
                        add_into(&mut s[i * c + start..i * c + start + len], &gout[i * len..(i + 1) * len]);
                    }
                });
            }
            Op::MeanRows(x) => {
                let (r, c) = (nodes[x.0].value.rows(), out.cols());
                acc(*x, &mut |s| {
                    for row in s.chunks_mut(c) {
                        for (a, gv) in row.iter_mut().zip(gout) {
                            *a += gv / r as f64;
                        }
                    }
                });
            }
            Op::SumAll(x) => {
                acc(*x, &mut |s| s.iter_mut().for_each(|a| *a += gout[0]));
            }
            Op::MeanAll(x) => {
                let n = nodes[x.0].value.len() as f64;
                acc(*x, &mut |s| s.iter_mut().for_each(|a| *a += gout[0] / n));
            }
            Op::L2NormalizeRows { x, norms } => {
                let c = out.cols();
                acc(*x, &mut |s| {
                    for (i, ((srow, y), gy)) in s.chunks_mut(c).zip(out.data().chunks(c)).zip(gout.chunks(c)).enumerate() {
                        let d = kernels::dot(y, gy);
                        for j in 0..c {
                            srow[j] += (gy[j] - y[j] * d) / norms[i];
                        }
                    }
                });
            }
            Op::Diag(x) => {
                let r = out.rows();
                acc(*x, &mut |s| {
                    for i in 0..r {
                        s[i * r + i] += gout[i];
                    }
                });
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
