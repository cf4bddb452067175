use std::borrow::Cow;

use super::tensor::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Negative slope of every leaky ReLU in the model.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Handle to a node on a [`Tape`].
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
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Concat(Vec<Var>),
    StackRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Softmax(Var),
    SegmentSoftmax(Var, Vec<usize>),
    SegmentSum(Var, Vec<usize>),
    MulCol(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    LeakyRelu(Var),
    Log(Var),
    Clamp(Var, f64, f64),
    Cosine(Var, Var),
    Dot(Var, Var),
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, which is a
/// topological order, so backprop is a single reverse sweep.
///
/// Leaves may borrow their values (`param`) so that per-example tapes can
/// share read-only model parameters without copying them.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        self.push_cow(Cow::Owned(value), op, requires_grad)
    }

    fn push_cow(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "{} produced a non-finite value",
                op_name(&op)
            )));
        }
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    /// Owned leaf.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(value),
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable owned leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Borrowed leaf.
    pub fn borrowed(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(value),
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    #[inline]
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    #[inline]
    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    #[inline]
    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, if any backprop reached `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ----- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [k2, n] = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(m, n, out)?, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`; with `b` a weight of shape `[out, in]` this is the usual linear map.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.shape(a);
        let [n, k2] = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul_nt", format!("[{m}, {k}] x [{n}, {k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(m, n, out)?, Op::MatMulNt(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(n, m, out)?, Op::Transpose(a), rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let [m, n] = self.shape(a);
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(m, n, out)?, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    /// Adds the `[1, n]` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        if self.shape(b) != [1, n] {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", [m, n], self.shape(b))));
        }
        let bias = self.value(b).data();
        let mut out = self.value(a).data().to_vec();
        for row in out.chunks_mut(n.max(1)) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(m, n, out)?, Op::AddRow(a, b), rg)
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        let [m, n] = self.shape(a);
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(m, n, out)?, Op::Scale(a, s), rg)
    }

    /// `scale · a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Result<Var> {
        let [m, n] = self.shape(a);
        let out = self.value(a).data().iter().map(|x| scale * x + shift).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(m, n, out)?, Op::Scale(a, scale), rg)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", "no inputs"));
        };
        let m = self.shape(first)[0];
        if let Some(bad) = parts.iter().find(|p| self.shape(**p)[0] != m) {
            return Err(Error::shape(
                "concat",
                format!("row counts {m} vs {}", self.shape(*bad)[0]),
            ));
        }
        let total: usize = parts.iter().map(|p| self.shape(*p)[1]).sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for p in parts {
                out.extend_from_slice(self.value(*p).row_slice(r));
            }
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(m, total, out)?, Op::Concat(parts.to_vec()), rg)
    }

    /// Concatenation along the first axis.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("stack_rows", "no inputs"));
        };
        let n = self.shape(first)[1];
        if let Some(bad) = parts.iter().find(|p| self.shape(**p)[1] != n) {
            return Err(Error::shape(
                "stack_rows",
                format!("column counts {n} vs {}", self.shape(*bad)[1]),
            ));
        }
        let mut out = Vec::new();
        let mut m = 0;
        for p in parts {
            out.extend_from_slice(self.value(*p).data());
            m += self.shape(*p)[0];
        }
        let rg = self.rg(parts);
        self.push(Tensor::new(m, n, out)?, Op::StackRows(parts.to_vec()), rg)
    }

    /// Embedding lookup: output row `r` is row `index[r]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let [m, _] = self.shape(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= m) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of {m}")));
        }
        let out = self.value(a).select_rows(index);
        let rg = self.rg(&[a]);
        self.push(out, Op::GatherRows(a, index.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Sum over rows: `[m, n] -> [1, n]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let [_, n] = self.shape(a);
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n.max(1)) {
            for (o, &x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::row(out), Op::SumRows(a), rg)
    }

    /// Sum over columns: `[m, n] -> [m, 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Result<Var> {
        let [_, n] = self.shape(a);
        let out = self
            .value(a)
            .data()
            .chunks(n.max(1))
            .map(|row| row.iter().sum())
            .collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::column(out), Op::SumCols(a), rg)
    }

    /// Mean over rows: `[m, n] -> [1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let m = self.shape(a)[0];
        if m == 0 {
            return Err(Error::shape("mean_rows", "zero rows"));
        }
        let s = self.sum_rows(a)?;
        self.scalar_mul(s, 1.0 / m as f64)
    }

    /// Row-wise softmax. `mask[i]` false excludes entry `i` (row-major) and
    /// gives it probability zero.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let [m, n] = self.shape(a);
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(Error::shape("softmax", format!("mask of {} for {:?}", mask.len(), [m, n])));
            }
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let keep = |j: usize| mask.is_none_or(|mk| mk[r * n + j]);
            let row = &x[r * n..(r + 1) * n];
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::EmptyAttentionSupport);
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0;
            for j in 0..n {
                if keep(j) {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            o.iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(m, n, out)?, Op::Softmax(a), rg)
    }

    /// Softmax of a `[E, 1]` column within each segment
    /// `offsets[s]..offsets[s + 1]`. Empty segments are allowed.
    pub fn segment_softmax(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        let [e, c] = self.shape(a);
        check_offsets("segment_softmax", offsets, e, c)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; e];
        for w in offsets.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if lo == hi {
                continue;
            }
            let max = x[lo..hi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in lo..hi {
                out[i] = (x[i] - max).exp();
                z += out[i];
            }
            out[lo..hi].iter_mut().for_each(|v| *v /= z);
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::column(out), Op::SegmentSoftmax(a, offsets.to_vec()), rg)
    }

    /// Sums the rows of `a: [E, d]` within each segment, giving `[S, d]`;
    /// empty segments yield zero rows.
    pub fn segment_sum(&mut self, a: Var, offsets: &[usize]) -> Result<Var> {
        let [e, d] = self.shape(a);
        check_offsets("segment_sum", offsets, e, 1)?;
        let s = offsets.len() - 1;
        let x = self.value(a).data();
        let mut out = vec![0.0; s * d];
        for (seg, w) in offsets.windows(2).enumerate() {
            let o = &mut out[seg * d..(seg + 1) * d];
            for i in w[0]..w[1] {
                for (ov, &xv) in o.iter_mut().zip(&x[i * d..(i + 1) * d]) {
                    *ov += xv;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push(Tensor::new(s, d, out)?, Op::SegmentSum(a, offsets.to_vec()), rg)
    }

    /// Scales row `i` of `a: [m, n]` by `c[i]` for `c: [m, 1]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let [m, n] = self.shape(a);
        if self.shape(c) != [m, 1] {
            return Err(Error::shape("mul_col", format!("{:?} by {:?}", [m, n], self.shape(c))));
        }
        let cv = self.value(c).data();
        let mut out = self.value(a).data().to_vec();
        for (r, row) in out.chunks_mut(n.max(1)).enumerate() {
            row.iter_mut().for_each(|v| *v *= cv[r]);
        }
        let rg = self.rg(&[a, c]);
        self.push(Tensor::new(m, n, out)?, Op::MulCol(a, c), rg)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var> {
        let [m, n] = self.shape(a);
        let out = self.value(a).data().iter().map(|&x| f(x)).collect();
        let rg = self.rg(&[a]);
        self.push(Tensor::new(m, n, out)?, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn leaky_relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, Op::LeakyRelu(a), |x| if x > 0.0 { x } else { LEAKY_SLOPE * x })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| x <= 0.0) {
            return Err(Error::NonFinite(format!("log of non-positive value {bad}")));
        }
        self.map(a, Op::Log(a), f64::ln)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.map(a, Op::Clamp(a, lo, hi), |x| x.clamp(lo, hi))
    }

    /// Row-wise cosine similarity, `[m, n] x [m, n] -> [m, 1]`. A zero row
    /// has similarity 0 with everything.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("cosine_similarity", a, b)?;
        let [m, n] = self.shape(a);
        let (av, bv) = (self.value(a), self.value(b));
        let out = (0..m)
            .map(|r| cosine(&av.data()[r * n..(r + 1) * n], &bv.data()[r * n..(r + 1) * n]))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::column(out), Op::Cosine(a, b), rg)
    }

    /// Full inner product of two same-shape tensors, `[1, 1]` result.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = dot(self.value(a).data(), self.value(b).data());
        let rg = self.rg(&[a, b]);
        self.push(Tensor::scalar(s), Op::Dot(a, b), rg)
    }

    // ----- backprop ---------------------------------------------------------

    /// Accumulates `∂loss/∂v` into the gradient slot of every differentiable
    /// node `v` that `loss` depends on.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape != [1, 1] {
            return Err(Error::NonScalarLoss(shape));
        }
        self.backward_with(loss, &Tensor::scalar(1.0))
    }

    /// Backprop from an arbitrary node with an explicit upstream gradient.
    pub fn backward_with(&mut self, root: Var, seed: &Tensor) -> Result<()> {
        if seed.shape() != self.shape(root) {
            return Err(Error::shape(
                "backward",
                format!("seed {:?} for node {:?}", seed.shape(), self.shape(root)),
            ));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut tmp: Vec<Option<Vec<f64>>> = Vec::new();
        tmp.resize_with(root.0 + 1, || None);
        tmp[root.0] = Some(seed.data().to_vec());
        for id in (0..=root.0).rev() {
            let Some(g) = tmp[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id, &g, &mut tmp);
            match &mut self.grads[id] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot => *slot = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], tmp: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let y = node.value.data();
        let [m, n] = node.value.shape();
        let val = |v: Var| self.nodes[v.0].value.as_ref();
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let len = self.nodes[v.0].value.len();
            let slot = tmp[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let k = val(*a).cols();
                if wants(*a) {
                    acc(*a, &mut |ga| matmul_nt_acc(g, val(*b).data(), ga, m, n, k));
                }
                if wants(*b) {
                    acc(*b, &mut |gb| matmul_tn_acc(val(*a).data(), g, gb, m, k, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let k = val(*a).cols();
                if wants(*a) {
                    acc(*a, &mut |ga| matmul_acc(g, val(*b).data(), ga, m, n, k));
                }
                if wants(*b) {
                    acc(*b, &mut |gb| matmul_tn_acc(g, val(*a).data(), gb, m, n, k));
                }
            }
            Op::Transpose(a) => acc(*a, &mut |ga| {
                // output [m, n] came from input [n, m]
                for i in 0..m {
                    for j in 0..n {
                        ga[j * m + i] += g[i * n + j];
                    }
                }
            }),
            Op::Add(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, b) => {
                acc(*a, &mut |ga| add_into(ga, g));
                acc(*b, &mut |gb| {
                    for row in g.chunks(n.max(1)) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| {
                ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)
            }),
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    acc(*p, &mut |gp| {
                        for r in 0..m {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * n + offset..r * n + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(*p).len();
                    acc(*p, &mut |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::GatherRows(a, index) => acc(*a, &mut |ga| {
                for (r, &src) in index.iter().enumerate() {
                    add_into(&mut ga[src * n..(src + 1) * n], &g[r * n..(r + 1) * n]);
                }
            }),
            Op::SumAll(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::SumRows(a) => acc(*a, &mut |ga| {
                for row in ga.chunks_mut(n.max(1)) {
                    add_into(row, g);
                }
            }),
            Op::SumCols(a) => {
                let w = val(*a).cols();
                acc(*a, &mut |ga| {
                    for (r, row) in ga.chunks_mut(w.max(1)).enumerate() {
                        row.iter_mut().for_each(|x| *x += g[r]);
                    }
                })
            }
            Op::Softmax(a) => acc(*a, &mut |ga| {
                for r in 0..m {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &g[r * n..(r + 1) * n]);
                    let s = dot(yr, gr);
                    for j in 0..n {
                        ga[r * n + j] += yr[j] * (gr[j] - s);
                    }
                }
            }),
            Op::SegmentSoftmax(a, offsets) => acc(*a, &mut |ga| {
                for w in offsets.windows(2) {
                    let (lo, hi) = (w[0], w[1]);
                    let s = dot(&y[lo..hi], &g[lo..hi]);
                    for i in lo..hi {
                        ga[i] += y[i] * (g[i] - s);
                    }
                }
            }),
            Op::SegmentSum(a, offsets) => acc(*a, &mut |ga| {
                for (seg, w) in offsets.windows(2).enumerate() {
                    for i in w[0]..w[1] {
                        add_into(&mut ga[i * n..(i + 1) * n], &g[seg * n..(seg + 1) * n]);
                    }
                }
            }),
            Op::MulCol(a, c) => {
                let (av, cv) = (val(*a).data(), val(*c).data());
                acc(*a, &mut |ga| {
                    for r in 0..m {
                        for j in 0..n {
                            ga[r * n + j] += g[r * n + j] * cv[r];
                        }
                    }
                });
                acc(*c, &mut |gc| {
                    for r in 0..m {
                        gc[r] += dot(&g[r * n..(r + 1) * n], &av[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Tanh(a) => acc(*a, &mut |ga| {
                for i in 0..ga.len() {
                    ga[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::LeakyRelu(a) => {
                let x = val(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += if x[i] > 0.0 { g[i] } else { LEAKY_SLOPE * g[i] };
                    }
                })
            }
            Op::Log(a) => {
                let x = val(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / x[i];
                    }
                })
            }
            Op::Clamp(a, lo, hi) => {
                let x = val(*a).data();
                acc(*a, &mut |ga| {
                    for i in 0..ga.len() {
                        if x[i] >= *lo && x[i] <= *hi {
                            ga[i] += g[i];
                        }
                    }
                })
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                let w = val(*a).cols();
                for r in 0..m {
                    let (ar, br) = (&av[r * w..(r + 1) * w], &bv[r * w..(r + 1) * w]);
                    let (na, nb) = (norm(ar), norm(br));
                    if na == 0.0 || nb == 0.0 {
                        continue;
                    }
                    let c = y[r];
                    acc(*a, &mut |ga| {
                        for j in 0..w {
                            ga[r * w + j] += g[r] * (br[j] / (na * nb) - c * ar[j] / (na * na));
                        }
                    });
                    acc(*b, &mut |gb| {
                        for j in 0..w {
                            gb[r * w + j] += g[r] * (ar[j] / (na * nb) - c * br[j] / (nb * nb));
                        }
                    });
                }
            }
            Op::Dot(a, b) => {
                let (av, bv) = (val(*a).data(), val(*b).data());
                acc(*a, &mut |ga| ga.iter_mut().zip(bv).for_each(|(x, y)| *x += g[0] * y));
                acc(*b, &mut |gb| gb.iter_mut().zip(av).for_each(|(x, y)| *x += g[0] * y));
            }
        }
    }
}

fn check_offsets(op: &'static str, offsets: &[usize], e: usize, cols: usize) -> Result<()> {
    if cols != 1 && op == "segment_softmax" {
        return Err(Error::shape(op, format!("expected a column, got {cols} columns")));
    }
    if offsets.is_empty() || offsets[0] != 0 || *offsets.last().unwrap() != e {
        return Err(Error::shape(op, format!("offsets do not cover {e} rows")));
    }
    if offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::shape(op, "offsets not monotone"));
    }
    Ok(())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot(a, b) / (na * nb)
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulNt(..) => "matmul_nt",
        Op::Transpose(..) => "transpose",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Scale(..) => "scale",
        Op::Concat(..) => "concat",
        Op::StackRows(..) => "stack_rows",
        Op::GatherRows(..) => "gather_rows",
        Op::SumAll(..) => "sum",
        Op::SumRows(..) => "sum_rows",
        Op::SumCols(..) => "sum_cols",
        Op::Softmax(..) => "softmax",
        Op::SegmentSoftmax(..) => "segment_softmax",
        Op::SegmentSum(..) => "segment_sum",
        Op::MulCol(..) => "mul_col",
        Op::Sigmoid(..) => "sigmoid",
        Op::Tanh(..) => "tanh",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Log(..) => "log",
        Op::Clamp(..) => "clamp",
        Op::Cosine(..) => "cosine_similarity",
        Op::Dot(..) => "dot",
    }
}
