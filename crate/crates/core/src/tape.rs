//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends a node holding its value and the information its
//! backward rule needs. Node ids grow monotonically, so the recording order is
//! already a topological order and [`Tape::backward`] is a single reverse sweep.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::tensor::Tensor;

/// Layer-norm epsilon, added to the variance inside the square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Softmax(Var),
    /// `inv_std` per row; the normalized output lives in the node value.
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Gelu(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Sum(Var),
    Mean(Var),
    /// `coef[i][j]` is d(loss)/d(logit_ij) for a unit upstream gradient.
    CrossEntropy { logits: Var, coef: Vec<f64> },
    Reverse { x: Var, lambda: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn dims2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [r, c] => Ok((r, c)),
        _ => Err(Error::invalid(op, alloc::format!("expected a 2-D tensor, got shape {shape:?}"))),
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cj, bj) in crow.iter_mut().zip(brow) {
                *cj += aip * bj;
            }
        }
    }
}

/// `c[m×k] += g[m×n] · b[k×n]ᵀ`
fn gemm_bt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let dot: f64 = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * k + p] += dot;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · g[m×n]`
fn gemm_at(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cj, gj) in crow.iter_mut().zip(grow) {
                *cj += aip * gj;
            }
        }
    }
}

/// tanh-approximate GELU: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu(x: f64) -> f64 {
    let k = math::sqrt(2.0 / core::f64::consts::PI);
    0.5 * x * (1.0 + math::tanh(k * (x + 0.044715 * x * x * x)))
}

/// Exact derivative of [`gelu`].
pub fn gelu_grad(x: f64) -> f64 {
    let k = math::sqrt(2.0 / core::f64::consts::PI);
    let t = math::tanh(k * (x + 0.044715 * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * 0.044715 * x * x)
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

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Snapshot of a node as a standalone tensor (without gradient tracking).
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: self.nodes[a.0].shape.clone(),
            rhs: self.nodes[b.0].shape.clone(),
        }
    }

    /// Records a leaf holding a copy of `t`. Gradient tracking follows
    /// `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "constant",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = dims2("matmul", self.shape(a))?;
        let (k2, n) = dims2("matmul", self.shape(b))?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        gemm(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(op, a, b));
        }
        Ok(self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    fn row_check(&self, op: &'static str, a: Var, row: Var) -> Result<(usize, usize)> {
        let (m, n) = dims2(op, self.shape(a))?;
        let ok = match self.shape(row) {
            [c] => *c == n,
            [1, c] => *c == n,
            _ => false,
        };
        if !ok {
            return Err(self.mismatch(op, a, row));
        }
        Ok((m, n))
    }

    /// `a[m×n] + row[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.row_check("add_row", a, row)?;
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            out[i * n..(i + 1) * n].iter_mut().zip(r).for_each(|(o, x)| *o += x);
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(vec![m, n], out, Op::AddRow(a, row), rg))
    }

    /// `a[m×n] ⊙ row[n]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.row_check("mul_row", a, row)?;
        let r = self.value(row);
        let mut out = self.value(a).to_vec();
        for i in 0..m {
            out[i * n..(i + 1) * n].iter_mut().zip(r).for_each(|(o, x)| *o *= x);
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(vec![m, n], out, Op::MulRow(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, s), rg)
    }

    fn last_axis(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let shape = self.shape(a);
        match shape.last() {
            Some(&n) if n > 0 => Ok((numel(shape) / n, n)),
            _ => Err(Error::invalid(op, alloc::format!("needs a nonempty last axis, got {shape:?}"))),
        }
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = self.last_axis("softmax", a)?;
        let mut out = self.value(a).to_vec();
        for r in 0..rows {
            let row = &mut out[r * n..(r + 1) * n];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = math::exp(*x - m);
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Softmax(a), rg))
    }

    /// Normalizes each last-axis row to zero mean and unit variance (no affine
    /// part). A row whose entries are all identical maps to exact zeros.
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (rows, n) = self.last_axis("layer_norm", a)?;
        let x = self.value(a);
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / math::sqrt(var + LAYER_NORM_EPS);
            inv_std[r] = is;
            if row.iter().all(|v| *v == row[0]) {
                continue;
            }
            for (o, v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::LayerNorm { x: a, inv_std }, rg))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|x| gelu(*x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = dims2("transpose", self.shape(a))?;
        let x = self.value(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(a)) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a), rg))
    }

    /// Concatenates 2-D tensors along the token (row) axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows", "no inputs"))?;
        let (_, n) = dims2("concat_rows", self.shape(first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = dims2("concat_rows", self.shape(p))?;
            if c != n {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..start+len` of a 2-D tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2("slice_rows", self.shape(a))?;
        if start + len > m {
            return Err(Error::invalid(
                "slice_rows",
                alloc::format!("rows {start}..{} out of range for {m} rows", start + len),
            ));
        }
        let out = self.value(a)[start * n..(start + len) * n].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![len, n], out, Op::SliceRows { x: a, start }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(&[a]);
        self.push(Vec::new(), vec![s], Op::Mean(a), rg)
    }

    /// Weighted mean cross-entropy of `logits[n×c]` against integer targets,
    /// stabilized with log-sum-exp. With `class_weights`, sample `i` carries
    /// weight `w[y_i]` and the result is `Σ wᵢ·ceᵢ / Σ wᵢ`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], class_weights: Option<&[f64]>) -> Result<Var> {
        let (n, c) = dims2("cross_entropy", self.shape(logits))?;
        if targets.len() != n {
            return Err(Error::LengthMismatch(n, targets.len()));
        }
        if let Some(w) = class_weights {
            if w.len() != c {
                return Err(Error::LengthMismatch(c, w.len()));
            }
        }
        let x = self.value(logits);
        let mut coef = vec![0.0; n * c];
        let mut total = 0.0;
        let mut wsum = 0.0;
        for (i, &y) in targets.iter().enumerate() {
            if y >= c {
                return Err(Error::LabelOutOfRange { label: y, classes: c });
            }
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let se: f64 = row.iter().map(|v| math::exp(v - m)).sum();
            let lse = m + math::ln(se);
            let w = class_weights.map_or(1.0, |w| w[y]);
            total += w * (lse - row[y]);
            wsum += w;
            for j in 0..c {
                coef[i * c + j] = w * math::exp(row[j] - lse);
            }
            coef[i * c + y] -= w;
        }
        if wsum <= 0.0 {
            return Err(Error::invalid("cross_entropy", "total sample weight is zero"));
        }
        coef.iter_mut().for_each(|g| *g /= wsum);
        let rg = self.rg(&[logits]);
        Ok(self.push(Vec::new(), vec![total / wsum], Op::CrossEntropy { logits, coef }, rg))
    }

    /// Gradient reversal: identity forward, upstream gradient times `-lambda`
    /// backward.
    pub fn reverse_gradient(&mut self, a: Var, lambda: f64) -> Var {
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Reverse { x: a, lambda }, rg)
    }

    /// Reverse sweep from a scalar `loss`. Every tracked leaf recorded before
    /// `loss` gets a gradient (zeros when it does not influence the loss);
    /// untracked nodes get none.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::NonScalarLoss(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if ln.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, |da| gemm_bt(g, bv, da, m, k, n));
                self.accum(grads, *b, |db| gemm_at(av, g, db, m, k, n));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    self.accum(grads, v, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                self.accum(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = self.value(*row).len();
                self.accum(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
                self.accum(grads, *row, |d| {
                    for (i, gi) in g.iter().enumerate() {
                        d[i % n] += gi;
                    }
                });
            }
            Op::MulRow(a, row) => {
                let (av, rv) = (self.value(*a), self.value(*row));
                let n = rv.len();
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * rv[i % n];
                    }
                });
                self.accum(grads, *row, |d| {
                    for (i, gi) in g.iter().enumerate() {
                        d[i % n] += gi * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accum(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += s * y));
            }
            Op::Softmax(a) => {
                let n = *node.shape.last().expect("softmax input has a last axis");
                let y = &node.value;
                self.accum(grads, *a, |d| {
                    for r in 0..y.len() / n {
                        let s = r * n..(r + 1) * n;
                        let dot: f64 = g[s.clone()].iter().zip(&y[s.clone()]).map(|(p, q)| p * q).sum();
                        for j in s {
                            d[j] += y[j] * (g[j] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, inv_std } => {
                let n = *node.shape.last().expect("layer_norm input has a last axis");
                let y = &node.value;
                self.accum(grads, *x, |d| {
                    for (r, is) in inv_std.iter().enumerate() {
                        let s = r * n..(r + 1) * n;
                        let mg = g[s.clone()].iter().sum::<f64>() / n as f64;
                        let mgy = g[s.clone()].iter().zip(&y[s.clone()]).map(|(p, q)| p * q).sum::<f64>() / n as f64;
                        for j in s {
                            d[j] += is * (g[j] - mg - y[j] * mgy);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                self.accum(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * gelu_grad(av[i]);
                    }
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                self.accum(grads, *a, |d| {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                self.accum(grads, *a, |d| d.iter_mut().zip(g).for_each(|(x, y)| *x += y));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accum(grads, *p, |d| {
                        d.iter_mut().zip(&g[off..off + len]).for_each(|(x, y)| *x += y)
                    });
                    off += len;
                }
            }
            Op::SliceRows { x, start } => {
                let n = node.shape[1];
                let off = start * n;
                self.accum(grads, *x, |d| {
                    d[off..off + g.len()].iter_mut().zip(g).for_each(|(x, y)| *x += y)
                });
            }
            Op::Sum(a) => {
                self.accum(grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.accum(grads, *a, |d| d.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::CrossEntropy { logits, coef } => {
                self.accum(grads, *logits, |d| {
                    d.iter_mut().zip(coef).for_each(|(x, c)| *x += g[0] * c)
                });
            }
            Op::Reverse { x, lambda } => {
                self.accum(grads, *x, |d| {
                    d.iter_mut().zip(g).for_each(|(p, q)| *p += -lambda * q)
                });
            }
        }
    }
}
