use super::{AutodiffError, Tensor};
use crate::softpred::{gumbel_softmax_kernel, softmax_kernel, sparsemax_kernel, PROB_FLOOR};

/// Floor applied to vector norms before dividing in [`Graph::l2_normalize_rows`].
pub const NORM_FLOOR: f64 = 1e-12;
const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Div(Var, Var),
    AddRowBroadcast(Var, Var),
    Scale(Var, f64),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    RowMax { input: Var, argmax: Vec<usize> },
    ColMax { input: Var, argmax: Vec<usize> },
    Softmax(Var),
    LogSoftmax(Var),
    Sparsemax(Var),
    GumbelSoftmax { probs: Var, tau: f64 },
    L2Normalize { input: Var, norms: Vec<f64> },
    LayerNorm { input: Var, gamma: Var, beta: Var, normalized: Vec<f64>, inv_std: Vec<f64> },
    GatherRows { table: Var, ids: Vec<usize> },
    SliceRows { input: Var, start: usize },
    SliceCols { input: Var, start: usize },
    ConcatCols(Vec<Var>),
    PickPerRow { input: Var, ids: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph.
///
/// Every primitive evaluates eagerly and appends a node, so node order is a
/// topological order and [`Graph::backward`] is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the leaves that requested them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for tensors created without requires-grad.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn mismatch(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::ShapeMismatch { op, detail }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize), AutodiffError> {
    if t.shape().len() != 2 {
        return Err(mismatch(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

// out[m,n] += a[m,k] * b[k,n]
fn mm_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[m,n] += a[m,k] * b[n,k]^T
fn mm_nt_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            out[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

// out[k,n] += a[m,k]^T * b[m,n]
fn mm_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
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

    /// Drops every node created after the graph had `len` nodes.
    ///
    /// Vars issued after that point become invalid.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    /// Leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient storage.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch(op, format!("{:?} vs {:?}", sa, sb)));
        }
        Ok(())
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, AutodiffError> {
        self.same_shape(name, a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let va = self.value(a);
        let data = va.data().iter().map(|&x| f(x)).collect();
        let out = Tensor::new(va.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(out, op, rg)
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(mismatch("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        mm_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMul(a, b), rg))
    }

    /// `[m,k] x [n,k]^T -> [m,n]`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = matrix_dims("matmul_nt", self.value(a))?;
        let (n, k2) = matrix_dims("matmul_nt", self.value(b))?;
        if k != k2 {
            return Err(mismatch("matmul_nt", format!("[{m}, {k}] x [{n}, {k2}]^T")));
        }
        let mut out = vec![0.0; m * n];
        mm_nt_acc(&mut out, self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (m, n) = matrix_dims("transpose", self.value(a))?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a length-`n` vector to every row of an `[m,n]` matrix.
    pub fn add_row_broadcast(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        let (m, n) = matrix_dims("add_row_broadcast", self.value(a))?;
        if self.value(row).len() != n {
            return Err(mismatch(
                "add_row_broadcast",
                format!("row of {} values for {} columns", self.value(row).len(), n),
            ));
        }
        let bias = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for i in 0..m {
            for (o, b) in out[i * n..(i + 1) * n].iter_mut().zip(bias) {
                *o += b;
            }
        }
        let rg = self.any_grad(&[a, row]);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::AddRowBroadcast(a, row), rg))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, |x| x * factor, Op::Scale(a, factor))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(mismatch("mean", "mean of an empty tensor".into()));
        }
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// Maximum of each row; the gradient flows to the lowest-index maximiser.
    pub fn row_max(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (m, n) = matrix_dims("row_max", self.value(a))?;
        if n == 0 {
            return Err(mismatch("row_max", "matrix has no columns".into()));
        }
        let v = self.value(a);
        let mut argmax = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = v.row(i);
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            argmax.push(best);
            out.push(row[best]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::vector(out), Op::RowMax { input: a, argmax }, rg))
    }

    /// Maximum of each column; the gradient flows to the lowest-index maximiser.
    pub fn col_max(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (m, n) = matrix_dims("col_max", self.value(a))?;
        if m == 0 {
            return Err(mismatch("col_max", "matrix has no rows".into()));
        }
        let v = self.value(a).data();
        let mut argmax = vec![0usize; n];
        let mut out = v[..n].to_vec();
        for i in 1..m {
            for j in 0..n {
                if v[i * n + j] > out[j] {
                    out[j] = v[i * n + j];
                    argmax[j] = i;
                }
            }
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::vector(out), Op::ColMax { input: a, argmax }, rg))
    }

    fn rowwise(&self, a: Var, f: impl Fn(&[f64]) -> Vec<f64>) -> Tensor {
        let v = self.value(a);
        let cols = v.cols();
        let mut out = Vec::with_capacity(v.len());
        if cols > 0 {
            for row in v.data().chunks(cols) {
                out.extend(f(row));
            }
        }
        Tensor::new(v.shape().to_vec(), out).expect("row op keeps shape")
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let out = self.rowwise(a, softmax_kernel);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let out = self.rowwise(a, |row| {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter().map(|x| x - lse).collect()
        });
        let rg = self.any_grad(&[a]);
        self.push(out, Op::LogSoftmax(a), rg)
    }

    /// Euclidean projection of each row onto the probability simplex.
    pub fn sparsemax(&mut self, a: Var) -> Var {
        let out = self.rowwise(a, sparsemax_kernel);
        let rg = self.any_grad(&[a]);
        self.push(out, Op::Sparsemax(a), rg)
    }

    /// Row-wise Gumbel-Softmax of probability rows under fixed noise.
    ///
    /// The noise is a constant of the graph; only `probs` is differentiated.
    pub fn gumbel_softmax(&mut self, probs: Var, noise: &Tensor, tau: f64) -> Result<Var, AutodiffError> {
        if !(tau > 0.0) {
            return Err(AutodiffError::InvalidArgument {
                op: "gumbel_softmax",
                detail: format!("temperature must be positive, got {tau}"),
            });
        }
        let p = self.value(probs);
        if p.shape() != noise.shape() {
            return Err(mismatch("gumbel_softmax", format!("probs {:?} vs noise {:?}", p.shape(), noise.shape())));
        }
        let cols = p.cols();
        let mut out = Vec::with_capacity(p.len());
        if cols > 0 {
            for (row, g) in p.data().chunks(cols).zip(noise.data().chunks(cols)) {
                out.extend(gumbel_softmax_kernel(row, g, tau));
            }
        }
        let out = Tensor::new(p.shape().to_vec(), out)?;
        let rg = self.any_grad(&[probs]);
        Ok(self.push(out, Op::GumbelSoftmax { probs, tau }, rg))
    }

    /// Divides each row by its L2 norm, floored at [`NORM_FLOOR`].
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let cols = v.cols();
        let mut norms = Vec::with_capacity(v.rows());
        let mut out = Vec::with_capacity(v.len());
        if cols > 0 {
            for row in v.data().chunks(cols) {
                let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
                norms.push(norm);
                out.extend(row.iter().map(|x| x / norm));
            }
        }
        let out = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(out, Op::L2Normalize { input: a, norms }, rg)
    }

    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var) -> Result<Var, AutodiffError> {
        let (m, n) = matrix_dims("layer_norm", self.value(a))?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(mismatch(
                "layer_norm",
                format!("gain/bias of {}/{} values for width {}", self.value(gamma).len(), self.value(beta).len(), n),
            ));
        }
        let x = self.value(a).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normalized = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        let mut out = Vec::with_capacity(m * n);
        for row in x.chunks(n) {
            let mu = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (j, v) in row.iter().enumerate() {
                let xh = (v - mu) * is;
                normalized.push(xh);
                out.push(xh * g[j] + b[j]);
            }
        }
        let rg = self.any_grad(&[a, gamma, beta]);
        Ok(self.push(
            Tensor::matrix(m, n, out)?,
            Op::LayerNorm { input: a, gamma, beta, normalized, inv_std },
            rg,
        ))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let (rows, cols) = matrix_dims("gather_rows", self.value(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(AutodiffError::InvalidArgument {
                op: "gather_rows",
                detail: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(t.row(i));
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(Tensor::matrix(ids.len(), cols, out)?, Op::GatherRows { table, ids: ids.to_vec() }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (m, n) = matrix_dims("slice_rows", self.value(a))?;
        if start + len > m {
            return Err(mismatch("slice_rows", format!("rows {}..{} of {}", start, start + len, m)));
        }
        let out = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::matrix(len, n, out)?, Op::SliceRows { input: a, start }, rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (m, n) = matrix_dims("slice_cols", self.value(a))?;
        if start + len > n {
            return Err(mismatch("slice_cols", format!("columns {}..{} of {}", start, start + len, n)));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&v.row(i)[start..start + len]);
        }
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::matrix(m, len, out)?, Op::SliceCols { input: a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = *parts.first().ok_or_else(|| mismatch("concat_cols", "nothing to concatenate".into()))?;
        let (m, _) = matrix_dims("concat_cols", self.value(first))?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = matrix_dims("concat_cols", self.value(p))?;
            if pm != m {
                return Err(mismatch("concat_cols", format!("{pm} rows vs {m}")));
            }
            total += pn;
        }
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.any_grad(parts);
        Ok(self.push(Tensor::matrix(m, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Selects `a[i, ids[i]]` for every row, giving a length-`m` vector.
    pub fn pick_per_row(&mut self, a: Var, ids: &[usize]) -> Result<Var, AutodiffError> {
        let (m, n) = matrix_dims("pick_per_row", self.value(a))?;
        if ids.len() != m {
            return Err(mismatch("pick_per_row", format!("{} indices for {} rows", ids.len(), m)));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(AutodiffError::InvalidArgument {
                op: "pick_per_row",
                detail: format!("index {bad} out of range for {n} columns"),
            });
        }
        let v = self.value(a);
        let out = ids.iter().enumerate().map(|(i, &j)| v.get(i, j)).collect();
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::vector(out), Op::PickPerRow { input: a, ids: ids.to_vec() }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every leaf created with [`Graph::variable`] gets a gradient, zero if
    /// it does not reach the loss; constants get none.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(AutodiffError::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(up) = grads[i].take() else { continue };
            self.backprop_node(i, &up, &mut grads);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.len()]);
                    Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let buf = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(buf);
    }

    fn backprop_node(&self, i: usize, up: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[1];
                self.acc(grads, *a, |g| mm_nt_acc(g, up, vb.data(), m, n, k));
                self.acc(grads, *b, |g| mm_tn_acc(g, va.data(), up, m, k, n));
            }
            Op::MatMulNT(a, b) => {
                let va = self.value(*a);
                let vb = self.value(*b);
                let (m, k) = (va.shape()[0], va.shape()[1]);
                let n = vb.shape()[0];
                self.acc(grads, *a, |g| mm_acc(g, up, vb.data(), m, n, k));
                self.acc(grads, *b, |g| mm_tn_acc(g, up, va.data(), m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = (out.shape()[1], out.shape()[0]);
                self.acc(grads, *a, |g| {
                    for r in 0..m {
                        for c in 0..n {
                            g[r * n + c] += up[c * m + r];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |g| add_into(g, up));
                self.acc(grads, *b, |g| add_into(g, up));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |g| add_into(g, up));
                self.acc(grads, *b, |g| g.iter_mut().zip(up).for_each(|(x, u)| *x -= u));
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                self.acc(grads, *a, |g| {
                    for ((x, u), y) in g.iter_mut().zip(up).zip(vb) {
                        *x += u * y;
                    }
                });
                self.acc(grads, *b, |g| {
                    for ((x, u), y) in g.iter_mut().zip(up).zip(va) {
                        *x += u * y;
                    }
                });
            }
            Op::Div(a, b) => {
                let va = self.value(*a).data();
                let vb = self.value(*b).data();
                self.acc(grads, *a, |g| {
                    for ((x, u), y) in g.iter_mut().zip(up).zip(vb) {
                        *x += u / y;
                    }
                });
                self.acc(grads, *b, |g| {
                    for (((x, u), n), d) in g.iter_mut().zip(up).zip(va).zip(vb) {
                        *x -= u * n / (d * d);
                    }
                });
            }
            Op::AddRowBroadcast(a, row) => {
                self.acc(grads, *a, |g| add_into(g, up));
                let n = self.value(*row).len();
                self.acc(grads, *row, |g| {
                    for chunk in up.chunks(n) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::Scale(a, f) => {
                self.acc(grads, *a, |g| g.iter_mut().zip(up).for_each(|(x, u)| *x += u * f));
            }
            Op::Exp(a) => {
                self.acc(grads, *a, |g| {
                    for ((x, u), y) in g.iter_mut().zip(up).zip(out.data()) {
                        *x += u * y;
                    }
                });
            }
            Op::Log(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, |g| {
                    for ((x, u), y) in g.iter_mut().zip(up).zip(va) {
                        *x += u / y;
                    }
                });
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                self.acc(grads, *a, |g| {
                    for ((x, u), y) in g.iter_mut().zip(up).zip(va) {
                        if *y > 0.0 {
                            *x += u;
                        }
                    }
                });
            }
            Op::Sum(a) => {
                self.acc(grads, *a, |g| g.iter_mut().for_each(|x| *x += up[0]));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                self.acc(grads, *a, |g| g.iter_mut().for_each(|x| *x += up[0] / n));
            }
            Op::RowMax { input, argmax } => {
                let n = self.value(*input).cols();
                self.acc(grads, *input, |g| {
                    for (r, &j) in argmax.iter().enumerate() {
                        g[r * n + j] += up[r];
                    }
                });
            }
            Op::ColMax { input, argmax } => {
                let n = self.value(*input).cols();
                self.acc(grads, *input, |g| {
                    for (c, &r) in argmax.iter().enumerate() {
                        g[r * n + c] += up[c];
                    }
                });
            }
            Op::Softmax(a) => {
                let n = out.cols();
                self.acc(grads, *a, |g| {
                    for ((gr, ur), yr) in g.chunks_mut(n).zip(up.chunks(n)).zip(out.data().chunks(n)) {
                        let dot: f64 = ur.iter().zip(yr).map(|(u, y)| u * y).sum();
                        for ((x, u), y) in gr.iter_mut().zip(ur).zip(yr) {
                            *x += y * (u - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(a) => {
                let n = out.cols();
                self.acc(grads, *a, |g| {
                    for ((gr, ur), yr) in g.chunks_mut(n).zip(up.chunks(n)).zip(out.data().chunks(n)) {
                        let total: f64 = ur.iter().sum();
                        for ((x, u), y) in gr.iter_mut().zip(ur).zip(yr) {
                            *x += u - y.exp() * total;
                        }
                    }
                });
            }
            Op::Sparsemax(a) => {
                let n = out.cols();
                self.acc(grads, *a, |g| {
                    for ((gr, ur), yr) in g.chunks_mut(n).zip(up.chunks(n)).zip(out.data().chunks(n)) {
                        sparsemax_backward_acc(gr, yr, ur);
                    }
                });
            }
            Op::GumbelSoftmax { probs, tau } => {
                let n = out.cols();
                let p = self.value(*probs).data();
                self.acc(grads, *probs, |g| {
                    for (((gr, ur), yr), pr) in
                        g.chunks_mut(n).zip(up.chunks(n)).zip(out.data().chunks(n)).zip(p.chunks(n))
                    {
                        let dot: f64 = ur.iter().zip(yr).map(|(u, y)| u * y).sum();
                        for (((x, u), y), pi) in gr.iter_mut().zip(ur).zip(yr).zip(pr) {
                            if *pi > PROB_FLOOR {
                                *x += y * (u - dot) / (tau * pi);
                            }
                        }
                    }
                });
            }
            Op::L2Normalize { input, norms } => {
                let n = out.cols();
                let x = self.value(*input).data();
                self.acc(grads, *input, |g| {
                    for (r, &norm) in norms.iter().enumerate() {
                        let (gr, ur) = (&mut g[r * n..(r + 1) * n], &up[r * n..(r + 1) * n]);
                        let yr = &out.data()[r * n..(r + 1) * n];
                        let raw: f64 = x[r * n..(r + 1) * n].iter().map(|v| v * v).sum::<f64>().sqrt();
                        if raw > NORM_FLOOR {
                            let dot: f64 = ur.iter().zip(yr).map(|(u, y)| u * y).sum();
                            for ((gx, u), y) in gr.iter_mut().zip(ur).zip(yr) {
                                *gx += (u - y * dot) / norm;
                            }
                        } else {
                            for (gx, u) in gr.iter_mut().zip(ur) {
                                *gx += u / norm;
                            }
                        }
                    }
                });
            }
            Op::LayerNorm { input, gamma, beta, normalized, inv_std } => {
                let n = out.cols();
                let gv = self.value(*gamma).data();
                self.acc(grads, *gamma, |g| {
                    for (ur, xr) in up.chunks(n).zip(normalized.chunks(n)) {
                        for ((x, u), h) in g.iter_mut().zip(ur).zip(xr) {
                            *x += u * h;
                        }
                    }
                });
                self.acc(grads, *beta, |g| {
                    for ur in up.chunks(n) {
                        add_into(g, ur);
                    }
                });
                self.acc(grads, *input, |g| {
                    let nf = n as f64;
                    for (r, &is) in inv_std.iter().enumerate() {
                        let ur = &up[r * n..(r + 1) * n];
                        let xr = &normalized[r * n..(r + 1) * n];
                        let dxh: Vec<f64> = ur.iter().zip(gv).map(|(u, gm)| u * gm).collect();
                        let s1: f64 = dxh.iter().sum();
                        let s2: f64 = dxh.iter().zip(xr).map(|(d, h)| d * h).sum();
                        for j in 0..n {
                            g[r * n + j] += is / nf * (nf * dxh[j] - s1 - xr[j] * s2);
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let n = out.cols();
                self.acc(grads, *table, |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * n..(id + 1) * n], &up[r * n..(r + 1) * n]);
                    }
                });
            }
            Op::SliceRows { input, start } => {
                let n = out.cols();
                self.acc(grads, *input, |g| add_into(&mut g[start * n..start * n + up.len()], up));
            }
            Op::SliceCols { input, start } => {
                let len = out.cols();
                let n = self.value(*input).cols();
                self.acc(grads, *input, |g| {
                    for (r, ur) in up.chunks(len).enumerate() {
                        add_into(&mut g[r * n + start..r * n + start + len], ur);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |g| {
                        for (r, gr) in g.chunks_mut(w).enumerate() {
                            add_into(gr, &up[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::PickPerRow { input, ids } => {
                let n = self.value(*input).cols();
                self.acc(grads, *input, |g| {
                    for (r, &j) in ids.iter().enumerate() {
                        g[r * n + j] += up[r];
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

/// Jacobian-vector product of sparsemax: mean-centre the upstream gradient
/// over the support of `output`, zero elsewhere.
pub(crate) fn sparsemax_backward_acc(grad: &mut [f64], output: &[f64], upstream: &[f64]) {
    let (mut total, mut count) = (0.0, 0usize);
    for (y, u) in output.iter().zip(upstream) {
        if *y > 0.0 {
            total += u;
            count += 1;
        }
    }
    assert!(count > 0, "sparsemax output has empty support");
    let mean = total / count as f64;
    for ((g, y), u) in grad.iter_mut().zip(output).zip(upstream) {
        if *y > 0.0 {
            *g += u - mean;
        }
    }
}
