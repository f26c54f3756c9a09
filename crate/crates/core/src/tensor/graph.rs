use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::gemm;
use super::{shape_err, ParamId, ParamStore, Result, Tensor, TensorError};

/// Handle to a node recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm { x: Var, inv_std: Vec<f64> },
    Embedding { table: Var, indices: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    MaskedFill { x: Var, mask: Vec<bool> },
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    GatherCols { x: Var, indices: Vec<usize> },
}

#[derive(Debug)]
struct Node<'s> {
    value: Cow<'s, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A recorded forward computation. Build one per step; call
/// [`Graph::backward`] on a scalar node to obtain gradients.
#[derive(Debug, Default)]
pub struct Graph<'s> {
    store: Option<&'s ParamStore>,
    nodes: Vec<Node<'s>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'s> Graph<'s> {
    /// A graph without parameters; only constants and inputs.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Self { store: Some(store), nodes: Vec::new(), param_vars: HashMap::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, value: Tensor, op: Op, rg: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite(name));
        }
        Ok(self.push(value, op, rg))
    }

    fn rg(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn d2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2().map_err(|_| shape_err(op, format!("expected matrix, got {:?}", self.value(v).shape())))
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives gradients (used by gradient checks on inputs).
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Pulls a parameter into the graph, reusing the node if already present.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph created without a parameter store");
        self.nodes.push(Node { value: Cow::Borrowed(store.value(id)), op: Op::Param, requires_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.d2(a, "matmul")?;
        let (k2, n) = self.d2(b, "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", format!("{m}x{k} · {k2}x{n}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        self.push_checked("matmul", Tensor::matrix(m, n, out), Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.d2(a, "matmul_t")?;
        let (n, k2) = self.d2(b, "matmul_t")?;
        if k != k2 {
            return Err(shape_err("matmul_t", format!("{m}x{k} · ({n}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), true, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        self.push_checked("matmul_t", Tensor::matrix(m, n, out), Op::MatMulT(a, b), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let t = Tensor { shape: x.shape().to_vec(), data };
        let rg = self.rg(&[a, b]);
        self.push_checked(name, t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |p, q| p * q)
    }

    fn row_check(&self, a: Var, r: Var, op: &'static str) -> Result<usize> {
        let (_, n) = self.d2(a, op)?;
        if self.value(r).shape() != [1, n] {
            return Err(shape_err(op, format!("row operand {:?} for {n} columns", self.value(r).shape())));
        }
        Ok(n)
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.row_check(a, bias, "add_row")?;
        let b = self.value(bias).data().to_vec();
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(&b) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, bias]);
        self.push_checked("add_row", t, Op::AddRow(a, bias), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var> {
        let n = self.row_check(a, gain, "mul_row")?;
        let g = self.value(gain).data().to_vec();
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(&g) {
                *x *= y;
            }
        }
        let rg = self.rg(&[a, gain]);
        self.push_checked("mul_row", t, Op::MulRow(a, gain), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x *= s);
        let rg = self.rg(&[a]);
        self.push_checked("scale", t, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x += s);
        let rg = self.rg(&[a]);
        self.push_checked("add_scalar", t, Op::AddScalar(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut t = self.value(a).clone();
        t.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        let rg = self.rg(&[a]);
        self.push_checked("relu", t, Op::Relu(a), rg)
    }

    /// Row-wise softmax. A row whose entries are all `-inf` is an error.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.d2(a, "softmax")?;
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(TensorError::NonFinite("softmax (fully masked row)"));
            }
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            row.iter_mut().for_each(|x| *x /= s);
        }
        let rg = self.rg(&[a]);
        self.push_checked("softmax", t, Op::Softmax(a), rg)
    }

    /// Row-wise log-softmax. Masked (`-inf`) inputs stay `-inf`.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (_, n) = self.d2(a, "log_softmax")?;
        let mut t = self.value(a).clone();
        for row in t.data_mut().chunks_mut(n) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                return Err(TensorError::NonFinite("log_softmax (fully masked row)"));
            }
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        if t.data().iter().any(|x| x.is_nan() || *x == f64::INFINITY) {
            return Err(TensorError::NonFinite("log_softmax"));
        }
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::LogSoftmax(a), rg))
    }

    /// Normalises each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let (r, n) = self.d2(a, "layer_norm")?;
        let mut t = self.value(a).clone();
        let mut inv_std = Vec::with_capacity(r);
        for row in t.data_mut().chunks_mut(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        self.push_checked("layer_norm", t, Op::LayerNorm { x: a, inv_std }, rg)
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (size, e) = self.d2(table, "embedding")?;
        if indices.is_empty() {
            return Err(shape_err("embedding", "no indices"));
        }
        let tv = self.value(table);
        let mut data = Vec::with_capacity(indices.len() * e);
        for &i in indices {
            if i >= size {
                return Err(TensorError::IndexOutOfVocabulary { index: i, size });
            }
            data.extend_from_slice(tv.row(i));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::matrix(indices.len(), e, data),
            Op::Embedding { table, indices: indices.to_vec() },
            rg,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat_cols", "empty"))?;
        let (r, _) = self.d2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.d2(p, "concat_cols")?;
            if pr != r {
                return Err(shape_err("concat_cols", format!("row counts {r} vs {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(r, total, data), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| shape_err("concat_rows", "empty"))?;
        let (_, c) = self.d2(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.d2(p, "concat_rows")?;
            if pc != c {
                return Err(shape_err("concat_rows", format!("column counts {c} vs {pc}")));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = self.rg(parts);
        Ok(self.push(Tensor::matrix(rows, c, data), Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.d2(a, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(shape_err("slice_cols", format!("[{start}, {}) of {c}", start + len)));
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&v.row(i)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(r, len, data), Op::SliceCols { x: a, start }, rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.d2(a, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(shape_err("slice_rows", format!("[{start}, {}) of {r}", start + len)));
        }
        let data = self.value(a).data()[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::matrix(len, c, data), Op::SliceRows { x: a, start }, rg))
    }

    /// Sets `a[i] = -inf` wherever `mask[i]` is true (row-major over `a`).
    pub fn masked_fill(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let n = self.value(a).numel();
        if mask.len() != n {
            return Err(shape_err("masked_fill", format!("mask of {} for {n} values", mask.len())));
        }
        let mut t = self.value(a).clone();
        for (x, &m) in t.data_mut().iter_mut().zip(mask) {
            if m {
                *x = f64::NEG_INFINITY;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::MaskedFill { x: a, mask: mask.to_vec() }, rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.numel() as f64;
        let rg = self.rg(&[a]);
        self.push_checked("mean", Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Column means: `r×n -> 1×n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, n) = self.d2(a, "mean_rows")?;
        let mut out = vec![0.0; n];
        for row in self.value(a).data().chunks(n) {
            for (o, x) in out.iter_mut().zip(row) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= r as f64);
        let rg = self.rg(&[a]);
        self.push_checked("mean_rows", Tensor::row_vector(out), Op::MeanRows(a), rg)
    }

    /// Picks `a[i, indices[i]]` for every row: `r×n -> r×1`.
    pub fn gather_cols(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (r, n) = self.d2(a, "gather_cols")?;
        if indices.len() != r {
            return Err(shape_err("gather_cols", format!("{} indices for {r} rows", indices.len())));
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(r);
        for (i, &j) in indices.iter().enumerate() {
            if j >= n {
                return Err(TensorError::IndexOutOfVocabulary { index: j, size: n });
            }
            out.push(v.get(i, j));
        }
        let rg = self.rg(&[a]);
        self.push_checked("gather_cols", Tensor::column_vector(out), Op::GatherCols { x: a, indices: indices.to_vec() }, rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lt.shape()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let params = self.param_vars.iter().map(|(&p, &v)| (p, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node<'s>, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).cols();
                if wants(*a) {
                    // dA = dC · Bᵀ
                    self.acc_with(grads, *a, |out, beta| gemm(m, n, k, g.data(), false, val(*b).data(), true, out, beta));
                }
                if wants(*b) {
                    // dB = Aᵀ · dC
                    self.acc_with(grads, *b, |out, beta| gemm(k, m, n, val(*a).data(), true, g.data(), false, out, beta));
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = val(*a).dims2().unwrap();
                let n = val(*b).rows();
                if wants(*a) {
                    // dA = dC · B
                    self.acc_with(grads, *a, |out, beta| gemm(m, n, k, g.data(), false, val(*b).data(), false, out, beta));
                }
                if wants(*b) {
                    // dB = dCᵀ · A
                    self.acc_with(grads, *b, |out, beta| gemm(n, m, k, g.data(), true, val(*a).data(), false, out, beta));
                }
            }
            Op::Transpose(a) => {
                if wants(*a) {
                    accumulate(grads, *a, g.transpose().unwrap());
                }
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*b) {
                    accumulate(grads, *b, map(g, |x| -x));
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    accumulate(grads, *a, zip(g, val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    accumulate(grads, *b, zip(g, val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, bias) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if wants(*bias) {
                    accumulate(grads, *bias, col_sums(g));
                }
            }
            Op::MulRow(a, gain) => {
                let n = g.cols();
                if wants(*a) {
                    let gv = val(*gain).data();
                    let mut t = g.clone();
                    for row in t.data_mut().chunks_mut(n) {
                        row.iter_mut().zip(gv).for_each(|(x, y)| *x *= y);
                    }
                    accumulate(grads, *a, t);
                }
                if wants(*gain) {
                    accumulate(grads, *gain, col_sums(&zip(g, val(*a), |x, y| x * y)));
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    accumulate(grads, *a, map(g, |x| x * s));
                }
            }
            Op::AddScalar(a) => {
                if wants(*a) {
                    accumulate(grads, *a, g.clone());
                }
            }
            Op::Relu(a) => {
                if wants(*a) {
                    accumulate(grads, *a, zip(g, val(*a), |x, y| if y > 0.0 { x } else { 0.0 }));
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let y = &node.value;
                    let n = y.cols();
                    let mut t = g.clone();
                    for (trow, yrow) in t.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                        let dot: f64 = trow.iter().zip(yrow).map(|(d, p)| d * p).sum();
                        trow.iter_mut().zip(yrow).for_each(|(d, p)| *d = p * (*d - dot));
                    }
                    accumulate(grads, *a, t);
                }
            }
            Op::LogSoftmax(a) => {
                if wants(*a) {
                    let y = &node.value;
                    let n = y.cols();
                    let mut t = g.clone();
                    for (trow, yrow) in t.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                        let s: f64 = trow.iter().sum();
                        trow.iter_mut().zip(yrow).for_each(|(d, ly)| *d -= ly.exp() * s);
                    }
                    accumulate(grads, *a, t);
                }
            }
            Op::LayerNorm { x, inv_std } => {
                if wants(*x) {
                    let y = &node.value;
                    let n = y.cols();
                    let mut t = g.clone();
                    for ((trow, yrow), is) in t.data_mut().chunks_mut(n).zip(y.data().chunks(n)).zip(inv_std) {
                        let mg = trow.iter().sum::<f64>() / n as f64;
                        let mgy = trow.iter().zip(yrow).map(|(d, h)| d * h).sum::<f64>() / n as f64;
                        trow.iter_mut().zip(yrow).for_each(|(d, h)| *d = is * (*d - mg - h * mgy));
                    }
                    accumulate(grads, *x, t);
                }
            }
            Op::Embedding { table, indices } => {
                if wants(*table) {
                    let shape = val(*table).shape().to_vec();
                    let e = shape[1];
                    let slot = grads[table.0].get_or_insert_with(|| Tensor::zeros(&shape));
                    for (r, &i) in indices.iter().enumerate() {
                        let src = &g.data()[r * e..(r + 1) * e];
                        slot.data_mut()[i * e..(i + 1) * e].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let r = g.rows();
                let total = g.cols();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if wants(p) {
                        let mut data = Vec::with_capacity(r * w);
                        for i in 0..r {
                            data.extend_from_slice(&g.data()[i * total + off..i * total + off + w]);
                        }
                        accumulate(grads, p, Tensor::matrix(r, w, data));
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let c = g.cols();
                let mut off = 0;
                for &p in parts {
                    let h = val(p).rows();
                    if wants(p) {
                        accumulate(grads, p, Tensor::matrix(h, c, g.data()[off * c..(off + h) * c].to_vec()));
                    }
                    off += h;
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let shape = val(*x).shape().to_vec();
                    let (r, c) = (shape[0], shape[1]);
                    let w = g.cols();
                    let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(&shape));
                    for i in 0..r {
                        let dst = &mut slot.data_mut()[i * c + start..i * c + start + w];
                        dst.iter_mut().zip(g.row(i)).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                if wants(*x) {
                    let shape = val(*x).shape().to_vec();
                    let c = shape[1];
                    let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(&shape));
                    let dst = &mut slot.data_mut()[start * c..start * c + g.numel()];
                    dst.iter_mut().zip(g.data()).for_each(|(d, s)| *d += s);
                }
            }
            Op::MaskedFill { x, mask } => {
                if wants(*x) {
                    let mut t = g.clone();
                    t.data_mut().iter_mut().zip(mask).for_each(|(d, &m)| {
                        if m {
                            *d = 0.0;
                        }
                    });
                    accumulate(grads, *x, t);
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    accumulate(grads, *a, Tensor::filled(val(*a).shape(), g.item()));
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let n = val(*a).numel() as f64;
                    accumulate(grads, *a, Tensor::filled(val(*a).shape(), g.item() / n));
                }
            }
            Op::MeanRows(a) => {
                if wants(*a) {
                    let (r, n) = val(*a).dims2().unwrap();
                    let row: Vec<f64> = g.data().iter().map(|x| x / r as f64).collect();
                    let data = (0..r).flat_map(|_| row.iter().copied()).collect();
                    accumulate(grads, *a, Tensor::matrix(r, n, data));
                }
            }
            Op::GatherCols { x, indices } => {
                if wants(*x) {
                    let shape = val(*x).shape().to_vec();
                    let n = shape[1];
                    let slot = grads[x.0].get_or_insert_with(|| Tensor::zeros(&shape));
                    for (i, &j) in indices.iter().enumerate() {
                        slot.data_mut()[i * n + j] += g.data()[i];
                    }
                }
            }
        }
    }

    fn acc_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64], f64)) {
        match &mut grads[v.0] {
            Some(t) => f(t.data_mut(), 1.0),
            slot @ None => {
                let mut t = Tensor::zeros(self.nodes[v.0].value.shape());
                f(t.data_mut(), 0.0);
                *slot = Some(t);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&t),
        slot @ None => *slot = Some(t),
    }
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { shape: t.shape().to_vec(), data: t.data().iter().map(|&x| f(x)).collect() }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor { shape: a.shape().to_vec(), data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect() }
}

fn col_sums(t: &Tensor) -> Tensor {
    let n = t.cols();
    let mut out = vec![0.0; n];
    for row in t.data().chunks(n) {
        out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
    }
    Tensor::row_vector(out)
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient with respect to any recorded node, if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.wrt(*v))
    }

    /// Adds every parameter gradient into the store's grad buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            if let Some(g) = self.wrt(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
    }
}
