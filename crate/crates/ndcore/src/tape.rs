use std::collections::{BTreeMap, HashMap};

use crate::error::{shape_err, NdError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    BroadcastRows(Var),
    Hadamard(Var, Var),
    Scale(Var, f32),
    AddConst(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    SoftmaxRows(Var),
    NormalizeRows(Var),
    LayerNormRows(Var),
    Embedding(Var, Vec<usize>),
    MeanRows(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore: Option<usize>,
        count: usize,
    },
    BceLogits {
        logits: Var,
        targets: Vec<f32>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    // Op-specific saved state (softmax probabilities, inverse std, ...).
    aux: Option<Tensor>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    by_var: Vec<Option<Tensor>>,
    by_param: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.by_var.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.by_param.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.by_param.iter().map(|(k, v)| (*k, v))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.by_param
    }
}

/// Dynamic reverse-mode tape. The graph is rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    loaded: HashMap<ParamId, Var>,
    backpropagated: bool,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.loaded.clear();
        self.backpropagated = false;
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

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(self.value(v))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite output from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            aux: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_aux(&mut self, value: Tensor, op: Op, requires_grad: bool, aux: Tensor) -> Var {
        let v = self.push(value, op, requires_grad);
        self.nodes[v.0].aux = Some(aux);
        v
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Untracked input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Tracked input whose gradient is reported in [`Gradients::wrt`].
    pub fn var(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Loads a parameter; repeated loads on one tape share a node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.loaded.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.tensor.clone(), Op::Param(id), p.trainable);
        self.loaded.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return shape_err("matmul", format!("{m}x{k} · {k2}x{n}"));
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(m, n, out), Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (n, k2) = self.shape(b);
        if k != k2 {
            return shape_err("matmul_nt", format!("{m}x{k} · ({n}x{k2})ᵀ"));
        }
        let mut out = vec![0.0; m * n];
        gemm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(m, n, out), Op::MatMulNt(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let t = transpose(self.value(a));
        let rg = self.rg(a);
        self.push(t, Op::Transpose(a), rg)
    }

    fn zip_same(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let (m, n) = self.shape(a);
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(Tensor::from_parts(m, n, data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "hadamard", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Hadamard(a, b), rg))
    }

    fn check_row(&self, a: Var, row: Var, op: &'static str) -> Result<(usize, usize)> {
        let (m, n) = self.shape(a);
        let (r, c) = self.shape(row);
        if r != 1 || c != n {
            return shape_err(op, format!("{m}x{n} with row {r}x{c}"));
        }
        Ok((m, n))
    }

    /// `a + 1 ⊗ row` (bias broadcast over rows).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.check_row(a, row, "add_row")?;
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(r) {
                *x += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::from_parts(m, n, data), Op::AddRow(a, row), rg))
    }

    /// `a ⊙ (1 ⊗ row)`: scales column `j` of `a` by `row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.check_row(a, row, "mul_row")?;
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (x, &b) in chunk.iter_mut().zip(r) {
                *x *= b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        Ok(self.push(Tensor::from_parts(m, n, data), Op::MulRow(a, row), rg))
    }

    /// `1_{m×1} ⊗ row`: stacks a `1 × n` row `m` times.
    pub fn broadcast_rows(&mut self, row: Var, m: usize) -> Result<Var> {
        let (r, n) = self.shape(row);
        if r != 1 {
            return shape_err("broadcast_rows", format!("expected a row, got {r}x{n}"));
        }
        if m == 0 {
            return Err(NdError::Empty("broadcast_rows"));
        }
        let src = self.value(row).data();
        let data = (0..m).flat_map(|_| src.iter().copied()).collect();
        let rg = self.rg(row);
        Ok(self.push(Tensor::from_parts(m, n, data), Op::BroadcastRows(row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let (m, n) = self.shape(a);
        let data = self.value(a).data().iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        self.push(Tensor::from_parts(m, n, data), Op::Scale(a, s), rg)
    }

    /// Adds an untracked tensor, e.g. an additive attention mask.
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let (m, n) = self.shape(a);
        if dims(c) != (m, n) {
            return shape_err("add_const", format!("{m}x{n} vs {:?}", dims(c)));
        }
        let data = self.value(a).data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(m, n, data), Op::AddConst(a), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(NdError::Empty("concat_cols"));
        };
        let m = self.shape(first).0;
        if parts.iter().any(|&p| self.shape(p).0 != m) {
            return shape_err("concat_cols", "row counts differ");
        }
        let n: usize = parts.iter().map(|&p| self.shape(p).1).sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(m, n, data), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(NdError::Empty("concat_rows"));
        };
        let n = self.shape(first).1;
        if parts.iter().any(|&p| self.shape(p).1 != n) {
            return shape_err("concat_rows", "column counts differ");
        }
        let m: usize = parts.iter().map(|&p| self.shape(p).0).sum();
        let mut data = Vec::with_capacity(m * n);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::from_parts(m, n, data), Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start >= end || end > n {
            return shape_err("slice_cols", format!("{start}..{end} of {n} columns"));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&self.value(a).row_slice(r)[start..end]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(m, w, data), Op::SliceCols(a, start), rg))
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.shape(a);
        if start >= end || end > m {
            return shape_err("slice_rows", format!("{start}..{end} of {m} rows"));
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(end - start, n, data), Op::SliceRows(a, start), rg))
    }

    fn map(&mut self, a: Var, f: impl Fn(f32) -> f32) -> Tensor {
        let (m, n) = self.shape(a);
        Tensor::from_parts(m, n, self.value(a).data().iter().map(|&x| f(x)).collect())
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.map(a, sigmoid);
        let rg = self.rg(a);
        self.push(t, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.map(a, f32::tanh);
        let rg = self.rg(a);
        self.push(t, Op::Tanh(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.map(a, |x| x.max(0.0));
        let rg = self.rg(a);
        self.push(t, Op::Relu(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.value(a).require_nonempty("softmax_rows")?;
        let (m, n) = self.shape(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(m, n, data), Op::SoftmaxRows(a), rg))
    }

    /// Divides each row by its sum. Rows must have a positive sum.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        self.value(a).require_nonempty("normalize_rows")?;
        let (m, n) = self.shape(a);
        let mut data = self.value(a).data().to_vec();
        for row in data.chunks_mut(n) {
            let s: f32 = row.iter().sum::<f32>().max(f32::MIN_POSITIVE);
            row.iter_mut().for_each(|x| *x /= s);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(m, n, data), Op::NormalizeRows(a), rg))
    }

    /// Per-row standardization `(x − mean) / sqrt(var + 1e-5)` without affine terms.
    pub fn layer_norm_rows(&mut self, a: Var) -> Result<Var> {
        self.value(a).require_nonempty("layer_norm_rows")?;
        let (m, n) = self.shape(a);
        let mut data = self.value(a).data().to_vec();
        let mut inv_std = Vec::with_capacity(m);
        for row in data.chunks_mut(n) {
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f32>() / n as f32;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row.iter_mut().for_each(|x| *x = (*x - mean) * is);
            inv_std.push(is);
        }
        let rg = self.rg(a);
        Ok(self.push_aux(
            Tensor::from_parts(m, n, data),
            Op::LayerNormRows(a),
            rg,
            Tensor::from_parts(m, 1, inv_std),
        ))
    }

    /// Gathers rows of `table` by index.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.shape(table);
        if ids.is_empty() {
            return Err(NdError::Empty("embedding"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return shape_err("embedding", format!("row {bad} out of {rows}"));
        }
        let mut data = Vec::with_capacity(ids.len() * n);
        for &i in ids {
            data.extend_from_slice(self.value(table).row_slice(i));
        }
        let rg = self.rg(table);
        Ok(self.push(Tensor::from_parts(ids.len(), n, data), Op::Embedding(table, ids.to_vec()), rg))
    }

    /// Column means, `1 × n`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        self.value(a).require_nonempty("mean_rows")?;
        let (m, n) = self.shape(a);
        let mut out = vec![0.0; n];
        for r in 0..m {
            for (o, &x) in out.iter_mut().zip(self.value(a).row_slice(r)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= m as f32);
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(1, n, out), Op::MeanRows(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        if n == 0 {
            return Err(NdError::Empty("mean"));
        }
        let s = self.sum(a);
        Ok(self.scale(s, 1.0 / n as f32))
    }

    /// Mean negative log-softmax over rows whose target is not `ignore`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore: Option<usize>) -> Result<Var> {
        let (m, c) = self.shape(logits);
        if targets.len() != m {
            return shape_err("cross_entropy", format!("{m} rows, {} targets", targets.len()));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let t = targets[r];
            let logz = log_sum_exp(row);
            if Some(t) != ignore {
                if t >= c {
                    return Err(NdError::TargetOutOfRange { target: t, classes: c });
                }
                total += f64::from(logz - row[t]);
                count += 1;
            }
            row.iter_mut().for_each(|x| *x = (*x - logz).exp());
        }
        if count == 0 {
            return Err(NdError::AllIgnored);
        }
        let loss = (total / count as f64) as f32;
        let rg = self.rg(logits);
        Ok(self.push_aux(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore,
                count,
            },
            rg,
            Tensor::from_parts(m, c, probs),
        ))
    }

    /// Mean binary cross-entropy between `sigmoid(logits)` and `targets ∈ [0, 1]`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f32]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != targets.len() {
            return shape_err("bce_with_logits", format!("{} logits, {} targets", z.len(), targets.len()));
        }
        if z.is_empty() {
            return Err(NdError::Empty("bce_with_logits"));
        }
        let total: f64 = z
            .iter()
            .zip(targets)
            .map(|(&z, &y)| f64::from(z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()))
            .sum();
        let loss = (total / z.len() as f64) as f32;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. A tape may be differentiated once;
    /// call [`Tape::reset`] before reuse.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backpropagated {
            return Err(NdError::AlreadyBackpropagated);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(NdError::NonScalarLoss(lv.shape().to_vec()));
        }
        self.backpropagated = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::from_parts(1, 1, vec![1.0]));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let mut by_param = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads[i] {
                    by_param.insert(id, g.clone());
                }
            }
        }
        Ok(Gradients { by_var: grads, by_param })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).1;
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt_acc(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn_acc(self.value(*a).data(), gd, &mut db, m, k, n);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = self.shape(*a);
                let n = self.shape(*b).0;
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_acc(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; n * k];
                    gemm_tn_acc(gd, self.value(*a).data(), &mut db, m, n, k);
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, transpose(g).into_data());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|x| -x).collect());
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, gd.to_vec());
                if self.rg(*row) {
                    self.accumulate(grads, *row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let n = g.cols();
                let r = self.value(*row).data();
                if self.rg(*a) {
                    let da = gd.iter().enumerate().map(|(idx, &x)| x * r[idx % n]).collect();
                    self.accumulate(grads, *a, da);
                }
                if self.rg(*row) {
                    let av = self.value(*a).data();
                    let mut dr = vec![0.0; n];
                    for (idx, (&x, &ai)) in gd.iter().zip(av).enumerate() {
                        dr[idx % n] += x * ai;
                    }
                    self.accumulate(grads, *row, dr);
                }
            }
            Op::BroadcastRows(row) => {
                self.accumulate(grads, *row, column_sums(g));
            }
            Op::Hadamard(a, b) => {
                if self.rg(*a) {
                    let bv = self.value(*b).data();
                    self.accumulate(grads, *a, gd.iter().zip(bv).map(|(x, y)| x * y).collect());
                }
                if self.rg(*b) {
                    let av = self.value(*a).data();
                    self.accumulate(grads, *b, gd.iter().zip(av).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, gd.iter().map(|x| x * s).collect());
            }
            Op::AddConst(a) => {
                self.accumulate(grads, *a, gd.to_vec());
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                let n = g.cols();
                for &p in parts {
                    let (m, w) = self.shape(p);
                    if self.rg(p) {
                        let mut dp = Vec::with_capacity(m * w);
                        for r in 0..m {
                            dp.extend_from_slice(&gd[r * n + offset..r * n + offset + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    self.accumulate(grads, p, gd[offset..offset + len].to_vec());
                    offset += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.shape(*a);
                let w = g.cols();
                let mut da = vec![0.0; m * n];
                for r in 0..m {
                    da[r * n + start..r * n + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                self.accumulate(grads, *a, da);
            }
            Op::SliceRows(a, start) => {
                let (m, n) = self.shape(*a);
                let mut da = vec![0.0; m * n];
                da[start * n..start * n + gd.len()].copy_from_slice(gd);
                self.accumulate(grads, *a, da);
            }
            Op::Sigmoid(a) => {
                let da = gd.iter().zip(y.data()).map(|(x, s)| x * s * (1.0 - s)).collect();
                self.accumulate(grads, *a, da);
            }
            Op::Tanh(a) => {
                let da = gd.iter().zip(y.data()).map(|(x, t)| x * (1.0 - t * t)).collect();
                self.accumulate(grads, *a, da);
            }
            Op::Relu(a) => {
                let da = gd
                    .iter()
                    .zip(y.data())
                    .map(|(&x, &o)| if o > 0.0 { x } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, da);
            }
            Op::SoftmaxRows(a) => {
                let n = y.cols();
                let mut da = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(n).zip(y.data().chunks(n)) {
                    let s = dot(grow, yrow);
                    da.extend(grow.iter().zip(yrow).map(|(gx, yx)| yx * (gx - s)));
                }
                self.accumulate(grads, *a, da);
            }
            Op::NormalizeRows(a) => {
                let n = y.cols();
                let av = self.value(*a).data();
                let mut da = Vec::with_capacity(gd.len());
                for ((grow, yrow), arow) in gd.chunks(n).zip(y.data().chunks(n)).zip(av.chunks(n)) {
                    let s: f32 = arow.iter().sum::<f32>().max(f32::MIN_POSITIVE);
                    let gy = dot(grow, yrow);
                    da.extend(grow.iter().map(|gx| (gx - gy) / s));
                }
                self.accumulate(grads, *a, da);
            }
            Op::LayerNormRows(a) => {
                let n = y.cols();
                let inv_std = node.aux.as_ref().expect("layer norm saves inverse std").data();
                let mut da = Vec::with_capacity(gd.len());
                for (r, (grow, xhat)) in gd.chunks(n).zip(y.data().chunks(n)).enumerate() {
                    let mean_g = grow.iter().sum::<f32>() / n as f32;
                    let mean_gx = dot(grow, xhat) / n as f32;
                    da.extend(
                        grow.iter()
                            .zip(xhat)
                            .map(|(gx, xh)| inv_std[r] * (gx - mean_g - xh * mean_gx)),
                    );
                }
                self.accumulate(grads, *a, da);
            }
            Op::Embedding(table, ids) => {
                let (rows, n) = self.shape(*table);
                let mut dt = vec![0.0; rows * n];
                for (r, &id) in ids.iter().enumerate() {
                    for (d, &x) in dt[id * n..(id + 1) * n].iter_mut().zip(&gd[r * n..(r + 1) * n]) {
                        *d += x;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::MeanRows(a) => {
                let (m, n) = self.shape(*a);
                let inv = 1.0 / m as f32;
                let da = (0..m * n).map(|idx| gd[idx % n] * inv).collect();
                self.accumulate(grads, *a, da);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![gd[0]; n]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                ignore,
                count,
            } => {
                let probs = node.aux.as_ref().expect("cross entropy saves probabilities");
                let c = probs.cols();
                let scale = gd[0] / *count as f32;
                let mut dl = vec![0.0; probs.numel()];
                for (r, &t) in targets.iter().enumerate() {
                    if Some(t) == *ignore {
                        continue;
                    }
                    let row = &mut dl[r * c..(r + 1) * c];
                    for (d, &p) in row.iter_mut().zip(probs.row_slice(r)) {
                        *d = p * scale;
                    }
                    row[t] -= scale;
                }
                self.accumulate(grads, *logits, dl);
            }
            Op::BceLogits { logits, targets } => {
                let z = self.value(*logits).data();
                let scale = gd[0] / z.len() as f32;
                let dz = z.iter().zip(targets).map(|(&z, &t)| (sigmoid(z) - t) * scale).collect();
                self.accumulate(grads, *logits, dz);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Vec<f32>) {
        if !self.rg(v) {
            return;
        }
        let (m, n) = self.shape(v);
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(&delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(Tensor::from_parts(m, n, delta)),
        }
    }
}

const LN_EPS: f32 = 1e-5;

pub fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let s: f32 = row.iter().map(|x| (x - max).exp()).sum();
    max + s.ln()
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut s = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        s += *x;
    }
    row.iter_mut().for_each(|x| *x /= s);
}

fn column_sums(g: &Tensor) -> Vec<f32> {
    let n = g.cols();
    let mut out = vec![0.0; n];
    for row in g.data().chunks(n) {
        for (o, x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    out
}

fn transpose(t: &Tensor) -> Tensor {
    let (m, n) = dims(t);
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = t.data()[r * n + c];
        }
    }
    Tensor::from_parts(n, m, out)
}
