//! Define-by-run reverse-mode differentiation over matrices.
//!
//! A `Graph` is a tape of nodes rebuilt for every forward pass (sequence
//! lengths vary per instance). Persistent model parameters live in a
//! [`ParamStore`]; inserting the same parameter name twice on one tape
//! returns the same node, so gradients from every use site accumulate into
//! one entry of the returned gradient map. `backward` walks the tape in
//! reverse and populates gradients for every named parameter, leaving zeros
//! for parameters the loss never touched.

use std::collections::BTreeMap;
use std::collections::HashMap;

use crate::error::AutodiffError;
use crate::matrix::{MaskMatrix, Matrix};

/// Named parameter values, ordered by name for reproducible iteration.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    map: BTreeMap<String, Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Matrix)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Matrix)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar coordinates across all parameters.
    pub fn coord_count(&self) -> usize {
        self.map.values().map(Matrix::len).sum()
    }
}

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Matrix>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Const,
    Param(String),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    SoftmaxRows { input: NodeId, diag_mask: bool },
    LayerNorm { input: NodeId, gain: NodeId, bias: NodeId, eps: f64 },
    ConcatCols(NodeId, NodeId),
    BroadcastRows(NodeId),
    SumRows(NodeId),
    SumAll(NodeId),
    ScaleRows { input: NodeId, weights: NodeId },
    GatherRows { table: NodeId, indices: Vec<usize> },
    ShiftRows { input: NodeId, offset: isize },
    NllFromLogits { logits: NodeId, labels: Vec<usize> },
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    // One leaf per parameter name per tape; reuse makes sharing accumulate.
    param_nodes: HashMap<String, NodeId>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Matrix, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { value, op });
        id
    }

    pub fn value(&self, id: NodeId) -> &Matrix {
        &self.nodes[id.0].value
    }

    /// Text grid of a node's value, for test diagnostics.
    pub fn dump(&self, id: NodeId) -> String {
        self.value(id).to_text_grid()
    }

    pub fn constant(&mut self, value: Matrix) -> NodeId {
        self.push(value, Op::Const)
    }

    /// Leaf node for a named parameter. The same name yields the same node
    /// within one tape.
    pub fn param(&mut self, name: &str, store: &ParamStore) -> Result<NodeId, AutodiffError> {
        if let Some(&id) = self.param_nodes.get(name) {
            return Ok(id);
        }
        let value = store
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParameter(name.to_string()))?
            .clone();
        let id = self.push(value, Op::Param(name.to_string()));
        self.param_nodes.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ac != br {
            return Err(AutodiffError::DimensionMismatch {
                op: "matmul",
                left_rows: ar,
                left_cols: ac,
                right_rows: br,
                right_cols: bc,
            });
        }
        let value = matmul_values(self.value(a), self.value(b));
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    /// Element-wise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.binary_elementwise("elementwise_mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId, AutodiffError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if (ar, ac) != (br, bc) {
            return Err(AutodiffError::DimensionMismatch {
                op: op_name,
                left_rows: ar,
                left_cols: ac,
                right_rows: br,
                right_cols: bc,
            });
        }
        let data: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Matrix::from_vec(ar, ac, data)?;
        Ok(self.push(value, op))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let mut value = self.value(a).clone();
        value.scale_assign(factor);
        self.push(value, Op::Scale(a, factor))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let data: Vec<f64> = v.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
        let value = Matrix::from_vec(v.rows(), v.cols(), data).expect("same shape");
        self.push(value, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let data: Vec<f64> = v.data().iter().map(|&x| x.tanh()).collect();
        let value = Matrix::from_vec(v.rows(), v.cols(), data).expect("same shape");
        self.push(value, Op::Tanh(a))
    }

    /// Row-wise softmax, optionally with the diagonal-disabled mask added to
    /// the scores first. Masked positions come out exactly 0; each row sums
    /// to 1. The max used for stabilization is taken over finite entries
    /// only, so exp(-inf) = 0 falls out directly.
    pub fn masked_softmax_rows(
        &mut self,
        scores: NodeId,
        mask: Option<&MaskMatrix>,
    ) -> Result<NodeId, AutodiffError> {
        let (rows, cols) = self.value(scores).shape();
        let diag_mask = match mask {
            Some(m) => {
                if m.size() != rows || m.size() != cols {
                    return Err(AutodiffError::MaskSizeMismatch { mask: m.size(), rows, cols });
                }
                true
            }
            None => false,
        };
        let value = softmax_rows_values(self.value(scores), diag_mask)?;
        Ok(self.push(value, Op::SoftmaxRows { input: scores, diag_mask }))
    }

    /// Per-row normalization: gain * (x - mean) / sqrt(var + eps) + bias,
    /// with population variance. gain and bias are 1 x cols.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        eps: f64,
    ) -> Result<NodeId, AutodiffError> {
        debug_assert!(eps > 0.0);
        let (rows, cols) = self.value(x).shape();
        for (name, id) in [("layer_norm gain", gain), ("layer_norm bias", bias)] {
            let (gr, gc) = self.value(id).shape();
            if (gr, gc) != (1, cols) {
                return Err(AutodiffError::DimensionMismatch {
                    op: if name.ends_with("gain") { "layer_norm gain" } else { "layer_norm bias" },
                    left_rows: rows,
                    left_cols: cols,
                    right_rows: gr,
                    right_cols: gc,
                });
            }
        }
        let value = layer_norm_values(self.value(x), self.value(gain), self.value(bias), eps);
        Ok(self.push(value, Op::LayerNorm { input: x, gain, bias, eps }))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (ar, ac) = self.value(a).shape();
        let (br, bc) = self.value(b).shape();
        if ar != br {
            return Err(AutodiffError::DimensionMismatch {
                op: "concat_cols",
                left_rows: ar,
                left_cols: ac,
                right_rows: br,
                right_cols: bc,
            });
        }
        let mut out = Matrix::zeros(ar, ac + bc);
        for r in 0..ar {
            for c in 0..ac {
                out.set(r, c, self.value(a).at(r, c));
            }
            for c in 0..bc {
                out.set(r, ac + c, self.value(b).at(r, c));
            }
        }
        Ok(self.push(out, Op::ConcatCols(a, b)))
    }

    /// Repeats a 1 x d row vector into rows x d.
    pub fn broadcast_rows(&mut self, v: NodeId, rows: usize) -> Result<NodeId, AutodiffError> {
        let (vr, vc) = self.value(v).shape();
        if vr != 1 {
            return Err(AutodiffError::DimensionMismatch {
                op: "broadcast_rows",
                left_rows: vr,
                left_cols: vc,
                right_rows: rows,
                right_cols: vc,
            });
        }
        let mut out = Matrix::zeros(rows, vc);
        for r in 0..rows {
            for c in 0..vc {
                out.set(r, c, self.value(v).at(0, c));
            }
        }
        Ok(self.push(out, Op::BroadcastRows(v)))
    }

    /// Column sums: L x d -> 1 x d, summed top to bottom.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let (rows, cols) = self.value(a).shape();
        let mut out = Matrix::zeros(1, cols);
        for c in 0..cols {
            let mut acc = 0.0;
            for r in 0..rows {
                acc += self.value(a).at(r, c);
            }
            out.set(0, c, acc);
        }
        self.push(out, Op::SumRows(a))
    }

    /// Sum of all entries -> 1 x 1, row-major order.
    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let total: f64 = self.value(a).data().iter().sum();
        self.push(Matrix::row(&[total]), Op::SumAll(a))
    }

    /// Scales each row of an L x d matrix by the matching entry of an
    /// L x 1 weight column.
    pub fn scale_rows(&mut self, input: NodeId, weights: NodeId) -> Result<NodeId, AutodiffError> {
        let (rows, cols) = self.value(input).shape();
        let (wr, wc) = self.value(weights).shape();
        if wr != rows || wc != 1 {
            return Err(AutodiffError::DimensionMismatch {
                op: "scale_rows",
                left_rows: rows,
                left_cols: cols,
                right_rows: wr,
                right_cols: wc,
            });
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let w = self.value(weights).at(r, 0);
            for c in 0..cols {
                out.set(r, c, self.value(input).at(r, c) * w);
            }
        }
        Ok(self.push(out, Op::ScaleRows { input, weights }))
    }

    /// Weighted sum over rows: weights may match the input shape
    /// (element-wise weights) or be an L x 1 column (one weight per row).
    /// Returns 1 x d.
    pub fn row_sum_weighted(&mut self, weights: NodeId, input: NodeId) -> Result<NodeId, AutodiffError> {
        let (rows, cols) = self.value(input).shape();
        let (wr, wc) = self.value(weights).shape();
        if (wr, wc) == (rows, cols) {
            let prod = self.mul(weights, input)?;
            Ok(self.sum_rows(prod))
        } else if (wr, wc) == (rows, 1) {
            let scaled = self.scale_rows(input, weights)?;
            Ok(self.sum_rows(scaled))
        } else {
            Err(AutodiffError::DimensionMismatch {
                op: "row_sum_weighted",
                left_rows: wr,
                left_cols: wc,
                right_rows: rows,
                right_cols: cols,
            })
        }
    }

    /// Embedding lookup: stacks table rows selected by `indices`.
    pub fn gather_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, AutodiffError> {
        let (rows, cols) = self.value(table).shape();
        for &i in indices {
            if i >= rows {
                return Err(AutodiffError::GatherOutOfRange { index: i, rows });
            }
        }
        let mut out = Matrix::zeros(indices.len(), cols);
        for (r, &i) in indices.iter().enumerate() {
            for c in 0..cols {
                out.set(r, c, self.value(table).at(i, c));
            }
        }
        Ok(self.push(out, Op::GatherRows { table, indices: indices.to_vec() }))
    }

    /// Shifts rows by `offset` with zero padding: out[l] = in[l + offset]
    /// where that index exists, zero elsewhere.
    pub fn shift_rows(&mut self, input: NodeId, offset: isize) -> NodeId {
        let (rows, cols) = self.value(input).shape();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let src = r as isize + offset;
            if src >= 0 && (src as usize) < rows {
                for c in 0..cols {
                    out.set(r, c, self.value(input).at(src as usize, c));
                }
            }
        }
        self.push(out, Op::ShiftRows { input, offset })
    }

    /// Mean negative log-likelihood of the gold labels under
    /// softmax(logits), computed through log-sum-exp so finite logits never
    /// produce NaN. logits: N x C, one label per row. Returns 1 x 1.
    pub fn nll_from_logits(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, AutodiffError> {
        let (rows, cols) = self.value(logits).shape();
        if labels.len() != rows {
            return Err(AutodiffError::LabelCountMismatch { expected: rows, got: labels.len() });
        }
        for &y in labels {
            if y >= cols {
                return Err(AutodiffError::LabelOutOfRange { label: y, classes: cols });
            }
        }
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = self.value(logits).row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = row.iter().map(|&v| (v - max).exp()).sum();
            total += max + sum_exp.ln() - row[y];
        }
        let value = Matrix::row(&[total / rows as f64]);
        Ok(self.push(value, Op::NllFromLogits { logits, labels: labels.to_vec() }))
    }

    /// Reverse pass from a 1 x 1 loss. Returns gradients for every named
    /// parameter on this tape; parameters the loss does not reach get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<GradMap, AutodiffError> {
        let (lr, lc) = self.value(loss).shape();
        if (lr, lc) != (1, 1) {
            return Err(AutodiffError::NonScalarLoss { rows: lr, cols: lc });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::row(&[1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(grad) = grads[idx].take() else { continue };
            self.propagate(idx, &grad, &mut grads);
            grads[idx] = Some(grad);
        }

        let mut map = GradMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(name) = &node.op {
                let g = match &grads[idx] {
                    Some(m) => m.clone(),
                    None => Matrix::zeros(node.value.rows(), node.value.cols()),
                };
                map.insert(name.clone(), g);
            }
        }
        Ok(map)
    }

    fn propagate(&self, idx: usize, grad: &Matrix, grads: &mut [Option<Matrix>]) {
        match &self.nodes[idx].op {
            Op::Const | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let da = matmul_values(grad, &self.value(*b).transpose());
                let db = matmul_values(&self.value(*a).transpose(), grad);
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Transpose(a) => {
                accumulate(grads, *a, grad.transpose());
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, grad.clone());
                accumulate(grads, *b, grad.clone());
            }
            Op::Mul(a, b) => {
                let da = hadamard(grad, self.value(*b));
                let db = hadamard(grad, self.value(*a));
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Scale(a, factor) => {
                let mut da = grad.clone();
                da.scale_assign(*factor);
                accumulate(grads, *a, da);
            }
            Op::Relu(a) => {
                let input = self.value(*a);
                let mut da = grad.clone();
                for (g, &x) in da.data_mut().iter_mut().zip(input.data().iter()) {
                    if x <= 0.0 {
                        *g = 0.0;
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let mut da = grad.clone();
                for (g, &t) in da.data_mut().iter_mut().zip(y.data().iter()) {
                    *g *= 1.0 - t * t;
                }
                accumulate(grads, *a, da);
            }
            Op::SoftmaxRows { input, diag_mask } => {
                let y = &self.nodes[idx].value;
                let (rows, cols) = y.shape();
                if *diag_mask {
                    debug_assert!((0..rows.min(cols)).all(|i| y.at(i, i) == 0.0));
                }
                let mut da = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let mut dot = 0.0;
                    for c in 0..cols {
                        dot += grad.at(r, c) * y.at(r, c);
                    }
                    for c in 0..cols {
                        da.set(r, c, y.at(r, c) * (grad.at(r, c) - dot));
                    }
                }
                accumulate(grads, *input, da);
            }
            Op::LayerNorm { input, gain, bias, eps } => {
                let x = self.value(*input);
                let g = self.value(*gain);
                let (rows, cols) = x.shape();
                let n = cols as f64;
                let mut dx = Matrix::zeros(rows, cols);
                let mut dgain = Matrix::zeros(1, cols);
                let mut dbias = Matrix::zeros(1, cols);
                for r in 0..rows {
                    let row = x.row_slice(r);
                    let mean = row.iter().sum::<f64>() / n;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                    let rstd = 1.0 / (var + eps).sqrt();
                    // gy = upstream * gain; xhat = normalized input
                    let mut gy_sum = 0.0;
                    let mut gy_xhat_sum = 0.0;
                    let mut gy = vec![0.0; cols];
                    let mut xhat = vec![0.0; cols];
                    for c in 0..cols {
                        xhat[c] = (row[c] - mean) * rstd;
                        gy[c] = grad.at(r, c) * g.at(0, c);
                        gy_sum += gy[c];
                        gy_xhat_sum += gy[c] * xhat[c];
                        dgain.set(0, c, dgain.at(0, c) + grad.at(r, c) * xhat[c]);
                        dbias.set(0, c, dbias.at(0, c) + grad.at(r, c));
                    }
                    for c in 0..cols {
                        dx.set(r, c, rstd * (gy[c] - gy_sum / n - xhat[c] * gy_xhat_sum / n));
                    }
                }
                accumulate(grads, *input, dx);
                accumulate(grads, *gain, dgain);
                accumulate(grads, *bias, dbias);
            }
            Op::ConcatCols(a, b) => {
                let (rows, ac) = self.value(*a).shape();
                let bc = self.value(*b).cols();
                let mut da = Matrix::zeros(rows, ac);
                let mut db = Matrix::zeros(rows, bc);
                for r in 0..rows {
                    for c in 0..ac {
                        da.set(r, c, grad.at(r, c));
                    }
                    for c in 0..bc {
                        db.set(r, c, grad.at(r, ac + c));
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::BroadcastRows(v) => {
                let (rows, cols) = grad.shape();
                let mut dv = Matrix::zeros(1, cols);
                for c in 0..cols {
                    let mut acc = 0.0;
                    for r in 0..rows {
                        acc += grad.at(r, c);
                    }
                    dv.set(0, c, acc);
                }
                accumulate(grads, *v, dv);
            }
            Op::SumRows(a) => {
                let (rows, cols) = self.value(*a).shape();
                let mut da = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    for c in 0..cols {
                        da.set(r, c, grad.at(0, c));
                    }
                }
                accumulate(grads, *a, da);
            }
            Op::SumAll(a) => {
                let (rows, cols) = self.value(*a).shape();
                let g = grad.scalar();
                let da = Matrix::from_vec(rows, cols, vec![g; rows * cols]).expect("shape");
                accumulate(grads, *a, da);
            }
            Op::ScaleRows { input, weights } => {
                let v = self.value(*input);
                let w = self.value(*weights);
                let (rows, cols) = v.shape();
                let mut dv = Matrix::zeros(rows, cols);
                let mut dw = Matrix::zeros(rows, 1);
                for r in 0..rows {
                    let mut acc = 0.0;
                    for c in 0..cols {
                        dv.set(r, c, grad.at(r, c) * w.at(r, 0));
                        acc += grad.at(r, c) * v.at(r, c);
                    }
                    dw.set(r, 0, acc);
                }
                accumulate(grads, *input, dv);
                accumulate(grads, *weights, dw);
            }
            Op::GatherRows { table, indices } => {
                let (rows, cols) = self.value(*table).shape();
                let mut dt = Matrix::zeros(rows, cols);
                for (r, &i) in indices.iter().enumerate() {
                    for c in 0..cols {
                        dt.set(i, c, dt.at(i, c) + grad.at(r, c));
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::ShiftRows { input, offset } => {
                let (rows, cols) = self.value(*input).shape();
                let mut da = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    let src = r as isize + offset;
                    if src >= 0 && (src as usize) < rows {
                        for c in 0..cols {
                            let s = src as usize;
                            da.set(s, c, da.at(s, c) + grad.at(r, c));
                        }
                    }
                }
                accumulate(grads, *input, da);
            }
            Op::NllFromLogits { logits, labels } => {
                let l = self.value(*logits);
                let (rows, cols) = l.shape();
                let up = grad.scalar() / rows as f64;
                let mut dl = Matrix::zeros(rows, cols);
                for (r, &y) in labels.iter().enumerate() {
                    let row = l.row_slice(r);
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
                    let sum: f64 = exps.iter().sum();
                    for c in 0..cols {
                        let p = exps[c] / sum;
                        let target = if c == y { 1.0 } else { 0.0 };
                        dl.set(r, c, up * (p - target));
                    }
                }
                accumulate(grads, *logits, dl);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], id: NodeId, contribution: Matrix) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&contribution),
        slot @ None => *slot = Some(contribution),
    }
}

fn matmul_values(a: &Matrix, b: &Matrix) -> Matrix {
    let (ar, ac) = a.shape();
    let bc = b.cols();
    let mut out = Matrix::zeros(ar, bc);
    for r in 0..ar {
        for k in 0..ac {
            let av = a.at(r, k);
            if av == 0.0 {
                continue;
            }
            for c in 0..bc {
                out.set(r, c, out.at(r, c) + av * b.at(k, c));
            }
        }
    }
    out
}

fn hadamard(a: &Matrix, b: &Matrix) -> Matrix {
    let data: Vec<f64> = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

fn softmax_rows_values(scores: &Matrix, diag_mask: bool) -> Result<Matrix, AutodiffError> {
    let (rows, cols) = scores.shape();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let masked = |c: usize| -> f64 {
            if diag_mask && r == c {
                f64::NEG_INFINITY
            } else {
                scores.at(r, c)
            }
        };
        let mut max = f64::NEG_INFINITY;
        for c in 0..cols {
            let v = masked(c);
            if v.is_finite() && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(AutodiffError::DegenerateSoftmaxRow { row: r });
        }
        let mut sum = 0.0;
        let mut exps = vec![0.0; cols];
        for c in 0..cols {
            let v = masked(c);
            exps[c] = if v == f64::NEG_INFINITY { 0.0 } else { (v - max).exp() };
            sum += exps[c];
        }
        for c in 0..cols {
            out.set(r, c, exps[c] / sum);
        }
    }
    Ok(out)
}

fn layer_norm_values(x: &Matrix, gain: &Matrix, bias: &Matrix, eps: f64) -> Matrix {
    let (rows, cols) = x.shape();
    let n = cols as f64;
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let row = x.row_slice(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let rstd = 1.0 / (var + eps).sqrt();
        for c in 0..cols {
            out.set(r, c, gain.at(0, c) * (row[c] - mean) * rstd + bias.at(0, c));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(entries: &[(&str, Matrix)]) -> ParamStore {
        let mut store = ParamStore::new();
        for (name, m) in entries {
            store.insert(*name, m.clone());
        }
        store
    }

    // Naive triple-loop product, kept independent of matmul_values.
    fn oracle_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.at(i, k) * b.at(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let eye = g.constant(Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let m = g.constant(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let prod = g.matmul(eye, m).unwrap();
        assert_eq!(g.value(prod), g.value(m));
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.constant(Matrix::from_rows(&[vec![5.0], vec![6.0]]).unwrap());
        let prod = g.matmul(a, b).unwrap();
        assert_eq!(g.value(prod).data(), &[17.0, 39.0]);

        // Random 10x10 agreement within 1e-12 relative error.
        let mut rng = crate::rng::Rng::new(99);
        let ra = Matrix::from_vec(10, 10, (0..100).map(|_| rng.uniform_in(-2.0, 2.0)).collect()).unwrap();
        let rb = Matrix::from_vec(10, 10, (0..100).map(|_| rng.uniform_in(-2.0, 2.0)).collect()).unwrap();
        let expected = oracle_matmul(&ra, &rb);
        let mut g = Graph::new();
        let na = g.constant(ra);
        let nb = g.constant(rb);
        let got = g.matmul(na, nb).unwrap();
        for (x, y) in g.value(got).data().iter().zip(expected.data().iter()) {
            let rel = (x - y).abs() / y.abs().max(1.0);
            assert!(rel <= 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Matrix::zeros(2, 3));
        let b = g.constant(Matrix::zeros(2, 2));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("2x2"), "{err}");
    }

    #[test]
    fn softmax_uniform_row() {
        let mut g = Graph::new();
        let s = g.constant(Matrix::row(&[0.0, 0.0, 0.0]));
        let y = g.masked_softmax_rows(s, None).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_two_to_one_row() {
        let mut g = Graph::new();
        let s = g.constant(Matrix::row(&[2.0_f64.ln(), 0.0]));
        let y = g.masked_softmax_rows(s, None).unwrap();
        assert!((g.value(y).at(0, 0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((g.value(y).at(0, 1) - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_diag_mask_swaps_all_weight() {
        let mut g = Graph::new();
        let s = g.constant(Matrix::zeros(2, 2));
        let mask = MaskMatrix::diagonal(2);
        let y = g.masked_softmax_rows(s, Some(&mask)).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_within_1e12() {
        let mut rng = crate::rng::Rng::new(5);
        for l in [2usize, 3, 7, 20] {
            let m = Matrix::from_vec(l, l, (0..l * l).map(|_| rng.uniform_in(-4.0, 4.0)).collect()).unwrap();
            let mut g = Graph::new();
            let s = g.constant(m);
            let mask = MaskMatrix::diagonal(l);
            let y = g.masked_softmax_rows(s, Some(&mask)).unwrap();
            for r in 0..l {
                let sum: f64 = g.value(y).row_slice(r).iter().sum();
                assert!((sum - 1.0).abs() <= 1e-12, "row sum {sum}");
                assert_eq!(g.value(y).at(r, r), 0.0);
            }
        }
    }

    #[test]
    fn softmax_degenerate_single_row_with_mask() {
        let mut g = Graph::new();
        let s = g.constant(Matrix::row(&[3.0]));
        let mask = MaskMatrix::diagonal(1);
        let err = g.masked_softmax_rows(s, Some(&mask)).unwrap_err();
        assert!(matches!(err, AutodiffError::DegenerateSoftmaxRow { row: 0 }));
    }

    #[test]
    fn layer_norm_constant_row_normalizes_to_bias() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::row(&[5.0, 5.0, 5.0, 5.0]));
        let gain = g.constant(Matrix::row(&[1.0; 4]));
        let bias = g.constant(Matrix::row(&[0.0; 4]));
        let y = g.layer_norm(x, gain, bias, 1e-6).unwrap();
        for &v in g.value(y).data() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn layer_norm_unit_cases() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::row(&[1.0, -1.0]));
        let gain = g.constant(Matrix::row(&[1.0, 1.0]));
        let bias = g.constant(Matrix::row(&[0.0, 0.0]));
        let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!((g.value(y).at(0, 0) - 1.0).abs() < 1e-6);
        assert!((g.value(y).at(0, 1) + 1.0).abs() < 1e-6);

        let gain2 = g.constant(Matrix::row(&[2.0, 2.0]));
        let bias2 = g.constant(Matrix::row(&[1.0, 1.0]));
        let y2 = g.layer_norm(x, gain2, bias2, 1e-12).unwrap();
        assert!((g.value(y2).at(0, 0) - 3.0).abs() < 1e-6);
        assert!((g.value(y2).at(0, 1) + 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_row_statistics() {
        let mut rng = crate::rng::Rng::new(8);
        let x = Matrix::from_vec(5, 8, (0..40).map(|_| rng.uniform_in(-3.0, 3.0)).collect()).unwrap();
        let mut g = Graph::new();
        let xn = g.constant(x);
        let gain = g.constant(Matrix::row(&[1.0; 8]));
        let bias = g.constant(Matrix::row(&[0.0; 8]));
        let y = g.layer_norm(xn, gain, bias, 1e-10).unwrap();
        for r in 0..5 {
            let row = g.value(y).row_slice(r);
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() <= 1e-10, "row mean {mean}");
            assert!((var - 1.0).abs() <= 1e-6, "row var {var}");
        }
    }

    #[test]
    fn relu_tanh_concat_examples() {
        let mut g = Graph::new();
        let x = g.constant(Matrix::row(&[-1.0, 0.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);

        let z = g.constant(Matrix::row(&[0.0]));
        let t = g.tanh(z);
        assert_eq!(g.value(t).data(), &[0.0]);

        let a = g.constant(Matrix::zeros(2, 3));
        let b = g.constant(Matrix::zeros(2, 2));
        let cat = g.concat_cols(a, b).unwrap();
        assert_eq!(g.value(cat).shape(), (2, 5));
    }

    #[test]
    fn backward_sum_of_squares() {
        let store = store_with(&[("x", Matrix::row(&[1.0, 2.0]))]);
        let mut g = Graph::new();
        let x = g.param("x", &store).unwrap();
        let sq = g.mul(x, x).unwrap();
        let loss = g.sum_all(sq);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["x"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_reused_parameter_accumulates() {
        let store = store_with(&[("w", Matrix::row(&[3.0]))]);
        let mut g = Graph::new();
        let w1 = g.param("w", &store).unwrap();
        let w2 = g.param("w", &store).unwrap();
        assert_eq!(w1, w2);
        let sum = g.add(w1, w2).unwrap();
        let grads = g.backward(sum).unwrap();
        assert_eq!(grads["w"].data(), &[2.0]);
    }

    #[test]
    fn backward_unreachable_parameter_gets_zeros() {
        let store = store_with(&[("used", Matrix::row(&[2.0])), ("unused", Matrix::zeros(2, 2))]);
        let mut g = Graph::new();
        let used = g.param("used", &store).unwrap();
        let _unused = g.param("unused", &store).unwrap();
        let loss = g.sum_all(used);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads["used"].data(), &[1.0]);
        assert_eq!(grads["unused"], Matrix::zeros(2, 2));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let store = store_with(&[("x", Matrix::row(&[1.0, 2.0]))]);
        let mut g = Graph::new();
        let x = g.param("x", &store).unwrap();
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, AutodiffError::NonScalarLoss { rows: 1, cols: 2 }));
    }

    #[test]
    fn cross_entropy_gradient_is_probs_minus_onehot() {
        let store = store_with(&[("logits", Matrix::row(&[0.3, -1.2, 0.8]))]);
        let mut g = Graph::new();
        let logits = g.param("logits", &store).unwrap();
        let loss = g.nll_from_logits(logits, &[2]).unwrap();
        let grads = g.backward(loss).unwrap();

        let row = store.get("logits").unwrap().row_slice(0);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for c in 0..3 {
            let p = exps[c] / sum;
            let target = if c == 2 { 1.0 } else { 0.0 };
            assert!((grads["logits"].at(0, c) - (p - target)).abs() < 1e-12);
        }
    }

    // Batched loss vs split per-instance losses: identical gradients,
    // bitwise, when contributions are reduced in the matching order.
    #[test]
    fn gradient_accumulation_split_matches_batch_bitwise() {
        let mut rng = crate::rng::Rng::new(21);
        let w = Matrix::from_vec(3, 2, (0..6).map(|_| rng.uniform_in(0.1, 1.0)).collect()).unwrap();
        let store = store_with(&[("w", w)]);
        let xs: Vec<Matrix> = (0..4)
            .map(|_| Matrix::from_vec(2, 3, (0..6).map(|_| rng.uniform_in(0.1, 1.0)).collect()).unwrap())
            .collect();
        let n = xs.len() as f64;

        // One tape holding all instances, mean loss.
        let mut g = Graph::new();
        let wp = g.param("w", &store).unwrap();
        let mut total = None;
        for x in &xs {
            let xn = g.constant(x.clone());
            let prod = g.matmul(xn, wp).unwrap();
            let act = g.relu(prod);
            let li = g.sum_all(act);
            total = Some(match total {
                None => li,
                Some(t) => g.add(t, li).unwrap(),
            });
        }
        let mean = g.scale(total.unwrap(), 1.0 / n);
        let batched = g.backward(mean).unwrap();

        // Separate tapes per instance, each loss pre-scaled by 1/N, reduced
        // in reverse instance order to mirror the tape's reverse walk.
        let mut acc: Option<Matrix> = None;
        for x in xs.iter().rev() {
            let mut gi = Graph::new();
            let wp = gi.param("w", &store).unwrap();
            let xn = gi.constant(x.clone());
            let prod = gi.matmul(xn, wp).unwrap();
            let act = gi.relu(prod);
            let li = gi.sum_all(act);
            let scaled = gi.scale(li, 1.0 / n);
            let grads = gi.backward(scaled).unwrap();
            match &mut acc {
                None => acc = Some(grads["w"].clone()),
                Some(a) => a.add_assign(&grads["w"]),
            }
        }
        let split = acc.unwrap();
        for (a, b) in batched["w"].data().iter().zip(split.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    // Every primitive, in isolation, against central finite differences.
    #[test]
    fn primitives_pass_finite_difference_checks() {
        use crate::gradcheck::{finite_diff_check, CheckOptions};
        use crate::matrix::MaskMatrix;

        type Build = fn(&mut Graph, &ParamStore) -> Result<NodeId, AutodiffError>;
        let cases: Vec<(&str, Build)> = vec![
            ("matmul", |g, s| {
                let a = g.param("a34", s)?;
                let b = g.param("b42", s)?;
                let m = g.matmul(a, b)?;
                Ok(g.sum_all(m))
            }),
            ("transpose", |g, s| {
                let a = g.param("a34", s)?;
                let t = g.transpose(a);
                let b = g.param("b32", s)?;
                let m = g.matmul(t, b)?;
                Ok(g.sum_all(m))
            }),
            ("add_mul", |g, s| {
                let a = g.param("a34", s)?;
                let b = g.param("c34", s)?;
                let sum = g.add(a, b)?;
                let prod = g.mul(sum, a)?;
                Ok(g.sum_all(prod))
            }),
            ("scale", |g, s| {
                let a = g.param("a34", s)?;
                let sc = g.scale(a, 1.7);
                Ok(g.sum_all(sc))
            }),
            ("relu", |g, s| {
                let a = g.param("a34", s)?;
                let r = g.relu(a);
                let sq = g.mul(r, r)?;
                Ok(g.sum_all(sq))
            }),
            ("tanh", |g, s| {
                let a = g.param("a34", s)?;
                let t = g.tanh(a);
                Ok(g.sum_all(t))
            }),
            ("softmax_rows", |g, s| {
                let a = g.param("a44", s)?;
                let y = g.masked_softmax_rows(a, None)?;
                let w = g.param("c44", s)?;
                let prod = g.mul(y, w)?;
                Ok(g.sum_all(prod))
            }),
            ("softmax_rows_masked", |g, s| {
                let a = g.param("a44", s)?;
                let mask = MaskMatrix::diagonal(4);
                let y = g.masked_softmax_rows(a, Some(&mask))?;
                let w = g.param("c44", s)?;
                let prod = g.mul(y, w)?;
                Ok(g.sum_all(prod))
            }),
            ("layer_norm", |g, s| {
                let x = g.param("a34", s)?;
                let gain = g.param("gain4", s)?;
                let bias = g.param("bias4", s)?;
                let y = g.layer_norm(x, gain, bias, 1e-5)?;
                let w = g.param("c34", s)?;
                let prod = g.mul(y, w)?;
                Ok(g.sum_all(prod))
            }),
            ("concat_cols", |g, s| {
                let a = g.param("a34", s)?;
                let b = g.param("b32", s)?;
                let cat = g.concat_cols(a, b)?;
                let sq = g.mul(cat, cat)?;
                Ok(g.sum_all(sq))
            }),
            ("broadcast_rows", |g, s| {
                let v = g.param("gain4", s)?;
                let b = g.broadcast_rows(v, 3)?;
                let w = g.param("c34", s)?;
                let prod = g.mul(b, w)?;
                Ok(g.sum_all(prod))
            }),
            ("sum_rows", |g, s| {
                let a = g.param("a34", s)?;
                let sr = g.sum_rows(a);
                let sq = g.mul(sr, sr)?;
                Ok(g.sum_all(sq))
            }),
            ("scale_rows", |g, s| {
                let a = g.param("a34", s)?;
                let w = g.param("w31", s)?;
                let y = g.scale_rows(a, w)?;
                let sq = g.mul(y, y)?;
                Ok(g.sum_all(sq))
            }),
            ("gather_rows", |g, s| {
                let t = g.param("a34", s)?;
                let picked = g.gather_rows(t, &[2, 0, 2, 1])?;
                let sq = g.mul(picked, picked)?;
                Ok(g.sum_all(sq))
            }),
            ("shift_rows", |g, s| {
                let a = g.param("a34", s)?;
                let up = g.shift_rows(a, 1);
                let down = g.shift_rows(a, -2);
                let sum = g.add(up, down)?;
                let sq = g.mul(sum, sum)?;
                Ok(g.sum_all(sq))
            }),
            ("nll_from_logits", |g, s| {
                let logits = g.param("a34", s)?;
                g.nll_from_logits(logits, &[0, 3, 1])
            }),
        ];

        let mut rng = crate::rng::Rng::new(2024);
        let mut store = ParamStore::new();
        let fill = |rng: &mut crate::rng::Rng, r: usize, c: usize| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.uniform_in(-1.5, 1.5)).collect()).unwrap()
        };
        store.insert("a34", fill(&mut rng, 3, 4));
        store.insert("b42", fill(&mut rng, 4, 2));
        store.insert("b32", fill(&mut rng, 3, 2));
        store.insert("c34", fill(&mut rng, 3, 4));
        store.insert("a44", fill(&mut rng, 4, 4));
        store.insert("c44", fill(&mut rng, 4, 4));
        store.insert("gain4", fill(&mut rng, 1, 4));
        store.insert("bias4", fill(&mut rng, 1, 4));
        store.insert("w31", fill(&mut rng, 3, 1));

        for (name, build) in cases {
            let mut g = Graph::new();
            let loss = build(&mut g, &store).unwrap();
            let grads = g.backward(loss).unwrap();
            let value_of = |s: &ParamStore| -> Result<f64, AutodiffError> {
                let mut g = Graph::new();
                let loss = build(&mut g, s)?;
                Ok(g.value(loss).scalar())
            };
            let report = finite_diff_check(value_of, &store, &grads, &CheckOptions::default()).unwrap();
            assert!(
                report.max_rel_error < 1e-6,
                "{name}: max rel error {} at {}[{}]",
                report.max_rel_error,
                report.worst_param,
                report.worst_coord
            );
        }
    }

    #[test]
    fn gather_and_shift_shapes() {
        let mut g = Graph::new();
        let table = g.constant(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap());
        let picked = g.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(picked).data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let err = g.gather_rows(table, &[3]).unwrap_err();
        assert!(matches!(err, AutodiffError::GatherOutOfRange { index: 3, rows: 3 }));

        let shifted = g.shift_rows(picked, 1);
        assert_eq!(g.value(shifted).data(), &[1.0, 2.0, 5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn row_sum_weighted_both_forms() {
        let mut g = Graph::new();
        let v = g.constant(Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let full = g.constant(Matrix::from_rows(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap());
        let s = g.row_sum_weighted(full, v).unwrap();
        assert_eq!(g.value(s).data(), &[2.0, 3.0]);

        let col = g.constant(Matrix::from_rows(&[vec![1.0], vec![0.0]]).unwrap());
        let s2 = g.row_sum_weighted(col, v).unwrap();
        assert_eq!(g.value(s2).data(), &[1.0, 2.0]);
    }
}
