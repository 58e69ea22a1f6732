//! Reverse-mode automatic differentiation over dense real tensors.
//!
//! A [`Tape`] records every primitive applied during a forward pass and
//! replays the records in exact reverse order to accumulate gradients.
//! The primitive catalog is deliberately closed: dense/sparse matrix
//! products, the elementwise family, softmax variants, the two losses,
//! concat/slice/gather, segment reductions, and dropout — exactly what
//! the GCN/GAT/SAGE layers, readout, and link decoding need.
//!
//! Gradients flow only into nodes flagged as requiring them, so constant
//! inputs (node features, adjacency values) never pay for a gradient
//! pass. Backward visits nodes in the reverse of recording order with
//! fixed reduction orders throughout; two backward passes over the same
//! tape produce bit-identical gradients.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Csr;
use crate::tensor::{self, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn id(&self) -> usize {
        self.0
    }
}

/// Storage tag recorded per parameter and carried into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arithmetic {
    Real,
    Quaternion,
}

impl Arithmetic {
    pub fn as_str(&self) -> &'static str {
        match self {
            Arithmetic::Real => "real",
            Arithmetic::Quaternion => "quaternion",
        }
    }
}

/// A trainable tensor plus its gradient buffer.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    /// Whether weight decay applies to this parameter.
    pub decay: bool,
    /// Whether pruning masks may cover this parameter.
    pub prunable: bool,
    pub arith: Arithmetic,
}

impl Parameter {
    pub fn new(
        name: impl Into<String>,
        value: Tensor,
        decay: bool,
        prunable: bool,
        arith: Arithmetic,
    ) -> Self {
        let grad = value.zeros_like();
        Self {
            name: name.into(),
            value,
            grad,
            decay,
            prunable,
            arith,
        }
    }
}

/// The full parameter list of a model, in a fixed order.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub params: Vec<Parameter>,
}

impl ParamSet {
    pub fn push(&mut self, p: Parameter) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total trainable scalar count.
    pub fn total_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// O(1)-per-tensor snapshot of all values (copy-on-write clones).
    pub fn snapshot_values(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore_values(&mut self, snapshot: &[Tensor]) {
        assert_eq!(snapshot.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(snapshot.iter()) {
            p.value = v.clone();
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.iter_mut() {
            p.grad = p.value.zeros_like();
        }
    }
}

enum Op {
    Leaf,
    Matmul(Var, Var),
    MatmulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    RowSoftmax(Var),
    LogSoftmax(Var),
    NllLoss {
        logp: Var,
        rows: Arc<Vec<usize>>,
        labels: Arc<Vec<usize>>,
    },
    BceWithLogits {
        logits: Var,
        targets: Arc<Vec<f64>>,
    },
    Spmm {
        adj: Arc<Csr>,
        values: Var,
        h: Var,
    },
    SegmentSoftmax {
        scores: Var,
        offsets: Arc<Vec<usize>>,
    },
    GatherRows {
        h: Var,
        idx: Arc<Vec<usize>>,
    },
    ConcatCols(Var, Var),
    SliceCols {
        a: Var,
        start: usize,
        width: usize,
    },
    RowSum(Var),
    Sum(Var),
    MeanAll(Var),
    SegmentMeanRows {
        h: Var,
        offsets: Arc<Vec<usize>>,
    },
    Dropout {
        a: Var,
        mask: Arc<Vec<f64>>,
    },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            needs_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a constant; no gradient is ever computed for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Insert a differentiable leaf (a parameter value).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::mat_mul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Op::Matmul(a, b)))
    }

    /// `a · bᵀ` for `a[m×k]`, `b[n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::mat_mul_nt(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Op::MatmulNT(a, b)))
    }

    fn binary_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add")?;
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub")?;
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p - q).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul")?;
        let value = {
            let (x, y) = (self.value(a), self.value(b));
            let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
            Tensor::new(x.shape().to_vec(), data)?
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Op::Mul(a, b)))
    }

    /// Row-broadcast bias add: `a[m×n] + bias[1×n]`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = (self.value(a).rows(), self.value(a).cols());
        if self.value(bias).rows() != 1 || self.value(bias).cols() != n {
            return Err(Error::Shape(format!(
                "add_bias: bias shape {:?} does not broadcast over {m}x{n}",
                self.value(bias).shape()
            )));
        }
        let value = {
            let x = self.value(a);
            let bd = self.value(bias).data().to_vec();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(n) {
                for (d, b) in row.iter_mut().zip(bd.iter()) {
                    *d += *b;
                }
            }
            Tensor::matrix(m, n, data)?
        };
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(value, ng, Op::AddBias(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| c * v);
        let ng = self.needs(a);
        self.push(value, ng, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let ng = self.needs(a);
        self.push(value, ng, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let value = self.value(a).map(|v| if v > 0.0 { v } else { slope * v });
        let ng = self.needs(a);
        self.push(value, ng, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid_scalar);
        let ng = self.needs(a);
        self.push(value, ng, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        let ng = self.needs(a);
        self.push(value, ng, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        let ng = self.needs(a);
        self.push(value, ng, Op::Log(a))
    }

    /// Per-row softmax with max subtraction.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut data = vec![0.0; m * n];
        for (out_row, in_row) in data.chunks_mut(n).zip(x.data().chunks(n)) {
            softmax_into(in_row, out_row);
        }
        let value = Tensor::matrix(m, n, data).expect("shape");
        let ng = self.needs(a);
        self.push(value, ng, Op::RowSoftmax(a))
    }

    /// Per-row log-softmax with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut data = vec![0.0; m * n];
        for (out_row, in_row) in data.chunks_mut(n).zip(x.data().chunks(n)) {
            let mx = in_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &v in in_row {
                z += (v - mx).exp();
            }
            let lse = mx + z.ln();
            for (o, &v) in out_row.iter_mut().zip(in_row) {
                *o = v - lse;
            }
        }
        let value = Tensor::matrix(m, n, data).expect("shape");
        let ng = self.needs(a);
        self.push(value, ng, Op::LogSoftmax(a))
    }

    /// Mean negative log-likelihood over the selected rows:
    /// `−(1/|rows|) Σ_t logp[rows[t], labels[t]]`.
    pub fn nll_loss(
        &mut self,
        logp: Var,
        rows: Arc<Vec<usize>>,
        labels: Arc<Vec<usize>>,
    ) -> Result<Var> {
        let x = self.value(logp);
        let (m, n) = (x.rows(), x.cols());
        if rows.is_empty() {
            return Err(Error::Invalid("nll_loss: empty row selection".into()));
        }
        if rows.len() != labels.len() {
            return Err(Error::Shape(format!(
                "nll_loss: {} rows vs {} labels",
                rows.len(),
                labels.len()
            )));
        }
        let mut total = 0.0;
        for (&r, &l) in rows.iter().zip(labels.iter()) {
            if r >= m || l >= n {
                return Err(Error::Invalid(format!(
                    "nll_loss: row {r} label {l} out of range for {m}x{n}"
                )));
            }
            total -= x.get(r, l);
        }
        let value = Tensor::scalar(total / rows.len() as f64);
        let ng = self.needs(logp);
        Ok(self.push(value, ng, Op::NllLoss { logp, rows, labels }))
    }

    /// Mean binary cross-entropy with logits over an `[E×1]` column.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Arc<Vec<f64>>) -> Result<Var> {
        let x = self.value(logits);
        if x.cols() != 1 {
            return Err(Error::Shape(format!(
                "bce_with_logits: expected column vector, got {:?}",
                x.shape()
            )));
        }
        if x.rows() != targets.len() {
            return Err(Error::Shape(format!(
                "bce_with_logits: {} logits vs {} targets",
                x.rows(),
                targets.len()
            )));
        }
        let mut total = 0.0;
        for (&v, &t) in x.data().iter().zip(targets.iter()) {
            // max(x,0) − t·x + ln(1 + exp(−|x|)): stable for large |x|.
            total += v.max(0.0) - t * v + (-v.abs()).exp().ln_1p();
        }
        let value = Tensor::scalar(total / targets.len() as f64);
        let ng = self.needs(logits);
        Ok(self.push(value, ng, Op::BceWithLogits { logits, targets }))
    }

    /// Sparse aggregate `out[u] = Σ_{e ∈ row(u)} values[e] · h[cols[e]]`.
    ///
    /// The per-row accumulation order follows CSR storage order, and the
    /// backward pass scatters through the transposed structure in the
    /// same fixed order.
    pub fn spmm(&mut self, adj: Arc<Csr>, values: Var, h: Var) -> Result<Var> {
        let hv = self.value(h);
        let vv = self.value(values);
        if hv.rows() != adj.num_cols {
            return Err(Error::Shape(format!(
                "spmm: adjacency has {} columns but h has {} rows",
                adj.num_cols,
                hv.rows()
            )));
        }
        if vv.rows() != adj.nnz() || vv.cols() != 1 {
            return Err(Error::Shape(format!(
                "spmm: expected {}x1 values, got {:?}",
                adj.nnz(),
                vv.shape()
            )));
        }
        let f = hv.cols();
        let mut out = vec![0.0; adj.num_rows * f];
        let hd = hv.data();
        let vd = vv.data();
        for u in 0..adj.num_rows {
            let orow = &mut out[u * f..(u + 1) * f];
            for e in adj.offsets[u]..adj.offsets[u + 1] {
                let w = vd[e];
                if w != 0.0 {
                    let src = &hd[adj.cols[e] * f..adj.cols[e] * f + f];
                    for (o, &s) in orow.iter_mut().zip(src) {
                        *o += w * s;
                    }
                }
            }
        }
        let value = Tensor::matrix(adj.num_rows, f, out)?;
        let ng = self.needs(values) || self.needs(h);
        Ok(self.push(value, ng, Op::Spmm { adj, values, h }))
    }

    /// Softmax over each contiguous segment of an `[E×1]` score column.
    /// Empty segments are allowed and contribute nothing.
    pub fn segment_softmax(&mut self, scores: Var, offsets: Arc<Vec<usize>>) -> Result<Var> {
        let s = self.value(scores);
        if s.cols() != 1 {
            return Err(Error::Shape(format!(
                "segment_softmax: expected column vector, got {:?}",
                s.shape()
            )));
        }
        validate_offsets(&offsets, s.rows(), "segment_softmax")?;
        let sd = s.data();
        let mut out = vec![0.0; sd.len()];
        for w in offsets.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if lo < hi {
                softmax_into(&sd[lo..hi], &mut out[lo..hi]);
            }
        }
        let value = Tensor::matrix(sd.len(), 1, out)?;
        let ng = self.needs(scores);
        Ok(self.push(value, ng, Op::SegmentSoftmax { scores, offsets }))
    }

    /// `out[t] = h[idx[t]]` row gather; backward scatter-adds.
    pub fn gather_rows(&mut self, h: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let hv = self.value(h);
        let (m, f) = (hv.rows(), hv.cols());
        if idx.is_empty() {
            return Err(Error::Invalid("gather_rows: empty index list".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(Error::Invalid(format!(
                "gather_rows: index {bad} out of range for {m} rows"
            )));
        }
        let hd = hv.data();
        let mut out = Vec::with_capacity(idx.len() * f);
        for &i in idx.iter() {
            out.extend_from_slice(&hd[i * f..(i + 1) * f]);
        }
        let value = Tensor::matrix(idx.len(), f, out)?;
        let ng = self.needs(h);
        Ok(self.push(value, ng, Op::GatherRows { h, idx }))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rows() != y.rows() {
            return Err(Error::Shape(format!(
                "concat_cols: {} vs {} rows",
                x.rows(),
                y.rows()
            )));
        }
        let (m, na, nb) = (x.rows(), x.cols(), y.cols());
        let mut out = Vec::with_capacity(m * (na + nb));
        for r in 0..m {
            out.extend_from_slice(x.row(r));
            out.extend_from_slice(y.row(r));
        }
        let value = Tensor::matrix(m, na + nb, out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(value, ng, Op::ConcatCols(a, b)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Result<Var> {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        if width == 0 || start + width > n {
            return Err(Error::Shape(format!(
                "slice_cols: [{start}, {start}+{width}) out of range for {n} columns"
            )));
        }
        let mut out = Vec::with_capacity(m * width);
        for r in 0..m {
            out.extend_from_slice(&x.row(r)[start..start + width]);
        }
        let value = Tensor::matrix(m, width, out)?;
        let ng = self.needs(a);
        Ok(self.push(value, ng, Op::SliceCols { a, start, width }))
    }

    /// Sum each row into an `[m×1]` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (m, n) = (x.rows(), x.cols());
        let mut out = vec![0.0; m];
        for (o, row) in out.iter_mut().zip(x.data().chunks(n)) {
            *o = row.iter().sum();
        }
        let value = Tensor::matrix(m, 1, out).expect("shape");
        let ng = self.needs(a);
        self.push(value, ng, Op::RowSum(a))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let total: f64 = self.value(a).data().iter().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(total), ng, Op::Sum(a))
    }

    /// Mean of all entries, as a scalar.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let total: f64 = x.data().iter().sum();
        let value = Tensor::scalar(total / x.len() as f64);
        let ng = self.needs(a);
        self.push(value, ng, Op::MeanAll(a))
    }

    /// Mean of each contiguous row segment; used as mean-pool readout.
    /// Segments must be non-empty.
    pub fn segment_mean_rows(&mut self, h: Var, offsets: Arc<Vec<usize>>) -> Result<Var> {
        let hv = self.value(h);
        let (m, f) = (hv.rows(), hv.cols());
        validate_offsets(&offsets, m, "segment_mean_rows")?;
        let segs = offsets.len() - 1;
        if segs == 0 {
            return Err(Error::Invalid("segment_mean_rows: no segments".into()));
        }
        for w in offsets.windows(2) {
            if w[0] == w[1] {
                return Err(Error::Invalid(
                    "segment_mean_rows: empty segment (graph with no nodes)".into(),
                ));
            }
        }
        let hd = hv.data();
        let mut out = vec![0.0; segs * f];
        for (g, w) in offsets.windows(2).enumerate() {
            let orow = &mut out[g * f..(g + 1) * f];
            for r in w[0]..w[1] {
                for (o, &v) in orow.iter_mut().zip(&hd[r * f..(r + 1) * f]) {
                    *o += v;
                }
            }
            let inv = 1.0 / (w[1] - w[0]) as f64;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        let value = Tensor::matrix(segs, f, out)?;
        let ng = self.needs(h);
        Ok(self.push(value, ng, Op::SegmentMeanRows { h, offsets }))
    }

    /// Inverted dropout at the given rate. Surviving entries are scaled
    /// by `1/(1−rate)`. With `rate == 0` this is a no-op; evaluation-mode
    /// callers simply skip the call, making eval the identity.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut impl Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Invalid(format!(
                "dropout rate {rate} outside [0, 1)"
            )));
        }
        if rate == 0.0 {
            return Ok(a);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let x = self.value(a);
        let mask: Vec<f64> = (0..x.len())
            .map(|_| {
                if rng.gen::<f64>() >= rate {
                    keep_scale
                } else {
                    0.0
                }
            })
            .collect();
        let data: Vec<f64> = x
            .data()
            .iter()
            .zip(mask.iter())
            .map(|(v, m)| v * m)
            .collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.needs(a);
        Ok(self.push(
            value,
            ng,
            Op::Dropout {
                a,
                mask: Arc::new(mask),
            },
        ))
    }

    /// Reverse pass from a scalar loss node. Returns per-node gradients;
    /// only leaves keep theirs, intermediate gradients are dropped once
    /// consumed.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward: loss must be scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Matmul(a, b) => {
                    if self.needs(*a) {
                        let da = tensor::mat_mul_nt(&g, self.value(*b))?;
                        accumulate(&mut grads, a.0, da);
                    }
                    if self.needs(*b) {
                        let db = tensor::mat_mul_tn(self.value(*a), &g)?;
                        accumulate(&mut grads, b.0, db);
                    }
                }
                Op::MatmulNT(a, b) => {
                    if self.needs(*a) {
                        let da = tensor::mat_mul(&g, self.value(*b))?;
                        accumulate(&mut grads, a.0, da);
                    }
                    if self.needs(*b) {
                        let db = tensor::mat_mul_tn(&g, self.value(*a))?;
                        accumulate(&mut grads, b.0, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, b.0, g.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, b.0, g.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if self.needs(*a) {
                        accumulate(
                            &mut grads,
                            a.0,
                            elementwise(&g, self.value(*b), |x, y| x * y),
                        );
                    }
                    if self.needs(*b) {
                        accumulate(
                            &mut grads,
                            b.0,
                            elementwise(&g, self.value(*a), |x, y| x * y),
                        );
                    }
                }
                Op::AddBias(a, bias) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, a.0, g.clone());
                    }
                    if self.needs(*bias) {
                        let n = g.cols();
                        let mut col_sums = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            for (c, &v) in col_sums.iter_mut().zip(row) {
                                *c += v;
                            }
                        }
                        accumulate(&mut grads, bias.0, Tensor::matrix(1, n, col_sums)?);
                    }
                }
                Op::Scale(a, c) => {
                    if self.needs(*a) {
                        let c = *c;
                        accumulate(&mut grads, a.0, g.map(|v| c * v));
                    }
                }
                Op::Relu(a) => {
                    if self.needs(*a) {
                        let da =
                            elementwise(&g, self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::LeakyRelu(a, slope) => {
                    if self.needs(*a) {
                        let s = *slope;
                        let da = elementwise(
                            &g,
                            self.value(*a),
                            |gv, x| if x > 0.0 { gv } else { s * gv },
                        );
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::Sigmoid(a) => {
                    if self.needs(*a) {
                        let da = elementwise(&g, &node.value, |gv, s| gv * s * (1.0 - s));
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::Exp(a) => {
                    if self.needs(*a) {
                        let da = elementwise(&g, &node.value, |gv, e| gv * e);
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::Log(a) => {
                    if self.needs(*a) {
                        let da = elementwise(&g, self.value(*a), |gv, x| gv / x);
                        accumulate(&mut grads, a.0, da);
                    }
                }
                Op::RowSoftmax(a) => {
                    if self.needs(*a) {
                        let s = &node.value;
                        let n = s.cols();
                        let mut out = vec![0.0; s.len()];
                        for ((orow, srow), grow) in out
                            .chunks_mut(n)
                            .zip(s.data().chunks(n))
                            .zip(g.data().chunks(n))
                        {
                            let dot: f64 = srow.iter().zip(grow).map(|(sv, gv)| sv * gv).sum();
                            for ((o, &sv), &gv) in orow.iter_mut().zip(srow).zip(grow) {
                                *o = sv * (gv - dot);
                            }
                        }
                        accumulate(&mut grads, a.0, Tensor::new(s.shape().to_vec(), out)?);
                    }
                }
                Op::LogSoftmax(a) => {
                    if self.needs(*a) {
                        let lp = &node.value;
                        let n = lp.cols();
                        let mut out = vec![0.0; lp.len()];
                        for ((orow, lrow), grow) in out
                            .chunks_mut(n)
                            .zip(lp.data().chunks(n))
                            .zip(g.data().chunks(n))
                        {
                            let gsum: f64 = grow.iter().sum();
                            for ((o, &lv), &gv) in orow.iter_mut().zip(lrow).zip(grow) {
                                *o = gv - lv.exp() * gsum;
                            }
                        }
                        accumulate(&mut grads, a.0, Tensor::new(lp.shape().to_vec(), out)?);
                    }
                }
                Op::NllLoss { logp, rows, labels } => {
                    if self.needs(*logp) {
                        let x = self.value(*logp);
                        let (m, n) = (x.rows(), x.cols());
                        let scale = -g.scalar_value() / rows.len() as f64;
                        let mut out = vec![0.0; m * n];
                        for (&r, &l) in rows.iter().zip(labels.iter()) {
                            out[r * n + l] += scale;
                        }
                        accumulate(&mut grads, logp.0, Tensor::matrix(m, n, out)?);
                    }
                }
                Op::BceWithLogits { logits, targets } => {
                    if self.needs(*logits) {
                        let x = self.value(*logits);
                        let scale = g.scalar_value() / targets.len() as f64;
                        let out: Vec<f64> = x
                            .data()
                            .iter()
                            .zip(targets.iter())
                            .map(|(&v, &t)| scale * (sigmoid_scalar(v) - t))
                            .collect();
                        accumulate(&mut grads, logits.0, Tensor::matrix(x.rows(), 1, out)?);
                    }
                }
                Op::Spmm { adj, values, h } => {
                    let hv = self.value(*h);
                    let f = hv.cols();
                    if self.needs(*h) {
                        let vd = self.value(*values).data();
                        let mut dh = vec![0.0; hv.len()];
                        for u in 0..adj.num_rows {
                            let grow = &g.data()[u * f..(u + 1) * f];
                            for e in adj.offsets[u]..adj.offsets[u + 1] {
                                let w = vd[e];
                                if w != 0.0 {
                                    let dst = &mut dh[adj.cols[e] * f..adj.cols[e] * f + f];
                                    for (d, &gv) in dst.iter_mut().zip(grow) {
                                        *d += w * gv;
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads, h.0, Tensor::matrix(hv.rows(), f, dh)?);
                    }
                    if self.needs(*values) {
                        let hd = hv.data();
                        let mut dv = vec![0.0; adj.nnz()];
                        for u in 0..adj.num_rows {
                            let grow = &g.data()[u * f..(u + 1) * f];
                            for e in adj.offsets[u]..adj.offsets[u + 1] {
                                let src = &hd[adj.cols[e] * f..adj.cols[e] * f + f];
                                let mut s = 0.0;
                                for (&gv, &hvv) in grow.iter().zip(src) {
                                    s += gv * hvv;
                                }
                                dv[e] = s;
                            }
                        }
                        accumulate(&mut grads, values.0, Tensor::matrix(adj.nnz(), 1, dv)?);
                    }
                }
                Op::SegmentSoftmax { scores, offsets } => {
                    if self.needs(*scores) {
                        let s = node.value.data();
                        let gd = g.data();
                        let mut out = vec![0.0; s.len()];
                        for w in offsets.windows(2) {
                            let (lo, hi) = (w[0], w[1]);
                            let dot: f64 = (lo..hi).map(|e| s[e] * gd[e]).sum();
                            for e in lo..hi {
                                out[e] = s[e] * (gd[e] - dot);
                            }
                        }
                        accumulate(&mut grads, scores.0, Tensor::matrix(s.len(), 1, out)?);
                    }
                }
                Op::GatherRows { h, idx } => {
                    if self.needs(*h) {
                        let hv = self.value(*h);
                        let f = hv.cols();
                        let mut dh = vec![0.0; hv.len()];
                        for (t, &i) in idx.iter().enumerate() {
                            let grow = &g.data()[t * f..(t + 1) * f];
                            let dst = &mut dh[i * f..(i + 1) * f];
                            for (d, &gv) in dst.iter_mut().zip(grow) {
                                *d += gv;
                            }
                        }
                        accumulate(&mut grads, h.0, Tensor::matrix(hv.rows(), f, dh)?);
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (na, nb) = (self.value(*a).cols(), self.value(*b).cols());
                    let m = g.rows();
                    if self.needs(*a) {
                        let mut da = Vec::with_capacity(m * na);
                        for r in 0..m {
                            da.extend_from_slice(&g.row(r)[..na]);
                        }
                        accumulate(&mut grads, a.0, Tensor::matrix(m, na, da)?);
                    }
                    if self.needs(*b) {
                        let mut db = Vec::with_capacity(m * nb);
                        for r in 0..m {
                            db.extend_from_slice(&g.row(r)[na..]);
                        }
                        accumulate(&mut grads, b.0, Tensor::matrix(m, nb, db)?);
                    }
                }
                Op::SliceCols { a, start, width } => {
                    if self.needs(*a) {
                        let x = self.value(*a);
                        let (m, n) = (x.rows(), x.cols());
                        let mut da = vec![0.0; m * n];
                        for r in 0..m {
                            let grow = g.row(r);
                            da[r * n + start..r * n + start + width].copy_from_slice(grow);
                        }
                        accumulate(&mut grads, a.0, Tensor::matrix(m, n, da)?);
                    }
                }
                Op::RowSum(a) => {
                    if self.needs(*a) {
                        let x = self.value(*a);
                        let (m, n) = (x.rows(), x.cols());
                        let mut da = vec![0.0; m * n];
                        for (r, row) in da.chunks_mut(n).enumerate() {
                            let gv = g.get(r, 0);
                            for d in row.iter_mut() {
                                *d = gv;
                            }
                        }
                        accumulate(&mut grads, a.0, Tensor::matrix(m, n, da)?);
                    }
                }
                Op::Sum(a) => {
                    if self.needs(*a) {
                        let gv = g.scalar_value();
                        let x = self.value(*a);
                        accumulate(&mut grads, a.0, x.map(|_| gv));
                    }
                }
                Op::MeanAll(a) => {
                    if self.needs(*a) {
                        let x = self.value(*a);
                        let gv = g.scalar_value() / x.len() as f64;
                        accumulate(&mut grads, a.0, x.map(|_| gv));
                    }
                }
                Op::SegmentMeanRows { h, offsets } => {
                    if self.needs(*h) {
                        let hv = self.value(*h);
                        let f = hv.cols();
                        let mut dh = vec![0.0; hv.len()];
                        for (gidx, w) in offsets.windows(2).enumerate() {
                            let inv = 1.0 / (w[1] - w[0]) as f64;
                            let grow = &g.data()[gidx * f..(gidx + 1) * f];
                            for r in w[0]..w[1] {
                                let dst = &mut dh[r * f..(r + 1) * f];
                                for (d, &gv) in dst.iter_mut().zip(grow) {
                                    *d += inv * gv;
                                }
                            }
                        }
                        accumulate(&mut grads, h.0, Tensor::matrix(hv.rows(), f, dh)?);
                    }
                }
                Op::Dropout { a, mask } => {
                    if self.needs(*a) {
                        let data: Vec<f64> = g
                            .data()
                            .iter()
                            .zip(mask.iter())
                            .map(|(&gv, &m)| gv * m)
                            .collect();
                        accumulate(&mut grads, a.0, Tensor::new(g.shape().to_vec(), data)?);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_into(input: &[f64], out: &mut [f64]) {
    let mx = input.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(input) {
        let e = (v - mx).exp();
        *o = e;
        z += e;
    }
    let inv = 1.0 / z;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

fn validate_offsets(offsets: &[usize], total: usize, what: &str) -> Result<()> {
    if offsets.first() != Some(&0) || offsets.last() != Some(&total) {
        return Err(Error::Shape(format!(
            "{what}: offsets must start at 0 and end at {total}"
        )));
    }
    if offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Shape(format!(
            "{what}: offsets must be non-decreasing"
        )));
    }
    Ok(())
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, delta: Tensor) {
    match &mut grads[id] {
        Some(existing) => existing.add_assign(&delta),
        slot @ None => *slot = Some(delta),
    }
}

fn elementwise(g: &Tensor, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    debug_assert_eq!(g.shape(), other.shape());
    let data: Vec<f64> = g
        .data()
        .iter()
        .zip(other.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::new(g.shape().to_vec(), data).expect("matching shapes")
}

/// Central-difference gradient check.
///
/// `loss_fn` re-evaluates the scalar objective at a perturbed parameter
/// value; `analytic` is the gradient under test. Returns the maximum
/// over entries of `|analytic − numeric| / (|analytic| + 1e−8)`.
pub fn finite_difference_check<F>(
    mut loss_fn: F,
    value: &Tensor,
    analytic: &Tensor,
    eps: f64,
) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Invalid(format!("eps must be positive, got {eps}")));
    }
    if value.shape() != analytic.shape() {
        return Err(Error::Shape(format!(
            "finite_difference_check: value {:?} vs gradient {:?}",
            value.shape(),
            analytic.shape()
        )));
    }
    let mut max_rel = 0.0f64;
    for idx in 0..value.len() {
        let mut plus = value.clone();
        plus.data_mut()[idx] += eps;
        let mut minus = value.clone();
        minus.data_mut()[idx] -= eps;
        let fp = loss_fn(&plus)?;
        let fm = loss_fn(&minus)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Diverged(format!(
                "finite_difference_check: non-finite objective at entry {idx}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[idx];
        let rel = (a - numeric).abs() / (a.abs() + 1e-8);
        max_rel = max_rel.max(rel);
    }
    Ok(max_rel)
}
