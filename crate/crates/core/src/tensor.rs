//! Dense row-major `f64` tensors and the matrix kernels every layer runs on.
//!
//! Values are shared behind an `Arc`, so cloning a tensor is O(1) and
//! mutation copies on write. All kernels keep a fixed per-row reduction
//! order: results are bit-identical across repeated calls and across
//! thread counts, which the training determinism and equivariance tests
//! rely on.

use std::sync::Arc;

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Below this many inner multiply-adds the kernels stay single-threaded.
const PAR_WORK_THRESHOLD: usize = 1 << 16;

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && self.data() == other.data()
    }
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} implies {expected} elements, data has {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data: Arc::new(data),
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "dimensions must be positive");
        Self {
            shape: vec![rows, cols],
            data: Arc::new(vec![value; rows * cols]),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: Arc::new(vec![0.0; self.len()]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1, 1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Row count; panics unless the tensor is 2-D.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected 2-D tensor");
        self.shape[0]
    }

    /// Column count; panics unless the tensor is 2-D.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "expected 2-D tensor");
        self.shape[1]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; copies the buffer if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    pub fn scalar_value(&self) -> f64 {
        assert!(self.is_scalar(), "expected scalar tensor");
        self.data[0]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let cols = self.cols();
        self.data[r * cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        let cols = self.cols();
        self.data_mut()[r * cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.cols();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    /// In-place `self += other`; shapes must match.
    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        let dst = self.data_mut();
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += *s;
        }
    }
}

fn check_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Shape(format!(
            "{what}: expected 2-D tensor, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `C = A · B` for `A[m×k]`, `B[k×n]`.
///
/// Inner loop skips zero entries of `A`; sparse inputs (dropped-out
/// bag-of-words features) cost proportionally less.
pub fn mat_mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = check_2d(a, "mat_mul lhs")?;
    let (kb, n) = check_2d(b, "mat_mul rhs")?;
    if k != kb {
        return Err(Error::Shape(format!(
            "mat_mul: inner dims differ, {m}x{k} vs {kb}x{n}"
        )));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    let body = |i: usize, crow: &mut [f64]| {
        let arow = &ad[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            if aik != 0.0 {
                let brow = &bd[kk * n..(kk + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                    *c += aik * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_WORK_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in out.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
    Tensor::matrix(m, n, out)
}

/// `C = A · Bᵀ` for `A[m×k]`, `B[n×k]`.
pub fn mat_mul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = check_2d(a, "mat_mul_nt lhs")?;
    let (n, kb) = check_2d(b, "mat_mul_nt rhs")?;
    if k != kb {
        return Err(Error::Shape(format!(
            "mat_mul_nt: inner dims differ, {m}x{k} vs {n}x{kb}"
        )));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    let body = |i: usize, crow: &mut [f64]| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, c) in crow.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            // Four fixed-order accumulators; grouping is the same on every
            // call, so results stay bit-reproducible.
            let mut acc = [0.0f64; 4];
            let chunks = k / 4;
            for t in 0..chunks {
                let base = t * 4;
                acc[0] += arow[base] * brow[base];
                acc[1] += arow[base + 1] * brow[base + 1];
                acc[2] += arow[base + 2] * brow[base + 2];
                acc[3] += arow[base + 3] * brow[base + 3];
            }
            let mut tail = 0.0;
            for t in chunks * 4..k {
                tail += arow[t] * brow[t];
            }
            *c = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail;
        }
    };
    if m * k * n >= PAR_WORK_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, crow)| body(i, crow));
    } else {
        for (i, crow) in out.chunks_mut(n).enumerate() {
            body(i, crow);
        }
    }
    Tensor::matrix(m, n, out)
}

/// `C = Aᵀ · B` for `A[m×k]`, `B[m×n]`, giving `C[k×n]`.
///
/// Skips zero entries of `A`, which carries the feature-matrix sparsity
/// into the weight-gradient pass.
pub fn mat_mul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = check_2d(a, "mat_mul_tn lhs")?;
    let (mb, n) = check_2d(b, "mat_mul_tn rhs")?;
    if m != mb {
        return Err(Error::Shape(format!(
            "mat_mul_tn: outer dims differ, {m}x{k} vs {mb}x{n}"
        )));
    }
    let mut out = vec![0.0; k * n];
    let ad = a.data();
    let bd = b.data();
    let body = |r: usize, crow: &mut [f64]| {
        for i in 0..m {
            let av = ad[i * k + r];
            if av != 0.0 {
                let brow = &bd[i * n..(i + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                    *c += av * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_WORK_THRESHOLD {
        out.par_chunks_mut(n)
            .enumerate()
            .for_each(|(r, crow)| body(r, crow));
    } else {
        for (r, crow) in out.chunks_mut(n).enumerate() {
            body(r, crow);
        }
    }
    Tensor::matrix(k, n, out)
}
