//! Quaternion arithmetic and the real block-matrix form of quaternion
//! linear maps.
//!
//! A quaternion is `q = r + i·𝐢 + j·𝐣 + k·𝐤` with `𝐢² = 𝐣² = 𝐤² = 𝐢𝐣𝐤 = −1`.
//! The Hamilton product is non-commutative; multiplying a packed real
//! vector `[r | i | j | k]` by [`QuatMatrix::to_block_matrix`] reproduces
//! entrywise Hamilton products, which is how the quaternion layers are
//! lowered onto ordinary real matrix kernels.
//!
//! All arithmetic here is `f64`; the algebraic identity tests depend on
//! the tight tolerances that gives.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Hamilton-product sign pattern, one row per output component
/// (r, i, j, k), one column per input component. Entry `(c, s)` means the
/// output block accumulates `s · W_c · h_block`.
///
/// ```text
/// ⎡ W_r  −W_i  −W_j  −W_k ⎤
/// ⎢ W_i   W_r  −W_k   W_j ⎥
/// ⎢ W_j   W_k   W_r  −W_i ⎥
/// ⎣ W_k  −W_j   W_i   W_r ⎦
/// ```
pub const BLOCK_PATTERN: [[(usize, f64); 4]; 4] = [
    [(0, 1.0), (1, -1.0), (2, -1.0), (3, -1.0)],
    [(1, 1.0), (0, 1.0), (3, -1.0), (2, 1.0)],
    [(2, 1.0), (3, 1.0), (0, 1.0), (1, -1.0)],
    [(3, 1.0), (2, -1.0), (1, 1.0), (0, 1.0)],
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub r: f64,
    pub i: f64,
    pub j: f64,
    pub k: f64,
}

impl Quaternion {
    pub fn new(r: f64, i: f64, j: f64, k: f64) -> Self {
        Self { r, i, j, k }
    }

    pub fn zero() -> Self {
        Self::new(0.0, 0.0, 0.0, 0.0)
    }

    /// Multiplicative identity `(1, 0, 0, 0)`.
    pub fn one() -> Self {
        Self::new(1.0, 0.0, 0.0, 0.0)
    }

    pub fn components(&self) -> [f64; 4] {
        [self.r, self.i, self.j, self.k]
    }
}

/// Component-wise quaternion addition.
pub fn qadd(p: Quaternion, q: Quaternion) -> Quaternion {
    Quaternion::new(p.r + q.r, p.i + q.i, p.j + q.j, p.k + q.k)
}

/// Hamilton product `p ⊗ q`. Non-commutative in general.
pub fn hamilton(p: Quaternion, q: Quaternion) -> Quaternion {
    Quaternion::new(
        p.r * q.r - p.i * q.i - p.j * q.j - p.k * q.k,
        p.i * q.r + p.r * q.i - p.k * q.j + p.j * q.k,
        p.j * q.r + p.k * q.i + p.r * q.j - p.i * q.k,
        p.k * q.r - p.j * q.i + p.i * q.j + p.r * q.k,
    )
}

/// Conjugation `(r, −i, −j, −k)`.
pub fn conjugate(q: Quaternion) -> Quaternion {
    Quaternion::new(q.r, -q.i, -q.j, -q.k)
}

/// Euclidean norm `√(r² + i² + j² + k²)`.
pub fn qnorm(q: Quaternion) -> f64 {
    (q.r * q.r + q.i * q.i + q.j * q.j + q.k * q.k).sqrt()
}

/// Scalar multiple `λq`; scales every component.
pub fn qscale(lambda: f64, q: Quaternion) -> Quaternion {
    Quaternion::new(lambda * q.r, lambda * q.i, lambda * q.j, lambda * q.k)
}

/// A matrix of quaternions stored as four real blocks of identical shape.
///
/// The real parameter count is `4 · rows_q · cols_q`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuatMatrix {
    rows_q: usize,
    cols_q: usize,
    /// Row-major `rows_q × cols_q` blocks, in component order r, i, j, k.
    blocks: [Vec<f64>; 4],
}

impl QuatMatrix {
    pub fn zeros(rows_q: usize, cols_q: usize) -> Result<Self> {
        if rows_q == 0 || cols_q == 0 {
            return Err(Error::Shape(
                "quaternion matrix dimensions must be positive".into(),
            ));
        }
        let block = vec![0.0; rows_q * cols_q];
        Ok(Self {
            rows_q,
            cols_q,
            blocks: [block.clone(), block.clone(), block.clone(), block],
        })
    }

    /// Quaternion identity matrix: `(1,0,0,0)` on the diagonal.
    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n, n)?;
        for d in 0..n {
            m.blocks[0][d * n + d] = 1.0;
        }
        Ok(m)
    }

    pub fn from_entries(rows_q: usize, cols_q: usize, entries: &[Quaternion]) -> Result<Self> {
        if entries.len() != rows_q * cols_q {
            return Err(Error::Shape(format!(
                "expected {} quaternion entries, got {}",
                rows_q * cols_q,
                entries.len()
            )));
        }
        let mut m = Self::zeros(rows_q, cols_q)?;
        for (idx, q) in entries.iter().enumerate() {
            let c = q.components();
            for b in 0..4 {
                m.blocks[b][idx] = c[b];
            }
        }
        Ok(m)
    }

    pub fn rows_q(&self) -> usize {
        self.rows_q
    }

    pub fn cols_q(&self) -> usize {
        self.cols_q
    }

    pub fn block(&self, component: usize) -> &[f64] {
        &self.blocks[component]
    }

    pub fn get(&self, r: usize, c: usize) -> Quaternion {
        let idx = r * self.cols_q + c;
        Quaternion::new(
            self.blocks[0][idx],
            self.blocks[1][idx],
            self.blocks[2][idx],
            self.blocks[3][idx],
        )
    }

    pub fn set(&mut self, r: usize, c: usize, q: Quaternion) {
        let idx = r * self.cols_q + c;
        let comps = q.components();
        for b in 0..4 {
            self.blocks[b][idx] = comps[b];
        }
    }

    /// Real parameter count `4 · rows_q · cols_q`.
    pub fn real_param_count(&self) -> usize {
        4 * self.rows_q * self.cols_q
    }

    /// Expand to the real `(4·rows_q) × (4·cols_q)` matrix whose product
    /// with a packed vector equals the entrywise Hamilton products.
    pub fn to_block_matrix(&self) -> Tensor {
        let (rq, cq) = (self.rows_q, self.cols_q);
        let (rows, cols) = (4 * rq, 4 * cq);
        let mut data = vec![0.0; rows * cols];
        for (out_b, pattern_row) in BLOCK_PATTERN.iter().enumerate() {
            for (in_b, &(comp, sign)) in pattern_row.iter().enumerate() {
                let block = &self.blocks[comp];
                for r in 0..rq {
                    let dst_row = out_b * rq + r;
                    for c in 0..cq {
                        data[dst_row * cols + in_b * cq + c] = sign * block[r * cq + c];
                    }
                }
            }
        }
        Tensor::matrix(rows, cols, data).expect("block matrix shape is valid")
    }

    /// `out[a] = Σ_b W[a,b] ⊗ h[b]`, computed directly from Hamilton
    /// products. The block-matrix route is the independent counterpart
    /// used to cross-check this.
    pub fn quat_matvec(&self, h: &[Quaternion]) -> Result<Vec<Quaternion>> {
        if h.len() != self.cols_q {
            return Err(Error::Shape(format!(
                "quat_matvec: expected vector of {} quaternions, got {}",
                self.cols_q,
                h.len()
            )));
        }
        let mut out = vec![Quaternion::zero(); self.rows_q];
        for (a, slot) in out.iter_mut().enumerate() {
            let mut acc = Quaternion::zero();
            for (b, &hq) in h.iter().enumerate() {
                acc = qadd(acc, hamilton(self.get(a, b), hq));
            }
            *slot = acc;
        }
        Ok(out)
    }
}

/// Pack a quaternion vector into the block real layout
/// `[r₀..r_{n−1}, i₀..i_{n−1}, j₀..j_{n−1}, k₀..k_{n−1}]`.
pub fn pack_quat_vec(h: &[Quaternion]) -> Vec<f64> {
    let n = h.len();
    let mut out = vec![0.0; 4 * n];
    for (idx, q) in h.iter().enumerate() {
        let comps = q.components();
        for b in 0..4 {
            out[b * n + idx] = comps[b];
        }
    }
    out
}

/// Inverse of [`pack_quat_vec`].
pub fn unpack_quat_vec(packed: &[f64]) -> Result<Vec<Quaternion>> {
    if packed.len() % 4 != 0 {
        return Err(Error::Shape(format!(
            "packed quaternion vector length {} is not divisible by 4",
            packed.len()
        )));
    }
    let n = packed.len() / 4;
    Ok((0..n)
        .map(|idx| {
            Quaternion::new(
                packed[idx],
                packed[n + idx],
                packed[2 * n + idx],
                packed[3 * n + idx],
            )
        })
        .collect())
}
