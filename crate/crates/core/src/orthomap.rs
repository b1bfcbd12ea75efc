//! Cayley parametrisation of (block-diagonal) orthogonal transforms.
//!
//! A client keeps an unconstrained square parameter `X`. Its skew part
//! `P = ½(X − Xᵀ)` is mapped to `Q = (I + P)(I − P)⁻¹`, which is orthogonal
//! for every `X`. With `r > 1` blocks the same map is applied independently to
//! each `d/r × d/r` diagonal block and everything off the blocks stays zero.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OrthoError {
    #[error("block count {blocks} must be positive and divide dimension {dim}")]
    InvalidBlockSpec { dim: usize, blocks: usize },
    #[error("entry ({row}, {col}) lies outside the block-diagonal pattern but is non-zero")]
    PatternViolation { row: usize, col: usize },
    #[error("expected a {expected}x{expected} matrix, got {rows}x{cols}")]
    Shape { expected: usize, rows: usize, cols: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Partition of `dim` coordinates into `blocks` equal diagonal blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    dim: usize,
    blocks: usize,
}

impl BlockSpec {
    pub fn new(dim: usize, blocks: usize) -> Result<Self, OrthoError> {
        if dim == 0 || blocks == 0 || !dim.is_multiple_of(blocks) {
            return Err(OrthoError::InvalidBlockSpec { dim, blocks });
        }
        Ok(Self { dim, blocks })
    }

    /// The unblocked transform.
    pub fn full(dim: usize) -> Self {
        Self::new(dim, 1).expect("dimension must be positive")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn blocks(&self) -> usize {
        self.blocks
    }

    pub fn block_size(&self) -> usize {
        self.dim / self.blocks
    }

    pub fn in_pattern(&self, row: usize, col: usize) -> bool {
        row / self.block_size() == col / self.block_size()
    }

    /// Zeroes every entry outside the block-diagonal pattern.
    pub fn mask(&self, m: &Matrix) -> Matrix {
        Matrix::from_fn(m.rows(), m.cols(), |i, j| if self.in_pattern(i, j) { m[(i, j)] } else { 0.0 })
    }

    fn check_square(&self, m: &Matrix) -> Result<(), OrthoError> {
        if m.rows() != self.dim || m.cols() != self.dim {
            return Err(OrthoError::Shape {
                expected: self.dim,
                rows: m.rows(),
                cols: m.cols(),
            });
        }
        Ok(())
    }

    fn check_pattern(&self, m: &Matrix) -> Result<(), OrthoError> {
        self.check_square(m)?;
        if self.blocks == 1 {
            return Ok(());
        }
        for i in 0..self.dim {
            for j in 0..self.dim {
                if !self.in_pattern(i, j) && m[(i, j)] != 0.0 {
                    return Err(OrthoError::PatternViolation { row: i, col: j });
                }
            }
        }
        Ok(())
    }

    fn offsets(&self) -> impl Iterator<Item = usize> {
        let size = self.block_size();
        (0..self.blocks).map(move |k| k * size)
    }
}

/// Degrees of freedom of a block-orthogonal transform: `d (d/r − 1) / 2`.
pub fn dof(spec: BlockSpec) -> u64 {
    let d = spec.dim() as u64;
    let b = spec.block_size() as u64;
    d * (b - 1) / 2
}

/// `½(X − Xᵀ)`, skew-symmetric by construction.
pub fn skew_part(x: &Matrix) -> Matrix {
    assert!(x.is_square(), "skew_part needs a square matrix");
    let n = x.rows();
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (x[(i, j)] - x[(j, i)]);
            p[(i, j)] = v;
            p[(j, i)] = -v;
        }
    }
    p
}

/// A client's local transform: the free parameter `X` and its cached orthogonal image `Q`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalTransform {
    spec: BlockSpec,
    x: Matrix,
    q: Matrix,
}

impl LocalTransform {
    /// `X = I`, hence `Q = I`.
    pub fn identity(spec: BlockSpec) -> Self {
        Self {
            spec,
            x: Matrix::identity(spec.dim()),
            q: Matrix::identity(spec.dim()),
        }
    }

    pub fn spec(&self) -> BlockSpec {
        self.spec
    }

    pub fn x(&self) -> &Matrix {
        &self.x
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    /// Replaces `X` and recomputes `Q`.
    pub fn set_x(&mut self, x: Matrix) -> Result<(), OrthoError> {
        *self = cayley(&x, self.spec)?;
        Ok(())
    }

    /// Whether the cached `Q` still equals the Cayley image of `X` to `1e-12`.
    pub fn is_consistent(&self) -> bool {
        match cayley(&self.x, self.spec) {
            Ok(fresh) => fresh.q.sub(&self.q).map(|d| d.max_abs() <= 1e-12).unwrap_or(false),
            Err(_) => false,
        }
    }

    pub fn pullback(&self, grad_q: &Matrix) -> Result<Matrix, OrthoError> {
        cayley_pullback(self, grad_q)
    }
}

fn cayley_block(p: &Matrix) -> Matrix {
    let n = p.rows();
    let eye = Matrix::identity(n);
    let plus = eye.add(p).expect("same shape");
    let minus = eye.sub(p).expect("same shape");
    // Q (I − P) = I + P  ⇔  (I + P) Qᵀ = I − P
    let qt = linalg::solve(&plus, &minus).expect("I + P is invertible for skew-symmetric P");
    qt.transpose()
}

/// Maps `X` to its Cayley transform, block by block.
pub fn cayley(x: &Matrix, spec: BlockSpec) -> Result<LocalTransform, OrthoError> {
    spec.check_pattern(x)?;
    let q = if spec.blocks() == 1 {
        cayley_block(&skew_part(x))
    } else {
        let size = spec.block_size();
        let mut q = Matrix::zeros(spec.dim(), spec.dim());
        for offset in spec.offsets() {
            let block = cayley_block(&skew_part(&x.diagonal_block(offset, size)));
            q.set_diagonal_block(offset, &block);
        }
        q
    };
    Ok(LocalTransform {
        spec,
        x: x.clone(),
        q,
    })
}

// With M = (I − P)⁻¹ the differential of Q = (I + P) M is dQ = (I + Q) dP M, so
// ∂ℓ/∂P = (I + Q)ᵀ G Mᵀ and Mᵀ = (I + P)⁻¹. The skew projection then gives ∂ℓ/∂X.
fn pullback_block(p: &Matrix, q: &Matrix, grad_q: &Matrix) -> Matrix {
    let n = p.rows();
    let eye = Matrix::identity(n);
    let minus = eye.sub(p).expect("same shape");
    // Z = G (I + P)⁻¹  ⇔  (I − P) Zᵀ = Gᵀ
    let z = linalg::solve(&minus, &grad_q.transpose())
        .expect("I - P is invertible for skew-symmetric P")
        .transpose();
    let g_p = linalg::matmul(&eye.add(q).expect("same shape").transpose(), &z).expect("square blocks");
    skew_part(&g_p)
}

/// Pulls `∂ℓ/∂Q` back to `∂ℓ/∂X` through the Cayley map; off-block entries of the result are zero.
pub fn cayley_pullback(t: &LocalTransform, grad_q: &Matrix) -> Result<Matrix, OrthoError> {
    t.spec.check_square(grad_q)?;
    let spec = t.spec;
    if spec.blocks() == 1 {
        return Ok(pullback_block(&skew_part(&t.x), &t.q, grad_q));
    }
    let size = spec.block_size();
    let mut out = Matrix::zeros(spec.dim(), spec.dim());
    for offset in spec.offsets() {
        let p = skew_part(&t.x.diagonal_block(offset, size));
        let g = pullback_block(&p, &t.q.diagonal_block(offset, size), &grad_q.diagonal_block(offset, size));
        out.set_diagonal_block(offset, &g);
    }
    Ok(out)
}
