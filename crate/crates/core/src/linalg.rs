//! Small dense and banded helpers shared by the model code.

use nalgebra::{DMatrix, DVector};

use crate::error::{FmemError, Result};

/// Symmetric tridiagonal matrix stored by its diagonal and first off-diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTridiagonal {
    diag: Vec<f64>,
    off: Vec<f64>,
}

impl SymTridiagonal {
    pub fn new(diag: Vec<f64>, off: Vec<f64>) -> Self {
        assert_eq!(off.len() + 1, diag.len().max(1));
        Self { diag, off }
    }

    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    pub fn diag(&self) -> &[f64] {
        &self.diag
    }

    pub fn off_diag(&self) -> &[f64] {
        &self.off
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.len();
        let mut out = DMatrix::zeros(n, n);
        for i in 0..n {
            out[(i, i)] = self.diag[i];
            if i + 1 < n {
                out[(i, i + 1)] = self.off[i];
                out[(i + 1, i)] = self.off[i];
            }
        }
        out
    }

    /// Solves `T x = rhs` by the Thomas recurrence. Requires a matrix that
    /// needs no pivoting (diagonally dominant or SPD).
    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>> {
        let n = self.len();
        if rhs.len() != n {
            return Err(FmemError::Dimension(format!(
                "tridiagonal system of order {n} with rhs of length {}",
                rhs.len()
            )));
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let mut c = vec![0.0; n];
        let mut d = vec![0.0; n];
        let mut pivot = self.diag[0];
        if pivot == 0.0 {
            return Err(FmemError::RankDeficient);
        }
        if n > 1 {
            c[0] = self.off[0] / pivot;
        }
        d[0] = rhs[0] / pivot;
        for i in 1..n {
            pivot = self.diag[i] - self.off[i - 1] * c[i - 1];
            if pivot == 0.0 {
                return Err(FmemError::RankDeficient);
            }
            if i + 1 < n {
                c[i] = self.off[i] / pivot;
            }
            d[i] = (rhs[i] - self.off[i - 1] * d[i - 1]) / pivot;
        }
        for i in (0..n - 1).rev() {
            d[i] -= c[i] * d[i + 1];
        }
        Ok(d)
    }
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

/// Block-diagonal matrix with `copies` repetitions of `block`.
pub fn block_diagonal(block: &DMatrix<f64>, copies: usize) -> DMatrix<f64> {
    let (r, c) = block.shape();
    let mut out = DMatrix::zeros(r * copies, c * copies);
    for k in 0..copies {
        out.view_mut((k * r, k * c), (r, c)).copy_from(block);
    }
    out
}

/// `target[r0.., c0..] += scale · block`.
pub(crate) fn add_scaled_block(
    target: &mut DMatrix<f64>,
    r0: usize,
    c0: usize,
    scale: f64,
    block: &DMatrix<f64>,
) {
    for j in 0..block.ncols() {
        for i in 0..block.nrows() {
            target[(r0 + i, c0 + j)] += scale * block[(i, j)];
        }
    }
}

pub(crate) fn quad_form(m: &DMatrix<f64>, v: &DVector<f64>) -> f64 {
    v.dot(&(m * v))
}

/// Log-determinant and inverse of an SPD matrix via Cholesky.
pub(crate) fn spd_inverse_logdet(m: DMatrix<f64>) -> Option<(DMatrix<f64>, f64)> {
    let chol = m.cholesky()?;
    let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    Some((chol.inverse(), logdet))
}
