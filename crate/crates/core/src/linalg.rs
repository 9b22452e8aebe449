//! Dense linear-algebra helpers shared by the solvers.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Condition-number ceiling for symmetric positive definite solves.
pub const MAX_CONDITION: f64 = 1e12;

/// `I_n ⊗ block`.
pub fn kron_eye(n: usize, block: &DMatrix<f64>) -> DMatrix<f64> {
    let (r, c) = block.shape();
    let mut out = DMatrix::zeros(n * r, n * c);
    for k in 0..n {
        out.view_mut((k * r, k * c), (r, c)).copy_from(block);
    }
    out
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn all_finite(m: &DMatrix<f64>) -> bool {
    m.iter().all(|v| v.is_finite())
}

/// Largest singular value. Zero for empty matrices, NaN for non-finite input.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if !all_finite(m) {
        return f64::NAN;
    }
    m.singular_values().max()
}

/// Smallest and largest eigenvalue of a symmetric matrix; NaN for non-finite input.
pub fn sym_eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    if !all_finite(m) {
        return (f64::NAN, f64::NAN);
    }
    let eig = SymmetricEigen::new(symmetrize(m));
    (eig.eigenvalues.min(), eig.eigenvalues.max())
}

/// Largest eigenvalue modulus of a square matrix.
pub fn spectral_radius(a: &DMatrix<f64>) -> f64 {
    if !all_finite(a) {
        return f64::NAN;
    }
    a.complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Cholesky factorization guarded by an eigenvalue-based condition check.
#[derive(Clone, Debug)]
pub struct SpdSolver {
    chol: Cholesky<f64, Dyn>,
    condition: f64,
}

impl SpdSolver {
    pub fn new(m: &DMatrix<f64>, what: &'static str) -> Result<Self> {
        let sym = symmetrize(m);
        let (lo, hi) = sym_eigen_range(&sym);
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition <= MAX_CONDITION) {
            return Err(Error::IllConditioned { what, condition });
        }
        let chol = sym
            .cholesky()
            .ok_or(Error::IllConditioned { what, condition })?;
        Ok(Self { chol, condition })
    }

    pub fn condition(&self) -> f64 {
        self.condition
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }
}

pub fn randn_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    // Row-major fill so the draw order matches how the entries are read.
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            m[(i, j)] = rng.sample(StandardNormal);
        }
    }
    m
}

pub fn randn_vector<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Rescales `m` so that its spectral norm equals `target`. A zero matrix stays zero.
pub fn scale_to_spectral_norm(m: &DMatrix<f64>, target: f64) -> DMatrix<f64> {
    let n = spectral_norm(m);
    if n == 0.0 {
        m.clone()
    } else {
        m * (target / n)
    }
}
