//! Symmetric matrix functions via eigendecomposition.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Eigenvalues below this are clamped before taking roots.
pub const EIGENVALUE_FLOOR: f64 = 1e-14;

fn symmetric_function<T: Real>(a: &DMatrix<T>, f: impl Fn(T) -> T) -> DMatrix<T> {
    let sym = (a + a.transpose()) * T::lit(0.5);
    let eig = SymmetricEigen::new(sym);
    let floor = T::lit(EIGENVALUE_FLOOR);
    let vals = eig
        .eigenvalues
        .map(|l| f(if l < floor { floor } else { l }));
    let v = &eig.eigenvectors;
    let mut scaled = v.clone();
    for (mut col, l) in scaled.column_iter_mut().zip(vals.iter()) {
        col *= *l;
    }
    &scaled * v.transpose()
}

/// Unique symmetric positive semidefinite square root.
pub fn sym_sqrt<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    symmetric_function(a, |l| l.sqrt())
}

/// Symmetric inverse square root.
pub fn sym_inv_sqrt<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    symmetric_function(a, |l| T::one() / l.sqrt())
}

/// Fails unless `a` is square, symmetric to a relative `1e-8`, and has a
/// Cholesky factor.
pub fn require_spd<T: Real>(a: &DMatrix<T>, name: &str) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Decomposition(format!("{name} is not square")));
    }
    let scale = a.amax().max(T::one());
    let asym = (a - a.transpose()).amax();
    if asym > T::lit(1e-8) * scale {
        return Err(Error::Decomposition(format!("{name} is not symmetric")));
    }
    if a.clone().cholesky().is_none() {
        return Err(Error::Decomposition(format!(
            "{name} is not positive definite"
        )));
    }
    Ok(())
}
