use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{require_spd, sym_inv_sqrt, sym_sqrt};
use crate::scalar::Real;

/// Linear map `A` pushing `N(m, P_f)` optimally onto `N(m', P_a)`:
/// `A = P_a^{1/2} (P_a^{1/2} P_f P_a^{1/2})^{-1/2} P_a^{1/2}`.
pub fn gaussian_optimal_map<T: Real>(p_f: &DMatrix<T>, p_a: &DMatrix<T>) -> Result<DMatrix<T>> {
    if p_f.shape() != p_a.shape() {
        return Err(Error::DimensionMismatch {
            expected: p_f.nrows(),
            found: p_a.nrows(),
        });
    }
    require_spd(p_f, "forecast covariance")?;
    require_spd(p_a, "analysis covariance")?;
    let ra = sym_sqrt(p_a);
    let middle = &ra * p_f * &ra;
    let a = &ra * sym_inv_sqrt(&middle) * &ra;
    Ok((&a + a.transpose()) * T::lit(0.5))
}
