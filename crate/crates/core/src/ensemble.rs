//! Ensemble containers and the shared ensemble statistics.
//!
//! An [`Ensemble`] stores its `M` members as the columns of an `N_z × M`
//! matrix, so every linear ensemble transform is a single matrix product
//! `Z^a = Z^f S`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, DVectorView};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Absolute tolerance used by invariant checks unless a caller overrides it.
pub const DEFAULT_TOLERANCE: f64 = 1e-10;

/// A collection of `M ≥ 1` model states of common dimension `N_z`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble<T: Real> {
    states: DMatrix<T>,
}

impl<T: Real> Ensemble<T> {
    /// Wraps an `N_z × M` matrix whose columns are the members.
    pub fn from_matrix(states: DMatrix<T>) -> Result<Self> {
        if states.ncols() == 0 {
            return Err(Error::DegenerateEnsemble {
                members: 0,
                required: 1,
            });
        }
        if states.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "ensemble contains non-finite entries".into(),
            ));
        }
        Ok(Self { states })
    }

    pub fn from_members(members: &[DVector<T>]) -> Result<Self> {
        let first = members.first().ok_or(Error::DegenerateEnsemble {
            members: 0,
            required: 1,
        })?;
        let dim = first.len();
        if let Some(bad) = members.iter().find(|m| m.len() != dim) {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: bad.len(),
            });
        }
        Self::from_matrix(DMatrix::from_columns(members))
    }

    /// State dimension `N_z`.
    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    /// Member count `M`.
    pub fn size(&self) -> usize {
        self.states.ncols()
    }

    pub fn member(&self, i: usize) -> DVectorView<'_, T> {
        self.states.column(i)
    }

    pub fn members(&self) -> impl Iterator<Item = DVectorView<'_, T>> + '_ {
        self.states.column_iter()
    }

    pub fn as_matrix(&self) -> &DMatrix<T> {
        &self.states
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.states
    }

    pub fn mean(&self) -> DVector<T> {
        ensemble_mean(self)
    }

    pub fn deviations(&self) -> Result<DMatrix<T>> {
        ensemble_deviations(self)
    }

    pub fn covariance(&self) -> Result<DMatrix<T>> {
        ensemble_covariance(self)
    }

    /// `z_j^a = Σ_i z_i s_ij`.
    pub fn transform(&self, s: &TransformMatrix<T>) -> Result<Self> {
        if s.size() != self.size() {
            return Err(Error::DimensionMismatch {
                expected: self.size(),
                found: s.size(),
            });
        }
        Ok(Self {
            states: &self.states * s.as_matrix(),
        })
    }

    pub(crate) fn from_matrix_unchecked(states: DMatrix<T>) -> Self {
        Self { states }
    }

    pub(crate) fn require_members(&self, required: usize) -> Result<()> {
        if self.size() < required {
            Err(Error::DegenerateEnsemble {
                members: self.size(),
                required,
            })
        } else {
            Ok(())
        }
    }
}

/// Normalized importance weights: `w_i ≥ 0`, `Σ w_i = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector<T: Real>(DVector<T>);

impl<T: Real> WeightVector<T> {
    pub fn new(w: DVector<T>) -> Result<Self> {
        if w.is_empty() {
            return Err(Error::InvalidMarginal("empty weight vector".into()));
        }
        if w.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::InvalidMarginal(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let sum = w.sum();
        if (sum - T::one()).abs() > Self::sum_tolerance(w.len()) {
            return Err(Error::InvalidMarginal(format!(
                "weights sum to {sum}, expected 1"
            )));
        }
        Ok(Self(w))
    }

    /// Normalizes nonnegative values; fails if they sum to zero.
    pub fn from_unnormalized(w: DVector<T>) -> Result<Self> {
        if w.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::InvalidMarginal(
                "weights must be finite and nonnegative".into(),
            ));
        }
        let sum = w.sum();
        if sum <= T::zero() {
            return Err(Error::WeightCollapse);
        }
        Ok(Self(w / sum))
    }

    pub fn uniform(m: usize) -> Self {
        let m = m.max(1);
        Self(DVector::from_element(m, T::one() / T::lit(m as f64)))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_vector(&self) -> &DVector<T> {
        &self.0
    }

    pub fn into_vector(self) -> DVector<T> {
        self.0
    }

    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        self.0.iter().copied()
    }

    fn sum_tolerance(m: usize) -> T {
        T::lit(1e-12).max(T::default_epsilon() * T::lit(8.0 * m as f64))
    }
}

impl<T: Real> std::ops::Index<usize> for WeightVector<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

/// `M × M` analysis operator with unit column sums.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformMatrix<T: Real>(DMatrix<T>);

impl<T: Real> TransformMatrix<T> {
    /// Accepts a square matrix whose columns sum to one within `tol`.
    pub fn new(s: DMatrix<T>, tol: T) -> Result<Self> {
        if !s.is_square() {
            return Err(Error::DimensionMismatch {
                expected: s.nrows(),
                found: s.ncols(),
            });
        }
        let t = Self(s);
        let defect = t.column_sum_defect();
        if !(defect <= tol) {
            return Err(Error::InvalidArgument(format!(
                "transform column sums deviate from 1 by {defect}"
            )));
        }
        Ok(t)
    }

    pub fn identity(m: usize) -> Self {
        Self(DMatrix::identity(m, m))
    }

    pub(crate) fn from_matrix_unchecked(s: DMatrix<T>) -> Self {
        Self(s)
    }

    pub fn size(&self) -> usize {
        self.0.ncols()
    }

    pub fn as_matrix(&self) -> &DMatrix<T> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<T> {
        self.0
    }

    /// `max_j |Σ_i s_ij − 1|`.
    pub fn column_sum_defect(&self) -> T {
        self.0
            .column_iter()
            .map(|c| (c.sum() - T::one()).abs())
            .fold(T::zero(), |a, b| a.max(b))
    }

    /// True when every entry lies in `[−tol, 1 + tol]`.
    pub fn is_markov(&self, tol: T) -> bool {
        self.0.iter().all(|&s| s >= -tol && s <= T::one() + tol)
    }

    /// Effective resampling weights `ŵ_i = M⁻¹ Σ_j s_ij`.
    pub fn row_frequencies(&self) -> DVector<T> {
        let m = T::lit(self.size() as f64);
        DVector::from_iterator(self.0.nrows(), self.0.row_iter().map(|r| r.sum() / m))
    }
}

type ForwardFn<T> = dyn Fn(DVectorView<'_, T>) -> DVector<T> + Send + Sync;

/// The forward map `h: R^{N_z} → R^{N_y}`.
#[derive(Clone)]
pub enum ForwardMap<T: Real> {
    /// `h(z)_k = z[indices[k]]`.
    Selection(Vec<usize>),
    /// `h(z) = H z`.
    Linear(DMatrix<T>),
    Custom {
        output_dim: usize,
        map: Arc<ForwardFn<T>>,
    },
}

impl<T: Real> fmt::Debug for ForwardMap<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Selection(idx) => f.debug_tuple("Selection").field(idx).finish(),
            Self::Linear(h) => f.debug_tuple("Linear").field(h).finish(),
            Self::Custom { output_dim, .. } => f
                .debug_struct("Custom")
                .field("output_dim", output_dim)
                .finish_non_exhaustive(),
        }
    }
}

impl<T: Real> ForwardMap<T> {
    pub fn output_dim(&self) -> usize {
        match self {
            Self::Selection(idx) => idx.len(),
            Self::Linear(h) => h.nrows(),
            Self::Custom { output_dim, .. } => *output_dim,
        }
    }

    pub fn apply(&self, z: DVectorView<'_, T>) -> DVector<T> {
        match self {
            Self::Selection(idx) => DVector::from_iterator(idx.len(), idx.iter().map(|&k| z[k])),
            Self::Linear(h) => h * z,
            Self::Custom { map, .. } => map(z),
        }
    }
}

/// Forward map, diagonal observation error covariance and optional
/// observation positions.
#[derive(Debug, Clone)]
pub struct ObservationModel<T: Real> {
    forward: ForwardMap<T>,
    r_diag: DVector<T>,
    locations: Option<Vec<T>>,
}

impl<T: Real> ObservationModel<T> {
    pub fn new(forward: ForwardMap<T>, r_diag: DVector<T>) -> Result<Self> {
        if r_diag.len() != forward.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: forward.output_dim(),
                found: r_diag.len(),
            });
        }
        if r_diag.iter().any(|r| !(*r > T::zero()) || !r.is_finite()) {
            return Err(Error::InvalidArgument(
                "observation error variances must be positive".into(),
            ));
        }
        Ok(Self {
            forward,
            r_diag,
            locations: None,
        })
    }

    /// Component selection with a common error variance.
    pub fn selection(indices: Vec<usize>, variance: T) -> Result<Self> {
        let n = indices.len();
        Self::new(
            ForwardMap::Selection(indices),
            DVector::from_element(n, variance),
        )
    }

    pub fn with_locations(mut self, locations: Vec<T>) -> Result<Self> {
        if locations.len() != self.obs_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.obs_dim(),
                found: locations.len(),
            });
        }
        self.locations = Some(locations);
        Ok(self)
    }

    pub fn obs_dim(&self) -> usize {
        self.r_diag.len()
    }

    pub fn forward(&self) -> &ForwardMap<T> {
        &self.forward
    }

    pub fn r_diag(&self) -> &DVector<T> {
        &self.r_diag
    }

    pub fn locations(&self) -> Option<&[T]> {
        self.locations.as_deref()
    }

    pub fn observe(&self, z: DVectorView<'_, T>) -> DVector<T> {
        self.forward.apply(z)
    }

    /// `N_y × M` matrix with columns `h(z_i)`.
    pub fn observe_ensemble(&self, ens: &Ensemble<T>) -> DMatrix<T> {
        let cols: Vec<DVector<T>> = ens.members().map(|z| self.forward.apply(z)).collect();
        DMatrix::from_columns(&cols)
    }

    pub(crate) fn check_obs(&self, y: &DVector<T>) -> Result<()> {
        if y.len() != self.obs_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.obs_dim(),
                found: y.len(),
            });
        }
        Ok(())
    }
}

pub fn ensemble_mean<T: Real>(ens: &Ensemble<T>) -> DVector<T> {
    row_means(ens.as_matrix())
}

/// Columns `z_i − z̄`.
pub fn ensemble_deviations<T: Real>(ens: &Ensemble<T>) -> Result<DMatrix<T>> {
    ens.require_members(2)?;
    Ok(centered(ens.as_matrix()))
}

/// `P = A Aᵀ / (M − 1)`.
pub fn ensemble_covariance<T: Real>(ens: &Ensemble<T>) -> Result<DMatrix<T>> {
    let a = ensemble_deviations(ens)?;
    let scale = T::one() / T::lit((ens.size() - 1) as f64);
    Ok((&a * a.transpose()) * scale)
}

/// `P_zy = A_z A_yᵀ / (M − 1)` for predicted observations `obs_ens` (`N_y × M`).
pub fn cross_covariance<T: Real>(ens: &Ensemble<T>, obs_ens: &DMatrix<T>) -> Result<DMatrix<T>> {
    if obs_ens.ncols() != ens.size() {
        return Err(Error::DimensionMismatch {
            expected: ens.size(),
            found: obs_ens.ncols(),
        });
    }
    let a_z = ensemble_deviations(ens)?;
    let a_y = centered(obs_ens);
    let scale = T::one() / T::lit((ens.size() - 1) as f64);
    Ok((&a_z * a_y.transpose()) * scale)
}

pub(crate) fn row_means<T: Real>(x: &DMatrix<T>) -> DVector<T> {
    let m = T::lit(x.ncols() as f64);
    let mut mean = DVector::zeros(x.nrows());
    for col in x.column_iter() {
        mean += col;
    }
    mean / m
}

pub(crate) fn centered<T: Real>(x: &DMatrix<T>) -> DMatrix<T> {
    let mean = row_means(x);
    let mut a = x.clone();
    for mut col in a.column_iter_mut() {
        col -= &mean;
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_ensemble(dim: usize, m: usize, seed: u64) -> Ensemble<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ensemble::from_matrix(DMatrix::from_fn(dim, m, |_, _| rng.random_range(-3.0..3.0))).unwrap()
    }

    #[test]
    fn mean_of_two_members_is_midpoint() {
        let ens = Ensemble::from_members(&[
            DVector::from_vec(vec![0.0, 0.0]),
            DVector::from_vec(vec![2.0, 2.0]),
        ])
        .unwrap();
        assert_eq!(ens.mean(), DVector::from_vec(vec![1.0, 1.0]));
    }

    #[test]
    fn mean_of_single_member_is_member() {
        let z = DVector::from_vec(vec![1.5, -2.0, 7.25]);
        let ens = Ensemble::from_members(std::slice::from_ref(&z)).unwrap();
        assert_eq!(ens.mean(), z);
    }

    #[test]
    fn mean_matches_naive_sum() {
        let ens = random_ensemble(4, 5, 1);
        let mean = ens.mean();
        for r in 0..4 {
            let mut s = 0.0;
            for c in 0..5 {
                s += ens.as_matrix()[(r, c)];
            }
            assert_abs_diff_eq!(mean[r], s / 5.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn deviations_of_two_points() {
        let ens =
            Ensemble::from_members(&[DVector::from_vec(vec![0.0]), DVector::from_vec(vec![2.0])])
                .unwrap();
        let a = ens.deviations().unwrap();
        assert_eq!(a, DMatrix::from_row_slice(1, 2, &[-1.0, 1.0]));
    }

    #[test]
    fn identical_members_have_zero_spread() {
        let z = DVector::from_vec(vec![3.0, -1.0]);
        let ens = Ensemble::from_members(&[z.clone(), z.clone(), z]).unwrap();
        assert!(ens.deviations().unwrap().iter().all(|&v| v == 0.0));
        assert!(ens.covariance().unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn deviation_rows_sum_to_zero() {
        let ens = random_ensemble(6, 9, 2);
        let a = ens.deviations().unwrap();
        for row in a.row_iter() {
            assert!(row.sum().abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_ensemble_is_rejected() {
        let ens = random_ensemble(3, 1, 3);
        assert!(matches!(
            ens.deviations(),
            Err(Error::DegenerateEnsemble { members: 1, .. })
        ));
        assert!(ens.covariance().is_err());
        let obs = DMatrix::zeros(1, 1);
        assert!(cross_covariance(&ens, &obs).is_err());
    }

    #[test]
    fn variance_of_symmetric_pair() {
        let ens =
            Ensemble::from_members(&[DVector::from_vec(vec![-1.0]), DVector::from_vec(vec![1.0])])
                .unwrap();
        assert_eq!(ens.covariance().unwrap()[(0, 0)], 2.0);
    }

    #[test]
    fn covariance_matches_two_pass_formula() {
        let ens = random_ensemble(3, 10, 4);
        let p = ens.covariance().unwrap();
        let x = ens.as_matrix();
        for r in 0..3 {
            for c in 0..3 {
                let mr: f64 = (0..10).map(|k| x[(r, k)]).sum::<f64>() / 10.0;
                let mc: f64 = (0..10).map(|k| x[(c, k)]).sum::<f64>() / 10.0;
                let s: f64 = (0..10).map(|k| (x[(r, k)] - mr) * (x[(c, k)] - mc)).sum();
                assert_abs_diff_eq!(p[(r, c)], s / 9.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn cross_covariance_with_identity_map_is_covariance() {
        let ens = random_ensemble(3, 7, 5);
        let om = ObservationModel::selection(vec![0, 1, 2], 1.0).unwrap();
        let y = om.observe_ensemble(&ens);
        let pzy = cross_covariance(&ens, &y).unwrap();
        assert_abs_diff_eq!(pzy, ens.covariance().unwrap(), epsilon = 1e-14);
    }

    #[test]
    fn cross_covariance_with_constant_map_is_zero() {
        let ens = random_ensemble(3, 7, 6);
        let y = DMatrix::from_element(2, 7, 4.2);
        assert!(cross_covariance(&ens, &y)
            .unwrap()
            .iter()
            .all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn cross_covariance_matches_deviation_product() {
        let ens = random_ensemble(4, 8, 7);
        let h = DMatrix::from_row_slice(2, 4, &[1.0, -2.0, 0.5, 0.0, 0.0, 1.0, 1.0, 3.0]);
        let om =
            ObservationModel::new(ForwardMap::Linear(h), DVector::from_element(2, 1.0)).unwrap();
        let y = om.observe_ensemble(&ens);
        let x = ens.as_matrix();
        let pzy = cross_covariance(&ens, &y).unwrap();
        for r in 0..4 {
            for k in 0..2 {
                let mx: f64 = (0..8).map(|i| x[(r, i)]).sum::<f64>() / 8.0;
                let my: f64 = (0..8).map(|i| y[(k, i)]).sum::<f64>() / 8.0;
                let s: f64 = (0..8).map(|i| (x[(r, i)] - mx) * (y[(k, i)] - my)).sum();
                assert_abs_diff_eq!(pzy[(r, k)], s / 7.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn weight_vector_validation() {
        assert!(WeightVector::new(DVector::from_vec(vec![0.5, 0.5])).is_ok());
        assert!(WeightVector::new(DVector::from_vec(vec![0.5, 0.6])).is_err());
        assert!(WeightVector::new(DVector::from_vec(vec![1.5, -0.5])).is_err());
        assert!(matches!(
            WeightVector::<f64>::from_unnormalized(DVector::zeros(3)),
            Err(Error::WeightCollapse)
        ));
    }

    #[test]
    fn transform_of_identical_members_is_identity() {
        let z = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let ens = Ensemble::from_members(&[z.clone(), z.clone(), z.clone()]).unwrap();
        let s = DMatrix::from_row_slice(3, 3, &[2.0, -1.0, 0.2, -0.5, 1.0, 0.3, -0.5, 1.0, 0.5]);
        let s = TransformMatrix::new(s, 1e-12).unwrap();
        let out = ens.transform(&s).unwrap();
        for col in out.members() {
            assert_abs_diff_eq!(col.into_owned(), z, epsilon = 1e-12);
        }
    }

    #[test]
    fn transform_rejects_bad_column_sums() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.5, 1.0]);
        assert!(TransformMatrix::new(s, 1e-10).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn covariance_is_permutation_invariant(
                vals in proptest::collection::vec(-10.0f64..10.0, 12),
                rot in 0usize..4,
            ) {
                let x = DMatrix::from_vec(3, 4, vals);
                let ens = Ensemble::from_matrix(x.clone()).unwrap();
                let perm: Vec<_> = (0..4).map(|j| x.column((j + rot) % 4).into_owned()).collect();
                let permuted = Ensemble::from_members(&perm).unwrap();
                let diff = ens.covariance().unwrap() - permuted.covariance().unwrap();
                prop_assert!(diff.amax() < 1e-10);
            }

            #[test]
            fn unit_column_sums_preserve_identical_ensembles(
                z in proptest::collection::vec(-5.0f64..5.0, 2),
                raw in proptest::collection::vec(-2.0f64..2.0, 9),
            ) {
                let mut s = DMatrix::from_vec(3, 3, raw);
                for j in 0..3 {
                    let defect = 1.0 - s.column(j).sum();
                    s[(0, j)] += defect;
                }
                let s = TransformMatrix::new(s, 1e-10).unwrap();
                let zv = DVector::from_vec(z);
                let ens = Ensemble::from_members(&[zv.clone(), zv.clone(), zv.clone()]).unwrap();
                for col in ens.transform(&s).unwrap().members() {
                    prop_assert!((col.into_owned() - &zv).amax() < 1e-10);
                }
            }
        }
    }
}
