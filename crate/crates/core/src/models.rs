//! Deterministic dynamics: Lorenz-63, Lorenz-96 and the implicit midpoint
//! flow map.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Autonomous vector field `dz/dt = f(z)`.
pub trait OdeModel<T: Real>: Send + Sync {
    fn dim(&self) -> usize;

    /// Writes `f(z)` into `out`. Both have length [`OdeModel::dim`].
    fn rhs_into(&self, z: &DVector<T>, out: &mut DVector<T>);

    fn params(&self) -> Vec<(&'static str, T)> {
        Vec::new()
    }

    fn rhs(&self, z: &DVector<T>) -> Result<DVector<T>> {
        if z.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                found: z.len(),
            });
        }
        let mut out = DVector::zeros(self.dim());
        self.rhs_into(z, &mut out);
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorenz63<T: Real> {
    pub sigma: T,
    pub rho: T,
    pub beta: T,
}

impl<T: Real> Default for Lorenz63<T> {
    fn default() -> Self {
        Self {
            sigma: T::lit(10.0),
            rho: T::lit(28.0),
            beta: T::lit(8.0 / 3.0),
        }
    }
}

impl<T: Real> OdeModel<T> for Lorenz63<T> {
    fn dim(&self) -> usize {
        3
    }

    fn rhs_into(&self, z: &DVector<T>, out: &mut DVector<T>) {
        let (x, y, w) = (z[0], z[1], z[2]);
        out[0] = self.sigma * (y - x);
        out[1] = x * (self.rho - w) - y;
        out[2] = x * y - self.beta * w;
    }

    fn params(&self) -> Vec<(&'static str, T)> {
        vec![
            ("sigma", self.sigma),
            ("rho", self.rho),
            ("beta", self.beta),
        ]
    }
}

/// Lorenz-96 on a periodic grid:
/// `du_j/dt = −(u_{j−1}u_{j+1} − u_{j−2}u_{j−1})/(3Δx) − u_j + F`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lorenz96<T: Real> {
    n: usize,
    pub forcing: T,
    pub dx: T,
}

impl<T: Real> Lorenz96<T> {
    pub fn new(n: usize, forcing: T, dx: T) -> Result<Self> {
        if n < 4 {
            return Err(Error::InvalidArgument(format!(
                "Lorenz-96 needs at least 4 grid points, got {n}"
            )));
        }
        if !(dx > T::zero()) {
            return Err(Error::InvalidArgument(
                "grid spacing must be positive".into(),
            ));
        }
        Ok(Self { n, forcing, dx })
    }
}

impl<T: Real> Default for Lorenz96<T> {
    fn default() -> Self {
        Self {
            n: 40,
            forcing: T::lit(8.0),
            dx: T::lit(1.0 / 3.0),
        }
    }
}

impl<T: Real> OdeModel<T> for Lorenz96<T> {
    fn dim(&self) -> usize {
        self.n
    }

    fn rhs_into(&self, u: &DVector<T>, out: &mut DVector<T>) {
        let n = self.n;
        let scale = T::one() / (T::lit(3.0) * self.dx);
        for j in 0..n {
            let um1 = u[(j + n - 1) % n];
            let um2 = u[(j + n - 2) % n];
            let up1 = u[(j + 1) % n];
            out[j] = -(um1 * up1 - um2 * um1) * scale - u[j] + self.forcing;
        }
    }

    fn params(&self) -> Vec<(&'static str, T)> {
        vec![("forcing", self.forcing), ("dx", self.dx)]
    }
}

/// `f(z) = A z`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearOde<T: Real> {
    pub a: DMatrix<T>,
}

impl<T: Real> OdeModel<T> for LinearOde<T> {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn rhs_into(&self, z: &DVector<T>, out: &mut DVector<T>) {
        self.a.mul_to(z, out);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowMapConfig<T: Real> {
    pub dt: T,
    pub steps_per_assimilation: usize,
    pub solver_tol: T,
    pub solver_max_iters: usize,
}

impl<T: Real> FlowMapConfig<T> {
    pub fn new(dt: T, steps_per_assimilation: usize) -> Self {
        Self {
            dt,
            steps_per_assimilation,
            solver_tol: T::solver_tolerance(),
            solver_max_iters: 100,
        }
    }

    /// `dt = 0.01`, 12 steps between observations.
    pub fn lorenz63() -> Self {
        Self::new(T::lit(0.01), 12)
    }

    /// `dt = 0.005`, 22 steps between observations.
    pub fn lorenz96() -> Self {
        Self::new(T::lit(0.005), 22)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > T::zero()) || !self.dt.is_finite() {
            return Err(Error::InvalidArgument("time step must be positive".into()));
        }
        if !(self.solver_tol > T::zero()) {
            return Err(Error::InvalidArgument(
                "solver tolerance must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One implicit midpoint step `z' = z + dt f((z + z')/2)`, solved by
/// fixed-point iteration from an explicit Euler predictor.
///
/// Negative `dt` integrates backwards; the scheme is symmetric.
pub fn implicit_midpoint_step<T: Real, M: OdeModel<T> + ?Sized>(
    model: &M,
    z: &DVector<T>,
    dt: T,
    tol: T,
    max_iters: usize,
) -> Result<DVector<T>> {
    if z.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: z.len(),
        });
    }
    let mut work = MidpointWork::new(z.len());
    let mut next = z.clone();
    midpoint_in_place(model, &mut next, dt, tol, max_iters, &mut work)?;
    Ok(next)
}

struct MidpointWork<T: Real> {
    start: DVector<T>,
    mid: DVector<T>,
    f: DVector<T>,
}

impl<T: Real> MidpointWork<T> {
    fn new(n: usize) -> Self {
        Self {
            start: DVector::zeros(n),
            mid: DVector::zeros(n),
            f: DVector::zeros(n),
        }
    }
}

/// Advances `z` by one implicit midpoint step, reusing `work` buffers.
fn midpoint_in_place<T: Real, M: OdeModel<T> + ?Sized>(
    model: &M,
    z: &mut DVector<T>,
    dt: T,
    tol: T,
    max_iters: usize,
    work: &mut MidpointWork<T>,
) -> Result<()> {
    let half = T::lit(0.5);
    let n = z.len();
    work.start.copy_from(z);
    model.rhs_into(&work.start, &mut work.f);
    // Explicit Euler predictor.
    z.axpy(dt, &work.f, T::one());
    let mut residual = T::zero();
    for _ in 0..max_iters {
        for k in 0..n {
            work.mid[k] = (work.start[k] + z[k]) * half;
        }
        model.rhs_into(&work.mid, &mut work.f);
        residual = T::zero();
        for k in 0..n {
            let candidate = work.start[k] + dt * work.f[k];
            let d = (candidate - z[k]).abs();
            if d > residual || !d.is_finite() {
                residual = d;
            }
            z[k] = candidate;
        }
        if !residual.is_finite() {
            break;
        }
        if residual <= tol {
            return Ok(());
        }
    }
    Err(Error::IntegrationFailure {
        iterations: max_iters,
        residual: residual.as_f64(),
    })
}

/// `Ψ = Ψ_IM^{[k]}` with `k = cfg.steps_per_assimilation`.
pub fn flow_map<T: Real, M: OdeModel<T> + ?Sized>(
    model: &M,
    z: &DVector<T>,
    cfg: &FlowMapConfig<T>,
) -> Result<DVector<T>> {
    cfg.validate()?;
    if z.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            found: z.len(),
        });
    }
    let mut state = z.clone();
    let mut work = MidpointWork::new(z.len());
    for _ in 0..cfg.steps_per_assimilation {
        midpoint_in_place(
            model,
            &mut state,
            cfg.dt,
            cfg.solver_tol,
            cfg.solver_max_iters,
            &mut work,
        )?;
    }
    Ok(state)
}

/// A map advancing a state from one observation time to the next.
pub trait FlowMap<T: Real>: Send + Sync {
    fn dim(&self) -> usize;
    fn advance(&self, z: &DVector<T>) -> Result<DVector<T>>;
}

/// An [`OdeModel`] discretized by [`flow_map`].
#[derive(Debug, Clone)]
pub struct Propagator<M, T: Real> {
    pub model: M,
    pub config: FlowMapConfig<T>,
}

impl<M, T: Real> Propagator<M, T> {
    pub fn new(model: M, config: FlowMapConfig<T>) -> Self {
        Self { model, config }
    }
}

impl<T: Real, M: OdeModel<T>> FlowMap<T> for Propagator<M, T> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn advance(&self, z: &DVector<T>) -> Result<DVector<T>> {
        flow_map(&self.model, z, &self.config)
    }
}

/// The linear map `z ↦ A z`, mostly useful as an analytically tractable test
/// system.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearMap<T: Real> {
    pub a: DMatrix<T>,
}

impl<T: Real> FlowMap<T> for LinearMap<T> {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn advance(&self, z: &DVector<T>) -> Result<DVector<T>> {
        if z.len() != self.a.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.a.ncols(),
                found: z.len(),
            });
        }
        Ok(&self.a * z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct Zero;
    impl OdeModel<f64> for Zero {
        fn dim(&self) -> usize {
            2
        }
        fn rhs_into(&self, _z: &DVector<f64>, out: &mut DVector<f64>) {
            out.fill(0.0);
        }
    }

    fn scalar(a: f64) -> LinearOde<f64> {
        LinearOde {
            a: DMatrix::from_element(1, 1, a),
        }
    }

    #[test]
    fn lorenz63_origin_is_fixed() {
        let f = Lorenz63::<f64>::default().rhs(&DVector::zeros(3)).unwrap();
        assert_eq!(f, DVector::zeros(3));
    }

    #[test]
    fn lorenz63_at_ones() {
        let f = Lorenz63::<f64>::default()
            .rhs(&DVector::from_element(3, 1.0))
            .unwrap();
        assert_abs_diff_eq!(f[0], 0.0);
        assert_abs_diff_eq!(f[1], 26.0);
        assert_abs_diff_eq!(f[2], 1.0 - 8.0 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn lorenz63_zero_sigma_freezes_x() {
        let model = Lorenz63 {
            sigma: 0.0,
            ..Default::default()
        };
        let f = model.rhs(&DVector::from_vec(vec![3.0, -7.0, 2.0])).unwrap();
        assert_eq!(f[0], 0.0);
    }

    #[test]
    fn lorenz63_rejects_wrong_dimension() {
        assert!(matches!(
            Lorenz63::<f64>::default().rhs(&DVector::zeros(4)),
            Err(Error::DimensionMismatch {
                expected: 3,
                found: 4
            })
        ));
    }

    #[test]
    fn lorenz96_homogeneous_equilibrium() {
        let model = Lorenz96::<f64>::default();
        let f = model.rhs(&DVector::from_element(40, 8.0)).unwrap();
        assert!(f.amax() < 1e-14);
        let f0 = model.rhs(&DVector::zeros(40)).unwrap();
        assert_eq!(f0, DVector::from_element(40, 8.0));
    }

    #[test]
    fn lorenz96_matches_naive_loop() {
        let model = Lorenz96::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let u = DVector::from_fn(40, |_, _| rng.random_range(-10.0..10.0));
        let f = model.rhs(&u).unwrap();
        let idx = |j: i64| u[j.rem_euclid(40) as usize];
        for j in 0..40i64 {
            let expect =
                -(idx(j - 1) * idx(j + 1) - idx(j - 2) * idx(j - 1)) / (3.0 / 3.0) - idx(j) + 8.0;
            assert_abs_diff_eq!(f[j as usize], expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn lorenz96_rejects_small_grids() {
        assert!(Lorenz96::new(3, 8.0, 1.0 / 3.0).is_err());
        assert!(Lorenz96::new(4, 8.0, 1.0 / 3.0).is_ok());
    }

    #[test]
    fn midpoint_with_zero_field_is_identity() {
        let z = DVector::from_vec(vec![1.0, -2.0]);
        let next = implicit_midpoint_step(&Zero, &z, 0.1, 1e-12, 100).unwrap();
        assert_eq!(next, z);
    }

    #[test]
    fn midpoint_linear_closed_form() {
        for &a in &[-3.0, -0.5, 0.7, 2.0] {
            let dt = 0.01;
            let z = DVector::from_element(1, 1.3);
            let next = implicit_midpoint_step(&scalar(a), &z, dt, 1e-14, 200).unwrap();
            let exact = 1.3 * (1.0 + a * dt / 2.0) / (1.0 - a * dt / 2.0);
            assert_abs_diff_eq!(next[0], exact, epsilon = 1e-12);
        }
    }

    #[test]
    fn midpoint_residual_on_lorenz63() {
        let model = Lorenz63::<f64>::default();
        let z = DVector::from_vec(vec![-5.8, -4.1, 27.3]);
        let next = implicit_midpoint_step(&model, &z, 0.01, 1e-12, 100).unwrap();
        let mid = (&z + &next) * 0.5;
        let residual = (&next - &z - model.rhs(&mid).unwrap() * 0.01).amax();
        assert!(residual < 1e-12, "residual {residual}");
    }

    #[test]
    fn midpoint_reports_nonconvergence() {
        let z = DVector::from_element(1, 1.0);
        // dt * a / 2 = 5 makes the fixed-point map expansive.
        let err = implicit_midpoint_step(&scalar(100.0), &z, 0.1, 1e-12, 20).unwrap_err();
        assert!(matches!(
            err,
            Error::IntegrationFailure { iterations: 20, .. }
        ));
    }

    #[test]
    fn flow_map_composition() {
        let model = Lorenz63::<f64>::default();
        let z = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let mut cfg = FlowMapConfig::lorenz63();
        cfg.steps_per_assimilation = 0;
        assert_eq!(flow_map(&model, &z, &cfg).unwrap(), z);
        cfg.steps_per_assimilation = 2;
        let two = flow_map(&model, &z, &cfg).unwrap();
        let one = implicit_midpoint_step(&model, &z, 0.01, 1e-12, 100).unwrap();
        let again = implicit_midpoint_step(&model, &one, 0.01, 1e-12, 100).unwrap();
        assert_eq!(two, again);
    }

    #[test]
    fn lorenz96_flow_stays_bounded() {
        let model = Lorenz96::<f64>::default();
        let mut u = DVector::from_element(40, 8.0);
        u[20] += 0.01;
        let cfg = FlowMapConfig::lorenz96();
        for _ in 0..200 {
            u = flow_map(&model, &u, &cfg).unwrap();
            assert!(u.amax() < 30.0);
        }
    }

    #[test]
    fn midpoint_is_symmetric() {
        let model = Lorenz63::<f64>::default();
        let z = DVector::from_vec(vec![2.0, 5.0, 20.0]);
        let tol = 1e-12;
        let fwd = implicit_midpoint_step(&model, &z, 0.01, tol, 100).unwrap();
        let back = implicit_midpoint_step(&model, &fwd, -0.01, tol, 100).unwrap();
        assert!((back - z).amax() < 10.0 * tol);
    }

    #[test]
    fn lorenz96_shift_equivariance() {
        let model = Lorenz96::<f64>::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u = DVector::from_fn(40, |_, _| rng.random_range(-8.0..8.0));
        let shifted = DVector::from_fn(40, |j, _| u[(j + 3) % 40]);
        let f = model.rhs(&u).unwrap();
        let fs = model.rhs(&shifted).unwrap();
        for j in 0..40 {
            assert_abs_diff_eq!(fs[j], f[(j + 3) % 40], epsilon = 1e-12);
        }
    }

    #[test]
    fn generic_over_f32() {
        let model = Lorenz63::<f32>::default();
        let z = DVector::from_vec(vec![1.0f32, 1.0, 1.0]);
        let next = flow_map(&model, &z, &FlowMapConfig::lorenz63()).unwrap();
        assert!(next.iter().all(|v| v.is_finite()));
    }
}
