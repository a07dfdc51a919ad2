//! R-localization on a periodic one-dimensional grid: the LETKF and the
//! localized ETPF.
//!
//! Each grid point `x_j` gets its own transform `S(x_j)`, computed with
//! observation error variances inflated by a distance kernel, and component
//! `j` of the analysis is assembled from it.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::ensemble::{centered, row_means, Ensemble, ObservationModel, TransformMatrix};
use crate::error::{Error, Result};
use crate::filters::{
    apply_rejuvenation, weights_from_log, AnalysisDiagnostics, AnalysisResult, AnalysisTransform,
};
use crate::rng::RngStream;
use crate::scalar::Real;
use crate::transport::{solve_optimal_coupling, SquaredEuclidean};

/// A periodic grid `x_j = j Δx`, `j = 0, …, N − 1`, with `Δx = L / N`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry<T> {
    length: T,
    n_grid: usize,
}

impl<T: Real> GridGeometry<T> {
    pub fn new(length: T, n_grid: usize) -> Result<Self> {
        if n_grid == 0 || !(length > T::zero()) {
            return Err(Error::InvalidArgument(
                "grid needs L > 0 and at least one point".into(),
            ));
        }
        Ok(Self { length, n_grid })
    }

    /// Grid measured in index units: `Δx = 1`, `L = N`.
    pub fn index_units(n_grid: usize) -> Self {
        Self {
            length: T::lit(n_grid.max(1) as f64),
            n_grid: n_grid.max(1),
        }
    }

    pub fn length(&self) -> T {
        self.length
    }

    pub fn n_grid(&self) -> usize {
        self.n_grid
    }

    pub fn dx(&self) -> T {
        self.length / T::lit(self.n_grid as f64)
    }

    pub fn position(&self, j: usize) -> T {
        T::lit(j as f64) * self.dx()
    }

    pub fn distance(&self, x: T, x2: T) -> T {
        periodic_distance(x, x2, self.length)
    }
}

/// `min{|x − x' − L|, |x − x'|, |x − x' + L|}`, folded so that it never
/// exceeds `L / 2` even for points outside `[0, L)`.
pub fn periodic_distance<T: Real>(x: T, x2: T, length: T) -> T {
    let d = (x - x2) % length;
    let d = d.abs();
    d.min(length - d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum KernelKind {
    /// `1 − s/2` on `s ≤ 2`.
    Triangular,
    /// The Gaspari–Cohn quintic, supported on `s ≤ 2`.
    #[default]
    GaspariCohn,
}

impl KernelKind {
    /// Kernel value at distance `dist` for radius `r`. A zero radius gives a
    /// delta kernel and an infinite radius the constant 1.
    pub fn weight<T: Real>(self, dist: T, r: T) -> T {
        if r == T::zero() {
            return if dist == T::zero() {
                T::one()
            } else {
                T::zero()
            };
        }
        if !r.is_finite() {
            return T::one();
        }
        let s = dist / r;
        match self {
            Self::Triangular => triangular_profile(s),
            Self::GaspariCohn => gaspari_cohn_profile(s),
        }
    }
}

pub fn triangular_profile<T: Real>(s: T) -> T {
    if s <= T::lit(2.0) {
        T::one() - s / T::lit(2.0)
    } else {
        T::zero()
    }
}

pub fn gaspari_cohn_profile<T: Real>(s: T) -> T {
    let c = |v: f64| T::lit(v);
    if s <= T::one() {
        let s2 = s * s;
        T::one() - c(5.0 / 3.0) * s2 + c(5.0 / 8.0) * s2 * s + c(0.5) * s2 * s2
            - c(0.25) * s2 * s2 * s
    } else if s <= c(2.0) {
        let s2 = s * s;
        // Clamped because the polynomial rounds to tiny negatives near s = 2.
        (-c(2.0 / 3.0) / s + c(4.0) - c(5.0) * s + c(5.0 / 3.0) * s2 + c(5.0 / 8.0) * s2 * s
            - c(0.5) * s2 * s2
            + c(1.0 / 12.0) * s2 * s2 * s)
            .max(T::zero())
    } else {
        T::zero()
    }
}

pub fn kernel_triangular<T: Real>(x: T, x2: T, r: T, length: T) -> T {
    KernelKind::Triangular.weight(periodic_distance(x, x2, length), r)
}

pub fn kernel_gaspari_cohn<T: Real>(x: T, x2: T, r: T, length: T) -> T {
    KernelKind::GaspariCohn.weight(periodic_distance(x, x2, length), r)
}

/// Kernel and radii for R-localization. Radii are in the units of the
/// [`GridGeometry`]; with [`GridGeometry::index_units`] they count grid points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalizationConfig<T> {
    pub kernel: KernelKind,
    /// Radius for tapering observation influence.
    pub r_loc_r: T,
    /// Radius of the localized transport cost.
    pub r_loc_c: T,
}

impl<T: Real> LocalizationConfig<T> {
    pub fn new(kernel: KernelKind, r_loc_r: T, r_loc_c: T) -> Result<Self> {
        if !(r_loc_r >= T::zero() && r_loc_c >= T::zero()) {
            return Err(Error::InvalidArgument(
                "localization radii must be nonnegative".into(),
            ));
        }
        Ok(Self {
            kernel,
            r_loc_r,
            r_loc_c,
        })
    }
}

/// Diagonal of `R̃⁻¹(x)`: `K(x, x_k; r_loc_R) / r_kk`.
pub fn localized_r_inverse<T: Real>(
    x: T,
    om: &ObservationModel<T>,
    cfg: &LocalizationConfig<T>,
    geom: &GridGeometry<T>,
) -> Result<DVector<T>> {
    let locs = om.locations().ok_or(Error::MissingObservationLocations)?;
    Ok(DVector::from_iterator(
        locs.len(),
        locs.iter()
            .zip(om.r_diag().iter())
            .map(|(&xk, &r)| cfg.kernel.weight(geom.distance(x, xk), cfg.r_loc_r) / r),
    ))
}

fn check_grid<T: Real>(forecast: &Ensemble<T>, geom: &GridGeometry<T>) -> Result<()> {
    forecast.require_members(2)?;
    if forecast.dim() != geom.n_grid() {
        return Err(Error::DimensionMismatch {
            expected: geom.n_grid(),
            found: forecast.dim(),
        });
    }
    Ok(())
}

/// Local ensemble transform Kalman filter:
/// `Q(x) = {I + A_yᵀ R̃⁻¹(x) A_y / (M − 1)}⁻¹`, `D(x) = Q(x)^{1/2}` and
/// `S(x) = D(x) + w̄(x) 1ᵀ` with `w̄ = Q A_yᵀ R̃⁻¹ (y − ȳ) / (M − 1)`.
pub fn letkf_analysis<T: Real>(
    forecast: &Ensemble<T>,
    y: &DVector<T>,
    om: &ObservationModel<T>,
    cfg: &LocalizationConfig<T>,
    geom: &GridGeometry<T>,
) -> Result<AnalysisResult<T>> {
    check_grid(forecast, geom)?;
    if y.len() != om.obs_dim() {
        return Err(Error::DimensionMismatch {
            expected: om.obs_dim(),
            found: y.len(),
        });
    }
    let m = forecast.size();
    let m1 = T::lit((m - 1) as f64);
    let y_ens = om.observe_ensemble(forecast);
    let a_y = centered(&y_ens);
    let innovation = y - row_means(&y_ens);
    let zf = forecast.as_matrix();
    let mut za = zf.clone();
    let mut transforms = Vec::with_capacity(geom.n_grid());
    for g in 0..geom.n_grid() {
        let r_inv = localized_r_inverse(geom.position(g), om, cfg, geom)?;
        let active: Vec<usize> = (0..r_inv.len()).filter(|&k| r_inv[k] > T::zero()).collect();
        let s = if active.is_empty() {
            DMatrix::identity(m, m)
        } else {
            let a = a_y.select_rows(active.iter());
            let ri = DVector::from_iterator(active.len(), active.iter().map(|&k| r_inv[k]));
            let d_in = DVector::from_iterator(active.len(), active.iter().map(|&k| innovation[k]));
            let mut scaled = a.clone();
            for (mut row, &rk) in scaled.row_iter_mut().zip(ri.iter()) {
                row *= rk;
            }
            let precision = DMatrix::identity(m, m) + a.transpose() * &scaled / m1;
            let eig = SymmetricEigen::new(precision);
            let v = &eig.eigenvectors;
            let floor = T::lit(crate::linalg::EIGENVALUE_FLOOR);
            let lam: Vec<T> = eig.eigenvalues.iter().map(|&l| l.max(floor)).collect();
            let scale_cols = |f: &dyn Fn(T) -> T| {
                let mut vs = v.clone();
                for (mut col, &l) in vs.column_iter_mut().zip(lam.iter()) {
                    col *= f(l);
                }
                vs * v.transpose()
            };
            let q = scale_cols(&|l| T::one() / l);
            let d = scale_cols(&|l| T::one() / l.sqrt());
            let w_bar = q * (scaled.transpose() * d_in) / m1;
            let mut s = d;
            for mut col in s.column_iter_mut() {
                col += &w_bar;
            }
            s
        };
        let row = zf.row(g) * &s;
        za.set_row(g, &row);
        transforms.push(TransformMatrix::from_matrix_unchecked(s));
    }
    Ok(AnalysisResult {
        analysis: Ensemble::from_matrix_unchecked(za),
        transform: Some(AnalysisTransform::Local(transforms)),
        weights: None,
        diagnostics: AnalysisDiagnostics::default(),
    })
}

/// Localized ETPF. At each grid point the weights use `R̃⁻¹(x)` and the
/// coupling minimizes the kernel-weighted Riemann-sum cost
/// `Σ_{j'} K(x, x_{j'}; r_loc_c) |z_i(x_{j'}) − z_j(x_{j'})|² Δx`.
/// Rejuvenation with `h_rej² P_zz^f` is applied to the assembled analysis.
pub fn localized_etpf_analysis<T: Real>(
    forecast: &Ensemble<T>,
    y: &DVector<T>,
    om: &ObservationModel<T>,
    cfg: &LocalizationConfig<T>,
    geom: &GridGeometry<T>,
    h_rej: T,
    rng: &mut RngStream,
) -> Result<AnalysisResult<T>> {
    check_grid(forecast, geom)?;
    if y.len() != om.obs_dim() {
        return Err(Error::DimensionMismatch {
            expected: om.obs_dim(),
            found: y.len(),
        });
    }
    let m = forecast.size();
    let zf = forecast.as_matrix();
    let y_ens = om.observe_ensemble(forecast);
    // Squared innovations per observation and member.
    let sq = DMatrix::from_fn(om.obs_dim(), m, |k, i| {
        let e = y_ens[(k, i)] - y[k];
        e * e
    });
    let uniform = vec![T::one() / T::lit(m as f64); m];
    let dx = geom.dx();
    let mut za = zf.clone();
    let mut transforms = Vec::with_capacity(geom.n_grid());
    let mut collapsed = 0usize;
    let mut ess_sum = T::zero();
    for g in 0..geom.n_grid() {
        let x = geom.position(g);
        let r_inv = localized_r_inverse(x, om, cfg, geom)?;
        let log_w = DVector::from_fn(m, |i, _| -T::lit(0.5) * sq.column(i).dot(&r_inv));
        let s = match weights_from_log(&log_w) {
            Err(Error::WeightCollapse) => {
                collapsed += 1;
                log::warn!(
                    "localized weights collapsed at grid point {g}; using the identity transform"
                );
                ess_sum += T::one();
                DMatrix::identity(m, m)
            }
            Err(e) => return Err(e),
            Ok(w) => {
                ess_sum += crate::filters::effective_sample_size(&w);
                if w.iter().all(|wi| wi == uniform[0]) {
                    DMatrix::identity(m, m)
                } else {
                    let rows: Vec<usize> = (0..geom.n_grid())
                        .filter(|&r| {
                            cfg.kernel
                                .weight(geom.distance(x, geom.position(r)), cfg.r_loc_c)
                                > T::zero()
                        })
                        .collect();
                    let pts = DMatrix::from_fn(rows.len(), m, |a, i| {
                        let kw = cfg
                            .kernel
                            .weight(geom.distance(x, geom.position(rows[a])), cfg.r_loc_c);
                        (kw * dx).sqrt() * zf[(rows[a], i)]
                    });
                    let cost = SquaredEuclidean::new(&pts, &pts);
                    let weights: Vec<T> = w.iter().collect();
                    let sol = solve_optimal_coupling(&cost, &weights, &uniform)?;
                    sol.coupling.to_dense() * T::lit(m as f64)
                }
            }
        };
        let row = zf.row(g) * &s;
        za.set_row(g, &row);
        transforms.push(TransformMatrix::from_matrix_unchecked(s));
    }
    let mut analysis = Ensemble::from_matrix_unchecked(za);
    if h_rej > T::zero() {
        analysis = apply_rejuvenation(analysis, forecast, h_rej, rng)?;
    }
    Ok(AnalysisResult {
        analysis,
        transform: Some(AnalysisTransform::Local(transforms)),
        weights: None,
        diagnostics: AnalysisDiagnostics {
            ess: Some(ess_sum / T::lit(geom.n_grid() as f64)),
            lp_objective: None,
            collapsed_points: collapsed,
        },
    })
}

/// `max_j ‖S(x_{j+1}) − S(x_j)‖_F` over the periodic grid.
pub fn transform_roughness<T: Real>(transforms: &[TransformMatrix<T>]) -> T {
    let n = transforms.len();
    (0..n)
        .map(|j| (transforms[(j + 1) % n].as_matrix() - transforms[j].as_matrix()).norm())
        .fold(T::zero(), |a, b| a.max(b))
}
