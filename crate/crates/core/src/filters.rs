//! Global analysis steps of the linear ensemble transform family.
//!
//! Every filter maps a forecast ensemble `Z^f` to `Z^a = Z^f S` for some
//! transform `S` with unit column sums, optionally followed by additive
//! rejuvenation noise.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::{
    centered, ensemble_deviations, row_means, Ensemble, ObservationModel, TransformMatrix,
    WeightVector,
};
use crate::error::{Error, Result};
use crate::linalg::{sym_inv_sqrt, sym_sqrt};
use crate::rng::RngStream;
use crate::scalar::Real;
use crate::transport::{solve_optimal_coupling, CouplingMatrix, SquaredEuclidean};

/// The analysis operator of one filter step.
#[derive(Debug, Clone, PartialEq)]
pub enum AnalysisTransform<T: Real> {
    Dense(TransformMatrix<T>),
    /// 0/1 transform: column `j` selects forecast member `ancestors[j]`.
    Ancestors(Vec<usize>),
    /// `S = M T` for a coupling `T` with uniform column marginal.
    Coupling(CouplingMatrix<T>),
    /// One transform per grid point, applied componentwise.
    Local(Vec<TransformMatrix<T>>),
}

impl<T: Real> AnalysisTransform<T> {
    pub fn size(&self) -> usize {
        match self {
            Self::Dense(s) => s.size(),
            Self::Ancestors(a) => a.len(),
            Self::Coupling(t) => t.cols(),
            Self::Local(s) => s.first().map_or(0, |s| s.size()),
        }
    }

    /// Dense `S`; `None` for spatially varying transforms.
    pub fn to_dense(&self) -> Option<TransformMatrix<T>> {
        match self {
            Self::Dense(s) => Some(s.clone()),
            Self::Ancestors(a) => Some(ancestors_to_transform(a, a.len())),
            Self::Coupling(t) => {
                let m = T::lit(t.cols() as f64);
                Some(TransformMatrix::from_matrix_unchecked(t.to_dense() * m))
            }
            Self::Local(_) => None,
        }
    }
}

/// Scalar by-products of an analysis step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnalysisDiagnostics<T> {
    pub ess: Option<T>,
    pub lp_objective: Option<T>,
    /// Grid points where localized weights collapsed and `S(x) = I` was used.
    pub collapsed_points: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisResult<T: Real> {
    pub analysis: Ensemble<T>,
    pub transform: Option<AnalysisTransform<T>>,
    pub weights: Option<WeightVector<T>>,
    pub diagnostics: AnalysisDiagnostics<T>,
}

/// Covariance of the additive rejuvenation noise `ξ_j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RejuvenationCovariance {
    /// `h² P_zz^f` for every member.
    #[default]
    Forecast,
    /// `h² Σ_i s_ij (z_i^f − z̄_j^a)(z_i^f − z̄_j^a)ᵀ`, estimated from column `j`
    /// of the transform.
    CouplingLocal,
}

/// `log π(y | z_i) = −½ (h(z_i) − y)ᵀ R⁻¹ (h(z_i) − y)` up to a constant.
pub fn log_likelihoods<T: Real>(
    forecast: &Ensemble<T>,
    y: &DVector<T>,
    om: &ObservationModel<T>,
) -> Result<DVector<T>> {
    om.check_obs(y)?;
    let r = om.r_diag();
    let half = T::lit(0.5);
    Ok(DVector::from_iterator(
        forecast.size(),
        forecast.members().map(|z| {
            let d = om.observe(z) - y;
            -half
                * d.iter()
                    .zip(r.iter())
                    .fold(T::zero(), |acc, (&e, &rk)| acc + e * e / rk)
        }),
    ))
}

/// Normalizes log-weights with a max shift. Only fails when no entry is finite.
pub fn weights_from_log<T: Real>(log_w: &DVector<T>) -> Result<WeightVector<T>> {
    let max = log_w
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(None, |acc: Option<T>, v| Some(acc.map_or(v, |a| a.max(v))))
        .ok_or(Error::WeightCollapse)?;
    let w = log_w.map(|v| {
        if v.is_finite() {
            (v - max).exp()
        } else {
            T::zero()
        }
    });
    let w = WeightVector::from_unnormalized(w)?;
    if effective_sample_size(&w) < T::lit(2.0) && w.len() >= 2 {
        log::warn!("effective sample size below 2");
    }
    Ok(w)
}

/// `w_i ∝ exp(−½ (h(z_i) − y)ᵀ R⁻¹ (h(z_i) − y))`.
pub fn importance_weights<T: Real>(
    forecast: &Ensemble<T>,
    y: &DVector<T>,
    om: &ObservationModel<T>,
) -> Result<WeightVector<T>> {
    weights_from_log(&log_likelihoods(forecast, y, om)?)
}

/// `1 / Σ w_i²`.
pub fn effective_sample_size<T: Real>(w: &WeightVector<T>) -> T {
    T::one() / w.as_vector().norm_squared()
}

/// `t_ij = (ε w_j δ_ij + (1 − ε w_j) w_i) / M`.
pub fn resampling_coupling<T: Real>(w: &WeightVector<T>, epsilon: T) -> Result<CouplingMatrix<T>> {
    let m = w.len();
    let w_max = w.iter().fold(T::zero(), |a, b| a.max(b));
    let product = epsilon * w_max;
    if epsilon < T::zero() || !epsilon.is_finite() || product > T::one() + T::lit(1e-12) {
        return Err(Error::InvalidEpsilon {
            epsilon: epsilon.as_f64(),
            product: product.as_f64(),
        });
    }
    let inv_m = T::one() / T::lit(m as f64);
    let mut entries = Vec::with_capacity(m * m);
    for j in 0..m {
        let keep = epsilon * w[j];
        for i in 0..m {
            let mut t = (T::one() - keep) * w[i];
            if i == j {
                t += keep;
            }
            entries.push((i, j, t * inv_m));
        }
    }
    let rows = w.iter().collect();
    let cols = vec![inv_m; m];
    CouplingMatrix::from_triplets(m, m, entries, rows, cols)
}

fn check_uniform_columns<T: Real>(t: &CouplingMatrix<T>) -> Result<()> {
    let inv_m = T::one() / T::lit(t.cols() as f64);
    let sums = t.col_sums();
    if sums.iter().any(|&s| (s - inv_m).abs() > T::lit(1e-9)) {
        return Err(Error::InvalidMarginal(
            "coupling columns must sum to 1/M".into(),
        ));
    }
    Ok(())
}

/// Draws ancestors with `P(s_ij = 1) = M t_ij`, independently per column.
pub fn realize_resampling_ancestors<T: Real>(
    t: &CouplingMatrix<T>,
    rng: &mut RngStream,
) -> Result<Vec<usize>> {
    check_uniform_columns(t)?;
    Ok((0..t.cols())
        .map(|j| {
            let cells: Vec<(usize, f64)> = t.column(j).map(|(i, v)| (i, v.as_f64())).collect();
            cells[rng.categorical(cells.iter().map(|c| c.1))].0
        })
        .collect())
}

/// A 0/1 transform with one entry per column, `P(s_ij = 1) = M t_ij`.
pub fn realize_resampling<T: Real>(
    t: &CouplingMatrix<T>,
    rng: &mut RngStream,
) -> Result<TransformMatrix<T>> {
    let a = realize_resampling_ancestors(t, rng)?;
    Ok(ancestors_to_transform(&a, t.rows()))
}

/// Residual resampling ancestors: `⌊M w_i⌋` deterministic copies, the rest
/// drawn multinomially from the residual weights.
pub fn residual_resampling_ancestors<T: Real>(
    w: &WeightVector<T>,
    m: usize,
    rng: &mut RngStream,
) -> Vec<usize> {
    let mf = m as f64;
    let mut ancestors = Vec::with_capacity(m);
    let mut residual = Vec::with_capacity(w.len());
    for (i, wi) in w.iter().enumerate() {
        let scaled = wi.as_f64() * mf;
        let copies = (scaled.floor() as usize).min(m - ancestors.len());
        ancestors.extend(std::iter::repeat_n(i, copies));
        residual.push((scaled - copies as f64).max(0.0));
    }
    while ancestors.len() < m {
        ancestors.push(rng.categorical(residual.iter().copied()));
    }
    ancestors
}

pub fn residual_resampling<T: Real>(
    w: &WeightVector<T>,
    m: usize,
    rng: &mut RngStream,
) -> TransformMatrix<T> {
    let a = residual_resampling_ancestors(w, m, rng);
    ancestors_to_transform(&a, w.len())
}

pub(crate) fn ancestors_to_transform<T: Real>(
    ancestors: &[usize],
    rows: usize,
) -> TransformMatrix<T> {
    let mut s = DMatrix::zeros(rows, ancestors.len());
    for (j, &i) in ancestors.iter().enumerate() {
        s[(i, j)] = T::one();
    }
    TransformMatrix::from_matrix_unchecked(s)
}

fn select_members<T: Real>(forecast: &Ensemble<T>, ancestors: &[usize]) -> Ensemble<T> {
    let z = forecast.as_matrix();
    Ensemble::from_matrix_unchecked(DMatrix::from_fn(z.nrows(), ancestors.len(), |r, j| {
        z[(r, ancestors[j])]
    }))
}

/// SIR analysis with the Del Moral coupling; `epsilon = 0` is monomial
/// resampling. Rejuvenation uses `h_rej² P_zz^f` when `h_rej > 0`.
pub fn sir_analysis<T: Real>(
    forecast: &Ensemble<T>,
    y: &DVector<T>,
    om: &ObservationModel<T>,
    epsilon: T,
    h_rej: T,
    rng: &mut RngStream,
) -> Result<AnalysisResult<T>> {
    let w = importance_weights(forecast, y, om)?;
    let m = forecast.size();
    let w_max = w.iter().fold(T::zero(), |a, b| a.max(b));
    if epsilon < T::zero() || epsilon * w_max > T::one() + T::lit(1e-12) {
        return Err(Error::InvalidEpsilon {
            epsilon: epsilon.as_f64(),
            product: (epsilon * w_max).as_f64(),
        });
    }
    // Column j keeps member j with probability ε w_j, otherwise draws from w.
    // This samples P(s_ij = 1) = M t_ij without forming the M × M coupling.
    let probs: Vec<f64> = w.iter().map(|v| v.as_f64()).collect();
    let eps = epsilon.as_f64();
    let ancestors: Vec<usize> = (0..m)
        .map(|j| {
            if eps > 0.0 && rng.uniform() < eps * probs[j] {
                j
            } else {
                rng.categorical(probs.iter().copied())
            }
        })
        .collect();
    let mut analysis = select_members(forecast, &ancestors);
    if h_rej > T::zero() {
        analysis = apply_rejuvenation(analysis, forecast, h_rej, rng)?;
    }
    let ess = effective_sample_size(&w);
    Ok(AnalysisResult {
        analysis,
        transform: Some(AnalysisTransform::Ancestors(ancestors)),
        weights: Some(w),
        diagnostics: AnalysisDiagnostics {
            ess: Some(ess),
            ..Default::default()
        },
    })
}

/// Observation-space quantities shared by the Kalman-type filters.
struct ObsStats<T: Real> {
    /// `A_y`, `N_y × M`.
    a_y: DMatrix<T>,
    y_mean: DVector<T>,
    y_ens: DMatrix<T>,
}

fn obs_stats<T: Real>(
    forecast: &Ensemble<T>,
    y: &DVector<T>,
    om: &ObservationModel<T>,
) -> Result<ObsStats<T>> {
    forecast.require_members(2)?;
    om.check_obs(y)?;
    let y_ens = om.observe_ensemble(forecast);
    Ok(ObsStats {
        a_y: centered(&y_ens),
        y_mean: row_means(&y_ens),
        y_ens,
    })
}

/// Cholesky factor of `P_yy + R`.
fn innovation_cholesky<T: Real>(
    a_y: &DMatrix<T>,
    r: &DVector<T>,
) -> Result<nalgebra::Cholesky<T, nalgebra::Dyn>> {
    let m1 = T::lit((a_y.ncols() - 1) as f64);
    let mut c = (a_y * a_y.transpose()) / m1;
    for (k, rk) in r.iter().enumerate() {
        c[(k, k)] += *rk;
    }
    c.cholesky()
        .ok_or_else(|| Error::Decomposition("P_yy + R is not positive definite".into()))
}

/// Perturbed-observation EnKF: `z_j^a = z_j^f − K(h(z_j^f) + ξ_j − y)` with
/// fresh `ξ_j ~ N(0, R)`, applied through the equivalent transform
/// `s_ij = δ_ij − (y_i^f − ȳ^f)ᵀ (P_yy + R)⁻¹ (y_j^f + ξ_j − y) / (M − 1)`.
pub fn enkf_perturbed_analysis<T: Real>(
    forecast: &Ensemble<T>,
    y: &DVector<T>,
    om: &ObservationModel<T>,
    rng: &mut RngStream,
) -> Result<AnalysisResult<T>> {
    let st = obs_stats(forecast, y, om)?;
    let m = forecast.size();
    let r = om.r_diag();
    let mut innov = st.y_ens.clone();
    for mut col in innov.column_iter_mut() {
        for k in 0..col.len() {
            col[k] += r[k].sqrt() * rng.standard_normal::<T>() - y[k];
        }
    }
    let chol = innovation_cholesky(&st.a_y, r)?;
    let g = chol.solve(&innov);
    let m1 = T::lit((m - 1) as f64);
    let s = DMatrix::identity(m, m) - (st.a_y.transpose() * g) / m1;
    let s = TransformMatrix::from_matrix_unchecked(s);
    let analysis = forecast.transform(&s)?;
    Ok(AnalysisResult {
        analysis,
        transform: Some(AnalysisTransform::Dense(s)),
        weights: None,
        diagnostics: AnalysisDiagnostics::default(),
    })
}

/// `D = {I + A_yᵀ R⁻¹ A_y / (M − 1)}^{−1/2}`, the symmetric root.
pub fn esrf_square_root<T: Real>(a_y: &DMatrix<T>, r_inv: &DVector<T>) -> DMatrix<T> {
    sym_inv_sqrt(&transform_precision(a_y, r_inv))
}

/// `D = Q^{1/2}` with `Q = I − A_yᵀ (P_yy + R)⁻¹ A_y / (M − 1)`.
pub fn esrf_square_root_via_gain<T: Real>(a_y: &DMatrix<T>, r: &DVector<T>) -> Result<DMatrix<T>> {
    let m = a_y.ncols();
    let m1 = T::lit((m - 1) as f64);
    let chol = innovation_cholesky(a_y, r)?;
    let q = DMatrix::identity(m, m) - a_y.transpose() * chol.solve(a_y) / m1;
    Ok(sym_sqrt(&q))
}

/// `I + A_yᵀ diag(r_inv) A_y / (M − 1)`.
pub(crate) fn transform_precision<T: Real>(a_y: &DMatrix<T>, r_inv: &DVector<T>) -> DMatrix<T> {
    let m = a_y.ncols();
    let m1 = T::lit((m - 1) as f64);
    let mut scaled = a_y.clone();
    for (mut row, &ri) in scaled.row_iter_mut().zip(r_inv.iter()) {
        row *= ri;
    }
    DMatrix::identity(m, m) + a_y.transpose() * scaled / m1
}

/// Deterministic square-root filter with the symmetric root `D`:
/// `s_ij = (y_i^f − ȳ^f)ᵀ (P_yy + R)⁻¹ (y − ȳ^f) / (M − 1) + d_ij`.
pub fn esrf_analysis<T: Real>(
    forecast: &Ensemble<T>,
    y: &DVector<T>,
    om: &ObservationModel<T>,
) -> Result<AnalysisResult<T>> {
    let st = obs_stats(forecast, y, om)?;
    let m = forecast.size();
    let r = om.r_diag();
    let r_inv = r.map(|v| T::one() / v);
    let d = esrf_square_root(&st.a_y, &r_inv);
    let chol = innovation_cholesky(&st.a_y, r)?;
    let m1 = T::lit((m - 1) as f64);
    let w_bar = st.a_y.transpose() * chol.solve(&(y - &st.y_mean)) / m1;
    let mut s = d;
    for mut col in s.column_iter_mut() {
        col += &w_bar;
    }
    let s = TransformMatrix::from_matrix_unchecked(s);
    let analysis = forecast.transform(&s)?;
    Ok(AnalysisResult {
        analysis,
        transform: Some(AnalysisTransform::Dense(s)),
        weights: None,
        diagnostics: AnalysisDiagnostics::default(),
    })
}

/// Options of the deterministic ETPF.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EtpfOptions<T> {
    pub h_rej: T,
    pub rejuvenation: RejuvenationCovariance,
}

impl<T: Real> EtpfOptions<T> {
    pub fn new(h_rej: T) -> Self {
        Self {
            h_rej,
            rejuvenation: RejuvenationCovariance::Forecast,
        }
    }
}

/// Optimal coupling between the weighted and the uniform forecast measure
/// under squared Euclidean cost.
pub fn etpf_coupling<T: Real>(
    forecast: &Ensemble<T>,
    w: &WeightVector<T>,
) -> Result<(CouplingMatrix<T>, T)> {
    let m = forecast.size();
    if w.len() != m {
        return Err(Error::DimensionMismatch {
            expected: m,
            found: w.len(),
        });
    }
    let z = forecast.as_matrix();
    let cost = SquaredEuclidean::new(z, z);
    let rows: Vec<T> = w.iter().collect();
    let cols = vec![T::one() / T::lit(m as f64); m];
    let sol = solve_optimal_coupling(&cost, &rows, &cols)?;
    Ok((sol.coupling, sol.objective))
}

/// Ensemble transform particle filter: `S = M T*` with rejuvenation noise
/// `ξ_j ~ N(0, h_rej² P_zz^f)`.
pub fn etpf_analysis<T: Real>(
    forecast: &Ensemble<T>,
    y: &DVector<T>,
    om: &ObservationModel<T>,
    h_rej: T,
    rng: &mut RngStream,
) -> Result<AnalysisResult<T>> {
    etpf_analysis_with(forecast, y, om, &EtpfOptions::new(h_rej), rng)
}

pub fn etpf_analysis_with<T: Real>(
    forecast: &Ensemble<T>,
    y: &DVector<T>,
    om: &ObservationModel<T>,
    opts: &EtpfOptions<T>,
    rng: &mut RngStream,
) -> Result<AnalysisResult<T>> {
    forecast.require_members(2)?;
    let w = importance_weights(forecast, y, om)?;
    let (t, objective) = etpf_coupling(forecast, &w)?;
    let mut analysis = Ensemble::from_matrix_unchecked(t.transform_columns(forecast.as_matrix())?);
    if opts.h_rej > T::zero() {
        analysis = match opts.rejuvenation {
            RejuvenationCovariance::Forecast => {
                apply_rejuvenation(analysis, forecast, opts.h_rej, rng)?
            }
            RejuvenationCovariance::CouplingLocal => {
                coupling_local_rejuvenation(analysis, forecast, &t, opts.h_rej, rng)
            }
        };
    }
    Ok(AnalysisResult {
        analysis,
        transform: Some(AnalysisTransform::Coupling(t)),
        diagnostics: AnalysisDiagnostics {
            ess: Some(effective_sample_size(&w)),
            lp_objective: Some(objective),
            collapsed_points: 0,
        },
        weights: Some(w),
    })
}

/// ETPF variant drawing analysis member `j` from the forecast with the
/// probabilities in column `j` of `S = M T*`.
pub fn stochastic_etpf_analysis<T: Real>(
    forecast: &Ensemble<T>,
    y: &DVector<T>,
    om: &ObservationModel<T>,
    rng: &mut RngStream,
) -> Result<AnalysisResult<T>> {
    forecast.require_members(2)?;
    let w = importance_weights(forecast, y, om)?;
    let (t, objective) = etpf_coupling(forecast, &w)?;
    let ancestors = realize_resampling_ancestors(&t, rng)?;
    Ok(AnalysisResult {
        analysis: select_members(forecast, &ancestors),
        transform: Some(AnalysisTransform::Ancestors(ancestors)),
        diagnostics: AnalysisDiagnostics {
            ess: Some(effective_sample_size(&w)),
            lp_objective: Some(objective),
            collapsed_points: 0,
        },
        weights: Some(w),
    })
}

/// `z_i → z̄ + α (z_i − z̄)`.
pub fn apply_inflation<T: Real>(ens: &Ensemble<T>, alpha: T) -> Result<Ensemble<T>> {
    if !(alpha >= T::one()) || !alpha.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "inflation factor {alpha} must be finite and >= 1"
        )));
    }
    if alpha == T::one() {
        return Ok(ens.clone());
    }
    let mean = ens.mean();
    let mut z = ens.as_matrix().clone();
    for mut col in z.column_iter_mut() {
        let dev = &col - &mean;
        col.copy_from(&(&mean + dev * alpha));
    }
    Ok(Ensemble::from_matrix_unchecked(z))
}

/// Inflation factor with the same variance effect as rejuvenation `h`.
pub fn rejuvenation_equivalent_inflation<T: Real>(h: T) -> T {
    (T::one() + h * h).sqrt()
}

/// Adds `ξ_j ~ N(0, h² P)` where `P` is the covariance of `reference`.
///
/// With `N_z < M` the noise is `h P^{1/2} g_j`, `g_j ~ N(0, I_{N_z})`.
/// Otherwise it is `h A g_j / √(M − 1)` with `g_j ~ N(0, I_M)` and `A` the
/// deviations of `reference`, which needs no factorization. Both have
/// covariance exactly `h² P`.
pub fn apply_rejuvenation<T: Real>(
    ens: Ensemble<T>,
    reference: &Ensemble<T>,
    h: T,
    rng: &mut RngStream,
) -> Result<Ensemble<T>> {
    let a = ensemble_deviations(reference)?;
    if a.nrows() != ens.dim() {
        return Err(Error::DimensionMismatch {
            expected: ens.dim(),
            found: a.nrows(),
        });
    }
    let mr = reference.size();
    let nz = a.nrows();
    let (factor, inner) = if nz < mr {
        let p = &a * a.transpose() / T::lit((mr - 1) as f64);
        (sym_sqrt(&p) * h, nz)
    } else {
        (a * (h / T::lit((mr - 1) as f64).sqrt()), mr)
    };
    let g = DMatrix::from_fn(inner, ens.size(), |_, _| rng.standard_normal::<T>());
    let mut z = ens.into_matrix();
    z += factor * g;
    Ok(Ensemble::from_matrix_unchecked(z))
}

fn coupling_local_rejuvenation<T: Real>(
    analysis: Ensemble<T>,
    forecast: &Ensemble<T>,
    t: &CouplingMatrix<T>,
    h: T,
    rng: &mut RngStream,
) -> Ensemble<T> {
    let m = T::lit(t.cols() as f64);
    let zf = forecast.as_matrix();
    let mut z = analysis.into_matrix();
    for j in 0..t.cols() {
        // ξ_j = h Σ_i √s_ij (z_i − z̄_j) g_i has covariance h² P_j.
        let mean = z.column(j).clone_owned();
        let mut xi = DVector::zeros(zf.nrows());
        for (i, v) in t.column(j) {
            let s = *v * m;
            let g: T = rng.standard_normal();
            xi += (zf.column(i) - &mean) * (s.sqrt() * g);
        }
        let mut col = z.column_mut(j);
        col += xi * h;
    }
    Ensemble::from_matrix_unchecked(z)
}
