//! Single-step convergence study with quasi-Monte Carlo prior samples.
//!
//! The prior is uniform on the unit square and the observation is the sum
//! of both components with Gaussian noise. One ETPF step preserves the
//! `M⁻¹` rate of the weighted QMC estimate while residual resampling falls
//! back to `M^{-1/2}`.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};
use letf::filters::{
    etpf_coupling, importance_weights, realize_resampling_ancestors, residual_resampling_ancestors,
};
use letf::{
    convergence_fit, Ensemble, ForwardMap, ObservationModel, RngStream, SlopeFit, WeightVector,
};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::twin::fmt_f64;

const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];

/// Van der Corput radical inverse of `i` in base `b`.
pub fn radical_inverse(mut i: u64, b: u64) -> f64 {
    let inv = 1.0 / b as f64;
    let mut f = inv;
    let mut r = 0.0;
    while i > 0 {
        r += f * (i % b) as f64;
        i /= b;
        f *= inv;
    }
    r
}

/// The first `n` Halton points in `[0, 1)^dims` as columns, bases the first
/// `dims` primes, indices starting at 1.
///
/// # Panics
/// If `dims > 8`.
pub fn halton_points(n: usize, dims: usize) -> DMatrix<f64> {
    assert!(
        dims <= PRIMES.len(),
        "Halton points support at most 8 dimensions"
    );
    DMatrix::from_fn(dims, n, |d, j| radical_inverse(j as u64 + 1, PRIMES[d]))
}

/// Halton points translated by `shift` modulo 1.
pub fn shifted_halton_points(n: usize, shift: &[f64]) -> DMatrix<f64> {
    let mut z = halton_points(n, shift.len());
    for (d, &u) in shift.iter().enumerate() {
        z.row_mut(d).apply(|v| *v = (*v + u).fract());
    }
    z
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QmcConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::log2_min")]
    pub log2_m_min: u32,
    #[serde(default = "defaults::log2_max")]
    pub log2_m_max: u32,
    #[serde(default = "defaults::log2_ref")]
    pub log2_m_ref: u32,
    #[serde(default = "defaults::obs_variance")]
    pub obs_variance: f64,
    /// Random translations of the point set; errors are root mean squares
    /// over them.
    #[serde(default = "defaults::shifts")]
    pub shifts: usize,
    /// Resampling draws per shift.
    #[serde(default = "defaults::draws")]
    pub resampling_draws: usize,
    #[serde(default = "defaults::yes")]
    pub stochastic_etpf: bool,
}

impl Default for QmcConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            log2_m_min: defaults::log2_min(),
            log2_m_max: defaults::log2_max(),
            log2_m_ref: defaults::log2_ref(),
            obs_variance: defaults::obs_variance(),
            shifts: defaults::shifts(),
            resampling_draws: defaults::draws(),
            stochastic_etpf: true,
        }
    }
}

impl QmcConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.log2_m_min < 1 || self.log2_m_min > self.log2_m_max {
            bail!("need 1 <= log2_m_min <= log2_m_max");
        }
        if self.log2_m_max >= self.log2_m_ref || self.log2_m_ref > 26 {
            bail!("reference size must exceed the ladder and stay below 2^27");
        }
        if !(self.obs_variance > 0.0) {
            bail!("observation variance must be positive");
        }
        if self.shifts == 0 || self.resampling_draws == 0 {
            bail!("shifts and resampling draws must be positive");
        }
        Ok(())
    }

    pub fn ladder(&self) -> Vec<usize> {
        (self.log2_m_min..=self.log2_m_max)
            .map(|k| 1usize << k)
            .collect()
    }

    pub fn from_toml_str(s: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(s).context("parsing QMC config")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Posterior mean, component variances and correlation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Moments {
    pub mean: [f64; 2],
    pub var: [f64; 2],
    pub cor: f64,
}

impl Moments {
    pub fn weighted(z: &DMatrix<f64>, w: &[f64]) -> Self {
        let mut mean = [0.0; 2];
        for (j, &wj) in w.iter().enumerate() {
            mean[0] += wj * z[(0, j)];
            mean[1] += wj * z[(1, j)];
        }
        let (mut c00, mut c11, mut c01) = (0.0, 0.0, 0.0);
        for (j, &wj) in w.iter().enumerate() {
            let (a, b) = (z[(0, j)] - mean[0], z[(1, j)] - mean[1]);
            c00 += wj * a * a;
            c11 += wj * b * b;
            c01 += wj * a * b;
        }
        Self {
            mean,
            var: [c00, c11],
            cor: c01 / (c00 * c11).sqrt(),
        }
    }

    pub fn uniform(z: &DMatrix<f64>) -> Self {
        let m = z.ncols();
        Self::weighted(z, &vec![1.0 / m as f64; m])
    }

    /// Squared errors of mean, variance and correlation against `reference`.
    fn sq_errors(&self, reference: &Moments) -> [f64; 3] {
        let d2 = |a: [f64; 2], b: [f64; 2]| (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
        [
            d2(self.mean, reference.mean),
            d2(self.var, reference.var),
            (self.cor - reference.cor).powi(2),
        ]
    }
}

/// Root-mean-square errors of one estimator at one ensemble size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimatorErrors {
    pub mean: f64,
    pub var: f64,
    pub cor: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QmcRow {
    pub m: usize,
    /// Weighted QMC estimate before any transformation.
    pub importance: EstimatorErrors,
    pub etpf: EstimatorErrors,
    pub resampling: EstimatorErrors,
    pub stochastic_etpf: Option<EstimatorErrors>,
}

/// Least-squares fit of `log error` against `log M`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Slope {
    pub slope: f64,
    pub intercept: f64,
    pub std_error: f64,
}

impl From<SlopeFit> for Slope {
    fn from(f: SlopeFit) -> Self {
        Self {
            slope: f.slope,
            intercept: f.intercept,
            std_error: f.std_error,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct QmcReport {
    pub config: QmcConfig,
    pub y_obs: f64,
    pub reference: Moments,
    pub rows: Vec<QmcRow>,
    pub etpf_slope: Slope,
    pub resampling_slope: Slope,
    pub stochastic_etpf_slope: Option<Slope>,
}

impl QmcReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "m,is_mean,etpf_mean,etpf_var,etpf_cor,resampling_mean,resampling_var,resampling_cor,\
             stochastic_etpf_mean,stochastic_etpf_var,stochastic_etpf_cor\n",
        );
        for r in &self.rows {
            let st = r
                .stochastic_etpf
                .map(|e| format!("{},{},{}", fmt_f64(e.mean), fmt_f64(e.var), fmt_f64(e.cor)))
                .unwrap_or_else(|| ",,".into());
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                r.m,
                fmt_f64(r.importance.mean),
                fmt_f64(r.etpf.mean),
                fmt_f64(r.etpf.var),
                fmt_f64(r.etpf.cor),
                fmt_f64(r.resampling.mean),
                fmt_f64(r.resampling.var),
                fmt_f64(r.resampling.cor),
                st
            );
        }
        s
    }
}

fn sum_observation(variance: f64) -> anyhow::Result<ObservationModel> {
    let h = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
    Ok(ObservationModel::new(
        ForwardMap::Linear(h),
        DVector::from_element(1, variance),
    )?)
}

/// Reference posterior moments by importance sampling with `2^log2_m_ref`
/// shifted Halton points, accumulated in chunks.
pub fn reference_moments(y: f64, variance: f64, log2_m: u32, shift: &[f64; 2]) -> Moments {
    let n = 1u64 << log2_m;
    let like = |s: f64| (-(s - y).powi(2) / (2.0 * variance)).exp();
    let point = |i: u64| {
        [
            (radical_inverse(i, 2) + shift[0]).fract(),
            (radical_inverse(i, 3) + shift[1]).fract(),
        ]
    };
    // Two passes keep the central moments accurate.
    let (mut wsum, mut m0, mut m1) = (0.0, 0.0, 0.0);
    for i in 1..=n {
        let p = point(i);
        let w = like(p[0] + p[1]);
        wsum += w;
        m0 += w * p[0];
        m1 += w * p[1];
    }
    let mean = [m0 / wsum, m1 / wsum];
    let (mut c00, mut c11, mut c01) = (0.0, 0.0, 0.0);
    for i in 1..=n {
        let p = point(i);
        let w = like(p[0] + p[1]) / wsum;
        let (a, b) = (p[0] - mean[0], p[1] - mean[1]);
        c00 += w * a * a;
        c11 += w * b * b;
        c01 += w * a * b;
    }
    Moments {
        mean,
        var: [c00, c11],
        cor: c01 / (c00 * c11).sqrt(),
    }
}

fn select(z: &DMatrix<f64>, ancestors: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(z.nrows(), ancestors.len(), |k, j| z[(k, ancestors[j])])
}

fn rms(acc: [f64; 3], n: usize) -> EstimatorErrors {
    let n = n as f64;
    EstimatorErrors {
        mean: (acc[0] / n).sqrt(),
        var: (acc[1] / n).sqrt(),
        cor: (acc[2] / n).sqrt(),
    }
}

fn add(acc: &mut [f64; 3], e: [f64; 3]) {
    for (a, b) in acc.iter_mut().zip(e) {
        *a += b;
    }
}

/// Runs the study over the ensemble-size ladder and fits the mean-error
/// slopes. Writes `qmc.csv` and `report.json` into `out` when given.
pub fn qmc_single_step_experiment(
    cfg: &QmcConfig,
    out: Option<&Path>,
) -> anyhow::Result<QmcReport> {
    cfg.validate()?;
    let mut setup = RngStream::new(cfg.seed, 0);
    let truth = [setup.uniform(), setup.uniform()];
    let y_obs = truth[0] + truth[1] + cfg.obs_variance.sqrt() * setup.standard_normal::<f64>();
    let ref_shift = [setup.uniform(), setup.uniform()];
    let shifts: Vec<[f64; 2]> = (0..cfg.shifts)
        .map(|_| [setup.uniform(), setup.uniform()])
        .collect();
    let reference = reference_moments(y_obs, cfg.obs_variance, cfg.log2_m_ref, &ref_shift);
    let om = sum_observation(cfg.obs_variance)?;
    let y = DVector::from_element(1, y_obs);
    let mut rng = RngStream::new(cfg.seed, 1);

    let mut rows = Vec::new();
    for m in cfg.ladder() {
        let mut acc_is = [0.0; 3];
        let mut acc_etpf = [0.0; 3];
        let mut acc_res = [0.0; 3];
        let mut acc_st = [0.0; 3];
        for shift in &shifts {
            let z = shifted_halton_points(m, shift);
            let forecast = Ensemble::from_matrix(z.clone())?;
            let w: WeightVector = importance_weights(&forecast, &y, &om)?;
            let wv: Vec<f64> = w.iter().collect();
            add(
                &mut acc_is,
                Moments::weighted(&z, &wv).sq_errors(&reference),
            );

            let (t, _) = etpf_coupling(&forecast, &w)?;
            let za = t.transform_columns(&z)?;
            add(&mut acc_etpf, Moments::uniform(&za).sq_errors(&reference));
            if cfg.stochastic_etpf {
                let anc = realize_resampling_ancestors(&t, &mut rng)?;
                add(
                    &mut acc_st,
                    Moments::uniform(&select(&z, &anc)).sq_errors(&reference),
                );
            }
            for _ in 0..cfg.resampling_draws {
                let anc = residual_resampling_ancestors(&w, m, &mut rng);
                add(
                    &mut acc_res,
                    Moments::uniform(&select(&z, &anc)).sq_errors(&reference),
                );
            }
        }
        let n = cfg.shifts;
        let row = QmcRow {
            m,
            importance: rms(acc_is, n),
            etpf: rms(acc_etpf, n),
            resampling: rms(acc_res, n * cfg.resampling_draws),
            stochastic_etpf: cfg.stochastic_etpf.then(|| rms(acc_st, n)),
        };
        log::info!(
            "M = {m}: etpf {:.3e}, resampling {:.3e}",
            row.etpf.mean,
            row.resampling.mean
        );
        rows.push(row);
    }

    let fit = |f: &dyn Fn(&QmcRow) -> f64| {
        let pts: Vec<(f64, f64)> = rows.iter().map(|r| (r.m as f64, f(r))).collect();
        convergence_fit(&pts).map(Slope::from)
    };
    let etpf_slope = fit(&|r| r.etpf.mean)?;
    let resampling_slope = fit(&|r| r.resampling.mean)?;
    let stochastic_etpf_slope = if cfg.stochastic_etpf {
        Some(fit(&|r| r.stochastic_etpf.map_or(f64::NAN, |e| e.mean))?)
    } else {
        None
    };
    let report = QmcReport {
        config: cfg.clone(),
        y_obs,
        reference,
        rows,
        etpf_slope,
        resampling_slope,
        stochastic_etpf_slope,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("qmc.csv"), report.to_csv())?;
        std::fs::write(
            dir.join("report.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    Ok(report)
}

mod defaults {
    pub fn log2_min() -> u32 {
        6
    }
    pub fn log2_max() -> u32 {
        14
    }
    pub fn log2_ref() -> u32 {
        22
    }
    pub fn obs_variance() -> f64 {
        2.0
    }
    pub fn shifts() -> usize {
        3
    }
    pub fn draws() -> usize {
        10
    }
    pub fn yes() -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radical_inverse_values() {
        let b2: Vec<f64> = (1..=3).map(|i| radical_inverse(i, 2)).collect();
        assert_eq!(b2, vec![0.5, 0.25, 0.75]);
        assert_eq!(radical_inverse(1, 3), 1.0 / 3.0);
        assert_eq!(radical_inverse(2, 3), 2.0 / 3.0);
        let h = halton_points(3, 2);
        assert_eq!(
            h.row(0).iter().copied().collect::<Vec<_>>(),
            vec![0.5, 0.25, 0.75]
        );
        assert!((h[(1, 2)] - 1.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    #[should_panic]
    fn halton_rejects_nine_dimensions() {
        halton_points(4, 9);
    }

    /// Grid estimate of the star discrepancy over anchored boxes.
    fn star_discrepancy(z: &DMatrix<f64>, grid: usize) -> f64 {
        let n = z.ncols() as f64;
        let mut worst: f64 = 0.0;
        for a in 1..=grid {
            for b in 1..=grid {
                let (x, y) = (a as f64 / grid as f64, b as f64 / grid as f64);
                let inside = z.column_iter().filter(|p| p[0] < x && p[1] < y).count() as f64;
                worst = worst.max((inside / n - x * y).abs());
            }
        }
        worst
    }

    #[test]
    fn halton_discrepancy_beats_uniform_sampling() {
        let h = star_discrepancy(&halton_points(256, 2), 64);
        let mut uni: Vec<f64> = (0..20)
            .map(|s| {
                let mut rng = RngStream::new(s, 0);
                let z = DMatrix::from_fn(2, 256, |_, _| rng.uniform());
                star_discrepancy(&z, 64)
            })
            .collect();
        uni.sort_by(f64::total_cmp);
        let median = 0.5 * (uni[9] + uni[10]);
        assert!(h < median, "{h} vs {median}");
    }

    #[test]
    fn reference_moments_match_grid_quadrature() {
        let (y, r) = (1.3, 2.0);
        let shift = [0.3, 0.7];
        let is = reference_moments(y, r, 18, &shift);
        let g = 1500;
        let pts = DMatrix::from_fn(2, g * g, |d, j| {
            let k = if d == 0 { j % g } else { j / g };
            (k as f64 + 0.5) / g as f64
        });
        let w: Vec<f64> = pts
            .column_iter()
            .map(|p| (-(p[0] + p[1] - y).powi(2) / (2.0 * r)).exp())
            .collect();
        let total: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|v| v / total).collect();
        let quad = Moments::weighted(&pts, &w);
        for d in 0..2 {
            assert!((is.mean[d] - quad.mean[d]).abs() < 1e-5);
            assert!((is.var[d] - quad.var[d]).abs() < 1e-5);
        }
        assert!((is.cor - quad.cor).abs() < 1e-4);
    }

    #[test]
    fn small_ladder_is_deterministic_and_ordered() {
        let cfg = QmcConfig {
            log2_m_min: 4,
            log2_m_max: 7,
            log2_m_ref: 14,
            shifts: 2,
            resampling_draws: 4,
            ..QmcConfig::default()
        };
        let a = qmc_single_step_experiment(&cfg, None).unwrap();
        let b = qmc_single_step_experiment(&cfg, None).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.rows.len(), 4);
        for r in &a.rows {
            // The ETPF mean equals the weighted mean exactly.
            assert!((r.etpf.mean - r.importance.mean).abs() < 1e-10);
        }
        assert!(a.to_csv().lines().count() == 5);
    }

    #[test]
    fn config_rejects_bad_ladders() {
        assert!(QmcConfig::from_toml_str("log2_m_min = 8\nlog2_m_max = 6").is_err());
        assert!(QmcConfig::from_toml_str("log2_m_max = 22").is_err());
        assert_eq!(QmcConfig::from_toml_str("").unwrap(), QmcConfig::default());
        assert_eq!(QmcConfig::default().ladder().len(), 9);
    }
}
