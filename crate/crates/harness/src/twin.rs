//! Twin experiments: a hidden reference trajectory, noisy observations of it
//! and a filter scored against the reference.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use letf::filters::{
    apply_inflation, apply_rejuvenation, enkf_perturbed_analysis, esrf_analysis,
    etpf_analysis_with, sir_analysis, stochastic_etpf_analysis,
};
use letf::localization::{letkf_analysis, localized_etpf_analysis};
use letf::models::{flow_map, Lorenz63 as L63, Lorenz96 as L96};
use letf::{
    rmse_time_average, Ensemble, EtpfOptions, FlowMapConfig, GridGeometry, LocalizationConfig,
    ObservationModel, OdeModel, RmseKind, RngStream, TrajectoryRecord,
};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::config::{ExperimentConfig, FilterKind, ModelConfig, RmseChoice};

/// RNG stream ids. Member `j` of the initial ensemble uses
/// `STREAM_MEMBER_BASE + j`.
pub const STREAM_REFERENCE: u64 = 0;
pub const STREAM_OBSERVATIONS: u64 = 1;
pub const STREAM_FILTER: u64 = 3;
pub const STREAM_MEMBER_BASE: u64 = 1 << 32;

/// What the analysis step sees in one cycle.
pub struct CycleContext<'a> {
    pub cycle: usize,
    pub reference: &'a DVector<f64>,
    pub y: &'a DVector<f64>,
    pub obs: &'a ObservationModel,
}

pub struct StepOutput {
    pub analysis: Ensemble,
    pub ess: Option<f64>,
}

/// One analysis step of a twin experiment.
pub trait AnalysisStep {
    fn analyse(&mut self, ctx: &CycleContext<'_>, forecast: Ensemble)
        -> anyhow::Result<StepOutput>;
}

/// The filter described by a [`crate::config::FilterConfig`].
pub struct ConfiguredFilter {
    kind: FilterKind,
    epsilon: f64,
    h_rej: f64,
    etpf: EtpfOptions<f64>,
    localization: LocalizationConfig<f64>,
    geometry: GridGeometry<f64>,
    rng: RngStream,
}

impl ConfiguredFilter {
    pub fn new(cfg: &ExperimentConfig) -> anyhow::Result<Self> {
        let f = &cfg.filter;
        let r_loc_r = f.r_loc_r.unwrap_or(f64::INFINITY);
        let r_loc_c = match f.kind {
            FilterKind::EtpfR0 => 0.0,
            _ => f.r_loc_c.unwrap_or(f64::INFINITY),
        };
        Ok(Self {
            kind: f.kind,
            epsilon: f.epsilon,
            h_rej: f.h_rej,
            etpf: EtpfOptions {
                h_rej: f.h_rej,
                rejuvenation: f.rejuvenation.into(),
            },
            localization: LocalizationConfig::new(f.kernel.into(), r_loc_r, r_loc_c)?,
            geometry: GridGeometry::index_units(cfg.model.dim()),
            rng: RngStream::new(cfg.seed, STREAM_FILTER),
        })
    }
}

impl AnalysisStep for ConfiguredFilter {
    fn analyse(
        &mut self,
        ctx: &CycleContext<'_>,
        forecast: Ensemble,
    ) -> anyhow::Result<StepOutput> {
        let (y, om, rng) = (ctx.y, ctx.obs, &mut self.rng);
        let res = match self.kind {
            FilterKind::Sir => sir_analysis(&forecast, y, om, self.epsilon, self.h_rej, rng)?,
            FilterKind::Enkf => enkf_perturbed_analysis(&forecast, y, om, rng)?,
            FilterKind::Esrf => esrf_analysis(&forecast, y, om)?,
            FilterKind::Etpf => etpf_analysis_with(&forecast, y, om, &self.etpf, rng)?,
            FilterKind::StochasticEtpf => {
                let mut res = stochastic_etpf_analysis(&forecast, y, om, rng)?;
                if self.h_rej > 0.0 {
                    res.analysis = apply_rejuvenation(res.analysis, &forecast, self.h_rej, rng)?;
                }
                res
            }
            FilterKind::Letkf => {
                letkf_analysis(&forecast, y, om, &self.localization, &self.geometry)?
            }
            FilterKind::Letpf | FilterKind::EtpfR0 => localized_etpf_analysis(
                &forecast,
                y,
                om,
                &self.localization,
                &self.geometry,
                self.h_rej,
                rng,
            )?,
        };
        Ok(StepOutput {
            analysis: res.analysis,
            ess: res.diagnostics.ess,
        })
    }
}

/// Replaces every member by the reference state.
pub struct PerfectFilter;

impl AnalysisStep for PerfectFilter {
    fn analyse(
        &mut self,
        ctx: &CycleContext<'_>,
        forecast: Ensemble,
    ) -> anyhow::Result<StepOutput> {
        let m = forecast.size();
        let z = DMatrix::from_fn(ctx.reference.len(), m, |k, _| ctx.reference[k]);
        Ok(StepOutput {
            analysis: Ensemble::from_matrix(z)?,
            ess: None,
        })
    }
}

/// Shifts the ensemble so that its mean equals the observation at the
/// observed components and leaves the rest of the forecast alone.
pub struct ObservationOnly {
    pub indices: Vec<usize>,
}

impl AnalysisStep for ObservationOnly {
    fn analyse(
        &mut self,
        ctx: &CycleContext<'_>,
        forecast: Ensemble,
    ) -> anyhow::Result<StepOutput> {
        let mean = forecast.mean();
        let mut z = forecast.into_matrix();
        for (k, &i) in self.indices.iter().enumerate() {
            let shift = ctx.y[k] - mean[i];
            z.row_mut(i).add_scalar_mut(shift);
        }
        Ok(StepOutput {
            analysis: Ensemble::from_matrix(z)?,
            ess: None,
        })
    }
}

/// The model ODE with its discretization.
pub struct Dynamics {
    model: Box<dyn OdeModel<f64>>,
    flow: FlowMapConfig<f64>,
}

impl Dynamics {
    pub fn new(cfg: &ExperimentConfig) -> anyhow::Result<Self> {
        let model: Box<dyn OdeModel<f64>> = match cfg.model {
            ModelConfig::Lorenz63 { sigma, rho, beta } => Box::new(L63 { sigma, rho, beta }),
            ModelConfig::Lorenz96 {
                n_grid,
                forcing,
                dx,
            } => Box::new(L96::new(n_grid, forcing, dx)?),
        };
        let integ = cfg.integrator();
        Ok(Self {
            model,
            flow: FlowMapConfig::new(integ.dt, integ.steps),
        })
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn advance(&self, z: &DVector<f64>) -> letf::Result<DVector<f64>> {
        flow_map(self.model.as_ref(), z, &self.flow)
    }

    pub fn forecast(&self, ens: &Ensemble) -> letf::Result<Ensemble> {
        let mut z = ens.as_matrix().clone();
        for mut col in z.column_iter_mut() {
            let next = self.advance(&col.clone_owned())?;
            col.copy_from(&next);
        }
        Ensemble::from_matrix(z)
    }
}

/// `(1, 1, 1)` for Lorenz-63 and `F + 0.01` at the twentieth grid point for
/// Lorenz-96.
pub fn reference_initial_condition(model: &ModelConfig) -> DVector<f64> {
    match *model {
        ModelConfig::Lorenz63 { .. } => DVector::from_element(3, 1.0),
        ModelConfig::Lorenz96 {
            n_grid, forcing, ..
        } => {
            let mut u = DVector::from_element(n_grid, forcing);
            u[19.min(n_grid - 1)] += 0.01;
            u
        }
    }
}

/// Observation model of an experiment. Locations are grid indices.
pub fn observation_model(cfg: &ExperimentConfig) -> anyhow::Result<ObservationModel> {
    let idx = cfg.observed_indices();
    let locations = idx.iter().map(|&i| i as f64).collect();
    Ok(ObservationModel::selection(idx, cfg.observation.variance)?.with_locations(locations)?)
}

/// A reference trajectory with its synthetic observations.
#[derive(Debug, Clone)]
pub struct TwinData {
    /// States at cycles `0..=cycles`.
    pub reference: Vec<DVector<f64>>,
    /// Observations at cycles `1..=cycles`; entry `n − 1` belongs to cycle `n`.
    pub observations: Vec<DVector<f64>>,
}

pub fn generate_twin_data(
    cfg: &ExperimentConfig,
    dynamics: &Dynamics,
    om: &ObservationModel,
) -> anyhow::Result<TwinData> {
    let mut rng = RngStream::new(cfg.seed, STREAM_REFERENCE);
    let mut z = reference_initial_condition(&cfg.model);
    z += rng.normal_vector::<f64>(z.len()) * cfg.run.reference_perturbation;
    for _ in 0..cfg.run.reference_spinup {
        z = dynamics.advance(&z)?;
    }
    let mut obs_rng = RngStream::new(cfg.seed, STREAM_OBSERVATIONS);
    let sd = om.r_diag().map(f64::sqrt);
    let mut reference = Vec::with_capacity(cfg.run.cycles + 1);
    let mut observations = Vec::with_capacity(cfg.run.cycles);
    reference.push(z.clone());
    for _ in 0..cfg.run.cycles {
        z = dynamics.advance(&z)?;
        let noise = obs_rng.normal_vector::<f64>(sd.len()).component_mul(&sd);
        observations.push(om.observe(z.as_view()) + noise);
        reference.push(z.clone());
    }
    Ok(TwinData {
        reference,
        observations,
    })
}

/// Reference plus `init_spread · N(0, I)`, one RNG stream per member.
pub fn initial_ensemble(cfg: &ExperimentConfig, z0: &DVector<f64>) -> anyhow::Result<Ensemble> {
    let m = cfg.filter.ensemble_size;
    let mut z = DMatrix::zeros(z0.len(), m);
    for j in 0..m {
        let mut rng = RngStream::new(cfg.seed, STREAM_MEMBER_BASE + j as u64);
        let col = z0 + rng.normal_vector::<f64>(z0.len()) * cfg.run.init_spread;
        z.set_column(j, &col);
    }
    Ok(Ensemble::from_matrix(z)?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleRow {
    pub cycle: usize,
    pub error: f64,
    pub ess: Option<f64>,
    pub wall_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceReport {
    pub cycle: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    /// Time-averaged RMSE over the cycles after `discard`. `None` when the
    /// run diverged.
    pub rmse: Option<f64>,
    pub mean_ess: Option<f64>,
    pub wall_time_s: f64,
    pub cycles_completed: usize,
    pub divergence: Option<DivergenceReport>,
    pub csv_path: Option<PathBuf>,
    pub config: ExperimentConfig,
}

impl RunSummary {
    /// RMSE with divergence mapped to infinity, for ranking sweep cells.
    pub fn score(&self) -> f64 {
        self.rmse.unwrap_or(f64::INFINITY)
    }
}

#[derive(Debug, Clone)]
pub struct TwinRun {
    pub summary: RunSummary,
    pub rows: Vec<CycleRow>,
}

fn cycle_error(kind: RmseChoice, mean: &DVector<f64>, reference: &DVector<f64>) -> f64 {
    let e = (mean - reference).norm();
    match kind {
        RmseChoice::MeanNorm | RmseChoice::RootMeanSquare => e,
        RmseChoice::ComponentNormalized => e / (reference.len() as f64).sqrt(),
    }
}

/// Runs the filter described by `cfg`. Writes `cycles.csv`, `summary.json`
/// and `config.toml` into `out` when given.
pub fn run_twin_experiment(cfg: &ExperimentConfig, out: Option<&Path>) -> anyhow::Result<TwinRun> {
    cfg.validate()?;
    let mut filter = ConfiguredFilter::new(cfg)?;
    run_twin_with(cfg, &mut filter, out)
}

/// Runs a twin experiment with an arbitrary analysis step.
pub fn run_twin_with(
    cfg: &ExperimentConfig,
    step: &mut dyn AnalysisStep,
    out: Option<&Path>,
) -> anyhow::Result<TwinRun> {
    cfg.validate()?;
    let started = Instant::now();
    let dynamics = Dynamics::new(cfg)?;
    let om = observation_model(cfg)?;
    let data = generate_twin_data(cfg, &dynamics, &om)?;
    let kind = cfg.rmse_kind();
    let alpha = cfg.filter.inflation;

    let mut ens = initial_ensemble(cfg, &data.reference[0])?;
    let mut record = TrajectoryRecord::new();
    let mut rows = Vec::with_capacity(cfg.run.cycles);
    let mut divergence = None;
    let mut above = 0usize;

    for n in 1..=cfg.run.cycles {
        let t0 = Instant::now();
        let reference = &data.reference[n];
        let outcome = (|| -> anyhow::Result<StepOutput> {
            let mut forecast = dynamics.forecast(&ens)?;
            if n % cfg.observation.interval != 0 {
                return Ok(StepOutput {
                    analysis: forecast,
                    ess: None,
                });
            }
            if alpha != 1.0 {
                forecast = apply_inflation(&forecast, alpha)?;
            }
            let ctx = CycleContext {
                cycle: n,
                reference,
                y: &data.observations[n - 1],
                obs: &om,
            };
            step.analyse(&ctx, forecast)
        })();
        let StepOutput { analysis, ess } = match outcome {
            Ok(o) => o,
            Err(e) => {
                divergence = Some(DivergenceReport {
                    cycle: n,
                    reason: format!("filter error: {e:#}"),
                });
                break;
            }
        };
        let mean = analysis.mean();
        let error = cycle_error(kind, &mean, reference);
        let wall_ms = cfg.run.timing.then(|| t0.elapsed().as_secs_f64() * 1e3);
        rows.push(CycleRow {
            cycle: n,
            error,
            ess,
            wall_ms,
        });
        if !error.is_finite() || !analysis.as_matrix().iter().all(|v| v.is_finite()) {
            divergence = Some(DivergenceReport {
                cycle: n,
                reason: "non-finite ensemble".into(),
            });
            break;
        }
        above = if error > cfg.run.divergence_threshold {
            above + 1
        } else {
            0
        };
        if above >= cfg.run.divergence_window {
            divergence = Some(DivergenceReport {
                cycle: n,
                reason: format!(
                    "error above {} for {} consecutive cycles",
                    cfg.run.divergence_threshold, cfg.run.divergence_window
                ),
            });
            break;
        }
        if n > cfg.run.discard {
            record.push(n, mean, reference.clone(), ess)?;
        }
        ens = analysis;
    }

    let rmse = divergence
        .is_none()
        .then(|| rmse_time_average(&record, RmseKind::from(kind)));
    let mut summary = RunSummary {
        rmse,
        mean_ess: record.mean_ess(),
        wall_time_s: started.elapsed().as_secs_f64(),
        cycles_completed: rows.len(),
        divergence,
        csv_path: None,
        config: cfg.clone(),
    };
    if let Some(dir) = out {
        summary.csv_path = Some(write_outputs(dir, &summary, &rows)?);
    }
    Ok(TwinRun { summary, rows })
}

/// Floats with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn cycles_csv(rows: &[CycleRow]) -> String {
    let mut s = String::from("cycle,rmse,ess,wall_ms\n");
    for r in rows {
        let ess = r.ess.map(fmt_f64).unwrap_or_default();
        let wall = r.wall_ms.map(fmt_f64).unwrap_or_default();
        let _ = writeln!(s, "{},{},{},{}", r.cycle, fmt_f64(r.error), ess, wall);
    }
    s
}

fn write_outputs(dir: &Path, summary: &RunSummary, rows: &[CycleRow]) -> anyhow::Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let csv = dir.join("cycles.csv");
    std::fs::write(&csv, cycles_csv(rows)).with_context(|| format!("writing {}", csv.display()))?;
    std::fs::write(dir.join("config.toml"), summary.config.to_toml_string()?)?;
    let mut s = summary.clone();
    s.csv_path = Some(csv.clone());
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&s)?)?;
    Ok(csv)
}
