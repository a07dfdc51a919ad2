//! Experiment configuration, read from TOML.
//!
//! Every section except `model` and `filter` has defaults that reproduce the
//! standard Lorenz-63 and Lorenz-96 twin setups.

use std::path::Path;

use anyhow::{bail, Context};
use letf::{KernelKind, RejuvenationCovariance, RmseKind};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelConfig,
    /// Defaults to `dt = 0.01, steps = 12` for Lorenz-63 and
    /// `dt = 0.005, steps = 22` for Lorenz-96.
    #[serde(default)]
    pub integrator: Option<IntegratorConfig>,
    #[serde(default)]
    pub observation: ObservationConfig,
    pub filter: FilterConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub sweep: Option<SweepConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    Lorenz63 {
        #[serde(default = "defaults::sigma")]
        sigma: f64,
        #[serde(default = "defaults::rho")]
        rho: f64,
        #[serde(default = "defaults::beta")]
        beta: f64,
    },
    Lorenz96 {
        #[serde(default = "defaults::n_grid")]
        n_grid: usize,
        #[serde(default = "defaults::forcing")]
        forcing: f64,
        #[serde(default = "defaults::dx")]
        dx: f64,
    },
}

impl ModelConfig {
    pub fn lorenz63() -> Self {
        Self::Lorenz63 {
            sigma: defaults::sigma(),
            rho: defaults::rho(),
            beta: defaults::beta(),
        }
    }

    pub fn lorenz96() -> Self {
        Self::Lorenz96 {
            n_grid: defaults::n_grid(),
            forcing: defaults::forcing(),
            dx: defaults::dx(),
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            Self::Lorenz63 { .. } => 3,
            Self::Lorenz96 { n_grid, .. } => n_grid,
        }
    }

    pub fn default_integrator(&self) -> IntegratorConfig {
        match self {
            Self::Lorenz63 { .. } => IntegratorConfig {
                dt: 0.01,
                steps: 12,
            },
            Self::Lorenz96 { .. } => IntegratorConfig {
                dt: 0.005,
                steps: 22,
            },
        }
    }

    /// `x` for Lorenz-63, every other grid point starting at the first for
    /// Lorenz-96.
    pub fn default_observed(&self) -> Vec<usize> {
        match *self {
            Self::Lorenz63 { .. } => vec![0],
            Self::Lorenz96 { n_grid, .. } => (0..n_grid).step_by(2).collect(),
        }
    }

    /// Error norms divided by `√N_z` for both models, so that errors compare
    /// directly with the observation noise level `√R`.
    pub fn default_rmse(&self) -> RmseChoice {
        RmseChoice::ComponentNormalized
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    pub dt: f64,
    /// Implicit midpoint steps per assimilation cycle.
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObservationConfig {
    /// Observed state components; the model default when absent.
    #[serde(default)]
    pub indices: Option<Vec<usize>>,
    #[serde(default = "defaults::variance")]
    pub variance: f64,
    /// Cycles between analyses. Cycles in between only forecast.
    #[serde(default = "defaults::one")]
    pub interval: usize,
}

impl Default for ObservationConfig {
    fn default() -> Self {
        Self {
            indices: None,
            variance: defaults::variance(),
            interval: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Sir,
    /// EnKF with perturbed observations.
    Enkf,
    Esrf,
    Etpf,
    /// ETPF with one transport problem per state component.
    EtpfR0,
    StochasticEtpf,
    Letkf,
    /// Localized ETPF.
    Letpf,
}

impl FilterKind {
    pub const ALL: [FilterKind; 8] = [
        Self::Sir,
        Self::Enkf,
        Self::Esrf,
        Self::Etpf,
        Self::EtpfR0,
        Self::StochasticEtpf,
        Self::Letkf,
        Self::Letpf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Sir => "sir",
            Self::Enkf => "enkf",
            Self::Esrf => "esrf",
            Self::Etpf => "etpf",
            Self::EtpfR0 => "etpf_r0",
            Self::StochasticEtpf => "stochastic_etpf",
            Self::Letkf => "letkf",
            Self::Letpf => "letpf",
        }
    }

    /// Kalman-type filters are tuned by inflation, particle filters by
    /// rejuvenation.
    pub fn is_kalman(self) -> bool {
        matches!(self, Self::Enkf | Self::Esrf | Self::Letkf)
    }

    pub fn is_localized(self) -> bool {
        matches!(self, Self::Letkf | Self::Letpf)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelChoice {
    Triangular,
    #[default]
    GaspariCohn,
}

impl From<KernelChoice> for KernelKind {
    fn from(k: KernelChoice) -> Self {
        match k {
            KernelChoice::Triangular => KernelKind::Triangular,
            KernelChoice::GaspariCohn => KernelKind::GaspariCohn,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejuvenationChoice {
    #[default]
    Forecast,
    CouplingLocal,
}

impl From<RejuvenationChoice> for RejuvenationCovariance {
    fn from(r: RejuvenationChoice) -> Self {
        match r {
            RejuvenationChoice::Forecast => RejuvenationCovariance::Forecast,
            RejuvenationChoice::CouplingLocal => RejuvenationCovariance::CouplingLocal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RmseChoice {
    MeanNorm,
    ComponentNormalized,
    RootMeanSquare,
}

impl From<RmseChoice> for RmseKind {
    fn from(r: RmseChoice) -> Self {
        match r {
            RmseChoice::MeanNorm => RmseKind::MeanNorm,
            RmseChoice::ComponentNormalized => RmseKind::ComponentNormalized,
            RmseChoice::RootMeanSquare => RmseKind::RootMeanSquare,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub kind: FilterKind,
    pub ensemble_size: usize,
    #[serde(default = "defaults::inflation")]
    pub inflation: f64,
    #[serde(default)]
    pub h_rej: f64,
    /// SIR coupling parameter.
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default)]
    pub kernel: KernelChoice,
    /// Observation-error localization radius in grid units. Infinite when
    /// absent.
    #[serde(default)]
    pub r_loc_r: Option<f64>,
    /// Cost-function localization radius of the localized ETPF.
    #[serde(default)]
    pub r_loc_c: Option<f64>,
    #[serde(default)]
    pub rejuvenation: RejuvenationChoice,
}

impl FilterConfig {
    pub fn new(kind: FilterKind, ensemble_size: usize) -> Self {
        Self {
            kind,
            ensemble_size,
            inflation: 1.0,
            h_rej: 0.0,
            epsilon: 0.0,
            kernel: KernelChoice::default(),
            r_loc_r: None,
            r_loc_c: None,
            rejuvenation: RejuvenationChoice::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Assimilation cycles, spin-up included.
    #[serde(default = "defaults::cycles")]
    pub cycles: usize,
    /// Leading cycles excluded from the time averages.
    #[serde(default = "defaults::discard")]
    pub discard: usize,
    /// Flow-map applications taking the reference from its initial
    /// condition onto the attractor.
    #[serde(default = "defaults::reference_spinup")]
    pub reference_spinup: usize,
    /// Standard deviation of the seeded perturbation of the reference
    /// initial condition.
    #[serde(default = "defaults::reference_perturbation")]
    pub reference_perturbation: f64,
    /// Standard deviation of the initial ensemble around the reference.
    #[serde(default = "defaults::one_f")]
    pub init_spread: f64,
    #[serde(default = "defaults::divergence_threshold")]
    pub divergence_threshold: f64,
    #[serde(default = "defaults::divergence_window")]
    pub divergence_window: usize,
    /// Model default when absent.
    #[serde(default)]
    pub rmse: Option<RmseChoice>,
    /// Fill the `wall_ms` column. Off by default so reruns are byte-identical.
    #[serde(default)]
    pub timing: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            cycles: defaults::cycles(),
            discard: defaults::discard(),
            reference_spinup: defaults::reference_spinup(),
            reference_perturbation: defaults::reference_perturbation(),
            init_spread: 1.0,
            divergence_threshold: defaults::divergence_threshold(),
            divergence_window: defaults::divergence_window(),
            rmse: None,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    Inflation,
    HRej,
    Epsilon,
    EnsembleSize,
    RLocR,
    RLocC,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            Self::Inflation => "inflation",
            Self::HRej => "h_rej",
            Self::Epsilon => "epsilon",
            Self::EnsembleSize => "ensemble_size",
            Self::RLocR => "r_loc_r",
            Self::RLocC => "r_loc_c",
        }
    }

    pub fn apply(self, filter: &mut FilterConfig, value: f64) -> anyhow::Result<()> {
        match self {
            Self::Inflation => filter.inflation = value,
            Self::HRej => filter.h_rej = value,
            Self::Epsilon => filter.epsilon = value,
            Self::EnsembleSize => {
                if !(value >= 1.0) || value.fract() != 0.0 {
                    bail!("ensemble size must be a positive integer, got {value}");
                }
                filter.ensemble_size = value as usize;
            }
            Self::RLocR => filter.r_loc_r = Some(value),
            Self::RLocC => filter.r_loc_c = Some(value),
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub param1: SweepParam,
    pub values1: Vec<f64>,
    #[serde(default)]
    pub param2: Option<SweepParam>,
    #[serde(default)]
    pub values2: Vec<f64>,
}

impl SweepConfig {
    /// Inflation `1.0, 1.02, …, 1.12`.
    pub fn inflation_grid() -> Vec<f64> {
        (0..=6).map(|k| 1.0 + 0.02 * k as f64).collect()
    }

    /// Rejuvenation `0, step, …, 0.4`.
    pub fn rejuvenation_grid(step: f64) -> Vec<f64> {
        let n = (0.4 / step).round() as usize;
        (0..=n).map(|k| step * k as f64).collect()
    }

    /// Inflation for Kalman-type filters, rejuvenation (step 0.04 for
    /// Lorenz-63, 0.05 for Lorenz-96) for particle filters.
    pub fn default_for(model: &ModelConfig, kind: FilterKind) -> Self {
        let (param1, values1) = if kind.is_kalman() {
            (SweepParam::Inflation, Self::inflation_grid())
        } else {
            let step = match model {
                ModelConfig::Lorenz63 { .. } => 0.04,
                ModelConfig::Lorenz96 { .. } => 0.05,
            };
            (SweepParam::HRej, Self::rejuvenation_grid(step))
        };
        Self {
            param1,
            values1,
            param2: None,
            values2: Vec::new(),
        }
    }
}

impl ExperimentConfig {
    /// The standard Lorenz-63 twin: observe `x` with `R = 8` every 12 steps
    /// of size 0.01.
    pub fn lorenz63(kind: FilterKind, ensemble_size: usize) -> Self {
        Self {
            seed: 0,
            model: ModelConfig::lorenz63(),
            integrator: None,
            observation: ObservationConfig::default(),
            filter: FilterConfig::new(kind, ensemble_size),
            run: RunConfig::default(),
            sweep: None,
        }
    }

    /// The standard Lorenz-96 twin: 40 grid points, `F = 8`, every other
    /// point observed with `R = 8` every 22 steps of size 0.005.
    pub fn lorenz96(kind: FilterKind, ensemble_size: usize) -> Self {
        Self {
            seed: 0,
            model: ModelConfig::lorenz96(),
            integrator: None,
            observation: ObservationConfig::default(),
            filter: FilterConfig::new(kind, ensemble_size),
            run: RunConfig {
                cycles: 2000,
                discard: 500,
                ..RunConfig::default()
            },
            sweep: None,
        }
    }

    pub fn from_toml_str(s: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(s).context("parsing experiment config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml_str(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml_string(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn integrator(&self) -> IntegratorConfig {
        self.integrator
            .unwrap_or_else(|| self.model.default_integrator())
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        self.observation
            .indices
            .clone()
            .unwrap_or_else(|| self.model.default_observed())
    }

    pub fn rmse_kind(&self) -> RmseChoice {
        self.run.rmse.unwrap_or_else(|| self.model.default_rmse())
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let dim = self.model.dim();
        match self.model {
            ModelConfig::Lorenz63 { sigma, rho, beta } => {
                if ![sigma, rho, beta].iter().all(|v| v.is_finite()) {
                    bail!("Lorenz-63 parameters must be finite");
                }
            }
            ModelConfig::Lorenz96 {
                n_grid,
                forcing,
                dx,
            } => {
                if n_grid < 4 {
                    bail!("Lorenz-96 needs at least 4 grid points, got {n_grid}");
                }
                if !forcing.is_finite() || !(dx > 0.0) {
                    bail!("Lorenz-96 needs finite forcing and positive grid spacing");
                }
            }
        }
        let integ = self.integrator();
        if !(integ.dt > 0.0) || !integ.dt.is_finite() || integ.steps == 0 {
            bail!("integrator needs a positive time step and at least one step per cycle");
        }
        let idx = self.observed_indices();
        if idx.is_empty() {
            bail!("at least one component must be observed");
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= dim) {
            bail!("observed index {bad} out of range for state dimension {dim}");
        }
        if !(self.observation.variance > 0.0) || !self.observation.variance.is_finite() {
            bail!("observation variance must be positive");
        }
        if self.observation.interval == 0 {
            bail!("observation interval must be positive");
        }
        let f = &self.filter;
        if f.ensemble_size < 2 {
            bail!("ensemble size must be at least 2");
        }
        if !(f.inflation >= 1.0) || !f.inflation.is_finite() {
            bail!("inflation factor must be finite and at least 1");
        }
        if !(f.h_rej >= 0.0) || !f.h_rej.is_finite() {
            bail!("rejuvenation parameter must be finite and nonnegative");
        }
        if !(f.epsilon >= 0.0) || !f.epsilon.is_finite() {
            bail!("epsilon must be finite and nonnegative");
        }
        for r in [f.r_loc_r, f.r_loc_c].into_iter().flatten() {
            if !(r >= 0.0) {
                bail!("localization radii must be nonnegative");
            }
        }
        let run = &self.run;
        if run.cycles == 0 {
            bail!("at least one assimilation cycle is needed");
        }
        if run.discard >= run.cycles {
            bail!(
                "discard ({}) must be smaller than cycles ({})",
                run.discard,
                run.cycles
            );
        }
        if !(run.init_spread >= 0.0) || !(run.reference_perturbation >= 0.0) {
            bail!("spreads must be nonnegative");
        }
        if !(run.divergence_threshold > 0.0) || run.divergence_window == 0 {
            bail!("divergence threshold and window must be positive");
        }
        if let Some(s) = &self.sweep {
            if s.values1.is_empty() {
                bail!("sweep needs at least one value for {}", s.param1.name());
            }
            if s.param2.is_some() && s.values2.is_empty() {
                bail!("sweep param2 given without values2");
            }
        }
        Ok(())
    }
}

mod defaults {
    pub fn sigma() -> f64 {
        10.0
    }
    pub fn rho() -> f64 {
        28.0
    }
    pub fn beta() -> f64 {
        8.0 / 3.0
    }
    pub fn n_grid() -> usize {
        40
    }
    pub fn forcing() -> f64 {
        8.0
    }
    pub fn dx() -> f64 {
        1.0 / 3.0
    }
    pub fn variance() -> f64 {
        8.0
    }
    pub fn one() -> usize {
        1
    }
    pub fn one_f() -> f64 {
        1.0
    }
    pub fn inflation() -> f64 {
        1.0
    }
    pub fn cycles() -> usize {
        5000
    }
    pub fn discard() -> usize {
        200
    }
    pub fn reference_spinup() -> usize {
        1000
    }
    pub fn reference_perturbation() -> f64 {
        0.01
    }
    pub fn divergence_threshold() -> f64 {
        100.0
    }
    pub fn divergence_window() -> usize {
        50
    }
}
