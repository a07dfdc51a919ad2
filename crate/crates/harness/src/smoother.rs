//! Path-space importance sampling and random-walk Metropolis for the
//! initial condition of a deterministic model given a sequence of
//! observations.

use std::path::Path;

use anyhow::{bail, Context};
use letf::filters::{effective_sample_size, log_likelihoods, weights_from_log};
use letf::models::LinearMap;
use letf::{Ensemble, FlowMap, ObservationModel, RngStream, WeightVector};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Paths below this fraction of effective members trigger a collapse
/// warning.
pub const COLLAPSE_FRACTION: f64 = 0.01;

/// Prior draws propagated through the model, with normalized path weights.
#[derive(Debug, Clone)]
pub struct WeightedPaths {
    /// `states[n]` holds all members at time `n` as columns, `n = 0..=N`.
    pub states: Vec<DMatrix<f64>>,
    /// Unnormalized log-weights `Σₙ log p(yⁿ | zⁿ)`.
    pub log_weights: DVector<f64>,
    pub weights: WeightVector,
    pub ess: f64,
}

impl WeightedPaths {
    /// Weighted mean of the states at time `n`.
    pub fn mean_at(&self, n: usize) -> DVector<f64> {
        &self.states[n] * self.weights.as_vector()
    }

    /// Delta-method standard error of the weighted mean of component `k`
    /// at time `n`.
    pub fn standard_error_at(&self, n: usize, k: usize) -> f64 {
        let mean = self.mean_at(n)[k];
        self.weights
            .iter()
            .zip(self.states[n].row(k).iter())
            .map(|(w, &z)| (w * (z - mean)).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// Draws `m` initial conditions from `prior`, propagates each through `ys.len()`
/// applications of `flow` and weights the paths by the product of their
/// observation likelihoods. Observation `ys[n − 1]` belongs to time `n`.
pub fn path_importance_sampler(
    flow: &dyn FlowMap<f64>,
    prior: &mut dyn FnMut(&mut RngStream) -> DVector<f64>,
    obs: &ObservationModel,
    ys: &[DVector<f64>],
    m: usize,
    rng: &mut RngStream,
) -> anyhow::Result<WeightedPaths> {
    if m == 0 {
        bail!("path sampler needs at least one member");
    }
    let dim = flow.dim();
    let mut z = DMatrix::zeros(dim, m);
    for j in 0..m {
        let draw = prior(rng);
        if draw.len() != dim {
            bail!("prior draw has dimension {}, model has {dim}", draw.len());
        }
        z.set_column(j, &draw);
    }
    let mut states = vec![z];
    let mut log_weights = DVector::zeros(m);
    for y in ys {
        let prev = states.last().expect("initial states present");
        let mut next = DMatrix::zeros(dim, m);
        for j in 0..m {
            next.set_column(j, &flow.advance(&prev.column(j).clone_owned())?);
        }
        log_weights += log_likelihoods(&Ensemble::from_matrix(next.clone())?, y, obs)?;
        states.push(next);
    }
    let weights = weights_from_log(&log_weights)?;
    let ess = effective_sample_size(&weights);
    if ess < COLLAPSE_FRACTION * m as f64 {
        log::warn!("path weights collapsed: effective sample size {ess:.2} of {m}");
    }
    Ok(WeightedPaths {
        states,
        log_weights,
        weights,
        ess,
    })
}

#[derive(Debug, Clone)]
pub struct McmcChain {
    pub samples: Vec<DVector<f64>>,
    pub acceptance_rate: f64,
}

impl McmcChain {
    pub fn mean(&self, burn_in: usize) -> DVector<f64> {
        let kept = &self.samples[burn_in..];
        kept.iter()
            .fold(DVector::zeros(kept[0].len()), |a, s| a + s)
            / kept.len() as f64
    }
}

/// Log of the path likelihood `Σₙ log p(yⁿ | Ψⁿ(z⁰))`.
pub fn path_log_likelihood(
    flow: &dyn FlowMap<f64>,
    obs: &ObservationModel,
    ys: &[DVector<f64>],
    z0: &DVector<f64>,
) -> anyhow::Result<f64> {
    let mut z = z0.clone();
    let mut total = 0.0;
    for y in ys {
        z = flow.advance(&z)?;
        let d = obs.observe(z.as_view()) - y;
        total -= 0.5 * d.component_div(obs.r_diag()).dot(&d);
    }
    Ok(total)
}

/// Random-walk Metropolis on the initial condition with proposal
/// `z⁰ + proposal_std · N(0, I)`. Rejected proposals repeat the current
/// state.
#[allow(clippy::too_many_arguments)]
pub fn mcmc_path_sampler(
    flow: &dyn FlowMap<f64>,
    log_prior: &dyn Fn(&DVector<f64>) -> f64,
    obs: &ObservationModel,
    ys: &[DVector<f64>],
    z_init: DVector<f64>,
    proposal_std: f64,
    n_samples: usize,
    rng: &mut RngStream,
) -> anyhow::Result<McmcChain> {
    if !(proposal_std >= 0.0) {
        bail!("proposal standard deviation must be nonnegative");
    }
    let mut current = z_init;
    let mut log_target = log_prior(&current) + path_log_likelihood(flow, obs, ys, &current)?;
    let mut samples = Vec::with_capacity(n_samples);
    let mut accepted = 0usize;
    for _ in 0..n_samples {
        let proposal = &current + rng.normal_vector::<f64>(current.len()) * proposal_std;
        let lt = log_prior(&proposal) + path_log_likelihood(flow, obs, ys, &proposal)?;
        let log_alpha = lt - log_target;
        if log_alpha >= 0.0 || rng.uniform().ln() < log_alpha {
            current = proposal;
            log_target = lt;
            accepted += 1;
        }
        samples.push(current.clone());
    }
    let acceptance_rate = if n_samples == 0 {
        0.0
    } else {
        accepted as f64 / n_samples as f64
    };
    Ok(McmcChain {
        samples,
        acceptance_rate,
    })
}

/// Standard error of a chain mean from `batches` non-overlapping batch
/// means.
pub fn batch_means_standard_error(values: &[f64], batches: usize) -> f64 {
    let len = values.len() / batches;
    let means: Vec<f64> = values
        .chunks_exact(len)
        .take(batches)
        .map(|c| c.iter().sum::<f64>() / len as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / batches as f64;
    let var = means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / (batches - 1) as f64;
    (var / batches as f64).sqrt()
}

/// Posterior of `z⁰` for `zⁿ = aⁿ z⁰`, `z⁰ ~ N(μ₀, σ₀²)` and
/// `yⁿ = zⁿ + N(0, r)`, `n = 1..=N`. Returns mean and variance.
pub fn linear_gaussian_smoother(
    a: f64,
    prior_mean: f64,
    prior_var: f64,
    r: f64,
    ys: &[f64],
) -> (f64, f64) {
    let mut precision = 1.0 / prior_var;
    let mut info = prior_mean / prior_var;
    let mut an = 1.0;
    for &y in ys {
        an *= a;
        precision += an * an / r;
        info += an * y / r;
    }
    (info / precision, 1.0 / precision)
}

/// The scalar linear-Gaussian smoothing problem run by the `smoother`
/// subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmootherConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::a")]
    pub a: f64,
    #[serde(default)]
    pub prior_mean: f64,
    #[serde(default = "defaults::one")]
    pub prior_var: f64,
    #[serde(default = "defaults::obs_variance")]
    pub obs_variance: f64,
    #[serde(default = "defaults::observations")]
    pub observations: Vec<f64>,
    #[serde(default = "defaults::ensemble_size")]
    pub ensemble_size: usize,
    #[serde(default = "defaults::mcmc_samples")]
    pub mcmc_samples: usize,
    #[serde(default = "defaults::burn_in")]
    pub burn_in: usize,
    #[serde(default = "defaults::proposal_std")]
    pub proposal_std: f64,
}

impl Default for SmootherConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            a: defaults::a(),
            prior_mean: 0.0,
            prior_var: 1.0,
            obs_variance: defaults::obs_variance(),
            observations: defaults::observations(),
            ensemble_size: defaults::ensemble_size(),
            mcmc_samples: defaults::mcmc_samples(),
            burn_in: defaults::burn_in(),
            proposal_std: defaults::proposal_std(),
        }
    }
}

impl SmootherConfig {
    pub fn validate(&self) -> anyhow::Result<()> {
        if !(self.prior_var > 0.0) || !(self.obs_variance > 0.0) {
            bail!("variances must be positive");
        }
        if self.ensemble_size == 0 {
            bail!("ensemble size must be positive");
        }
        if self.burn_in + 40 > self.mcmc_samples {
            bail!("need at least 40 chain samples after burn-in");
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> anyhow::Result<Self> {
        let cfg: Self = toml::from_str(s).context("parsing smoother config")?;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub standard_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SmootherReport {
    pub config: SmootherConfig,
    pub exact_mean: f64,
    pub exact_var: f64,
    pub importance: Estimate,
    pub importance_ess: f64,
    pub mcmc: Estimate,
    pub mcmc_var: f64,
    pub acceptance_rate: f64,
}

/// Estimates the posterior mean of `z⁰` with both samplers and the exact
/// formula. Writes `smoother.json` into `out` when given.
pub fn run_smoother(cfg: &SmootherConfig, out: Option<&Path>) -> anyhow::Result<SmootherReport> {
    cfg.validate()?;
    let flow = LinearMap {
        a: DMatrix::from_element(1, 1, cfg.a),
    };
    let obs = ObservationModel::selection(vec![0], cfg.obs_variance)?;
    let ys: Vec<DVector<f64>> = cfg
        .observations
        .iter()
        .map(|&y| DVector::from_element(1, y))
        .collect();
    let (exact_mean, exact_var) = linear_gaussian_smoother(
        cfg.a,
        cfg.prior_mean,
        cfg.prior_var,
        cfg.obs_variance,
        &cfg.observations,
    );

    let mut rng = RngStream::new(cfg.seed, 0);
    let sd = cfg.prior_var.sqrt();
    let mut prior = |r: &mut RngStream| {
        DVector::from_element(1, cfg.prior_mean + sd * r.standard_normal::<f64>())
    };
    let paths = path_importance_sampler(&flow, &mut prior, &obs, &ys, cfg.ensemble_size, &mut rng)?;

    let mut chain_rng = RngStream::new(cfg.seed, 1);
    let log_prior = |z: &DVector<f64>| -0.5 * (z[0] - cfg.prior_mean).powi(2) / cfg.prior_var;
    let chain = mcmc_path_sampler(
        &flow,
        &log_prior,
        &obs,
        &ys,
        DVector::from_element(1, cfg.prior_mean),
        cfg.proposal_std,
        cfg.mcmc_samples,
        &mut chain_rng,
    )?;
    let kept: Vec<f64> = chain.samples[cfg.burn_in..].iter().map(|s| s[0]).collect();
    let mcmc_mean = kept.iter().sum::<f64>() / kept.len() as f64;
    let mcmc_var =
        kept.iter().map(|v| (v - mcmc_mean).powi(2)).sum::<f64>() / (kept.len() - 1) as f64;

    let report = SmootherReport {
        config: cfg.clone(),
        exact_mean,
        exact_var,
        importance: Estimate {
            mean: paths.mean_at(0)[0],
            standard_error: paths.standard_error_at(0, 0),
        },
        importance_ess: paths.ess,
        mcmc: Estimate {
            mean: mcmc_mean,
            standard_error: batch_means_standard_error(&kept, 40),
        },
        mcmc_var,
        acceptance_rate: chain.acceptance_rate,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(
            dir.join("smoother.json"),
            serde_json::to_string_pretty(&report)?,
        )?;
    }
    Ok(report)
}

mod defaults {
    pub fn a() -> f64 {
        0.9
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn obs_variance() -> f64 {
        0.5
    }
    pub fn observations() -> Vec<f64> {
        vec![1.2, 0.7]
    }
    pub fn ensemble_size() -> usize {
        20_000
    }
    pub fn mcmc_samples() -> usize {
        41_000
    }
    pub fn burn_in() -> usize {
        1_000
    }
    pub fn proposal_std() -> f64 {
        0.8
    }
}
