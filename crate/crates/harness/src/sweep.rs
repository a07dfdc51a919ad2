//! Parameter sweeps over twin experiments.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use serde::Serialize;

use crate::config::{ExperimentConfig, SweepConfig};
use crate::twin::{fmt_f64, run_twin_experiment, RunSummary};

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub param1: f64,
    pub param2: Option<f64>,
    pub summary: RunSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepResult {
    pub sweep: SweepConfig,
    pub cells: Vec<SweepCell>,
}

impl SweepResult {
    /// Cell with the lowest RMSE. Diverged cells rank last; ties keep the
    /// first cell in grid order.
    pub fn best(&self) -> Option<&SweepCell> {
        self.cells
            .iter()
            .filter(|c| c.summary.rmse.is_some())
            .min_by(|a, b| a.summary.score().total_cmp(&b.summary.score()))
    }

    /// `param1,param2,rmse`. Diverged cells print `inf`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("param1,param2,rmse\n");
        for c in &self.cells {
            let p2 = c.param2.map(fmt_f64).unwrap_or_default();
            let rmse = c.summary.rmse.map(fmt_f64).unwrap_or_else(|| "inf".into());
            let _ = writeln!(s, "{},{},{}", fmt_f64(c.param1), p2, rmse);
        }
        s
    }
}

/// Runs one twin experiment per grid cell. The grid comes from `cfg.sweep`,
/// or the default inflation or rejuvenation grid of the filter.
pub fn run_sweep(cfg: &ExperimentConfig, out: Option<&Path>) -> anyhow::Result<SweepResult> {
    cfg.validate()?;
    let sweep = cfg
        .sweep
        .clone()
        .unwrap_or_else(|| SweepConfig::default_for(&cfg.model, cfg.filter.kind));
    let second: Vec<Option<f64>> = match sweep.param2 {
        Some(_) => sweep.values2.iter().copied().map(Some).collect(),
        None => vec![None],
    };
    let mut cells = Vec::with_capacity(sweep.values1.len() * second.len());
    for &v1 in &sweep.values1 {
        for &v2 in &second {
            let mut c = cfg.clone();
            c.sweep = None;
            sweep.param1.apply(&mut c.filter, v1)?;
            if let (Some(p2), Some(v2)) = (sweep.param2, v2) {
                p2.apply(&mut c.filter, v2)?;
            }
            let summary = run_twin_experiment(&c, None)
                .with_context(|| format!("sweep cell {}={v1}", sweep.param1.name()))?
                .summary;
            log::info!(
                "{}={v1} {:?} -> {:?}",
                sweep.param1.name(),
                v2,
                summary.rmse
            );
            cells.push(SweepCell {
                param1: v1,
                param2: v2,
                summary,
            });
        }
    }
    let result = SweepResult { sweep, cells };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("sweep.csv"), result.to_csv())?;
        std::fs::write(dir.join("config.toml"), cfg.to_toml_string()?)?;
        let best = result.best().map(|c| (c.param1, c.param2, c.summary.rmse));
        std::fs::write(dir.join("best.json"), serde_json::to_string_pretty(&best)?)?;
    }
    Ok(result)
}
