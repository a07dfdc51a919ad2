use crate::error::{Error, Result};
use crate::scalar::Real;

use super::coupling::{CouplingMatrix, TransportCost};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SinkhornOptions<T> {
    /// Entropic regularization strength.
    pub reg: T,
    /// Target for the largest row or column marginal error.
    pub tol: T,
    pub max_iters: usize,
}

impl<T: Real> SinkhornOptions<T> {
    pub fn new(reg: T) -> Self {
        Self {
            reg,
            tol: T::lit(1e-10),
            max_iters: 100_000,
        }
    }
}

/// Entropy-regularized coupling by log-domain Sinkhorn iterations.
///
/// Minimizes `Σ t_ij c_ij + reg Σ t_ij (ln t_ij − 1)` under the marginal
/// constraints. Rows or columns with zero mass carry no mass.
pub fn sinkhorn_coupling<T, C>(
    cost: &C,
    rows: &[T],
    cols: &[T],
    opts: &SinkhornOptions<T>,
) -> Result<CouplingMatrix<T>>
where
    T: Real,
    C: TransportCost<T> + ?Sized,
{
    let (m, n) = (rows.len(), cols.len());
    if !(opts.reg > T::zero()) {
        return Err(Error::InvalidArgument(
            "regularization must be positive".into(),
        ));
    }
    if cost.rows() != m || cost.cols() != n {
        return Err(Error::DimensionMismatch {
            expected: m * n,
            found: cost.rows() * cost.cols(),
        });
    }
    if rows.iter().chain(cols).any(|v| *v < T::zero()) {
        return Err(Error::InvalidMarginal(
            "marginals must be nonnegative".into(),
        ));
    }
    let rt = rows.iter().fold(T::zero(), |a, &b| a + b);
    let ct = cols.iter().fold(T::zero(), |a, &b| a + b);
    if (rt - ct).abs() > T::balance_tolerance(&rt) {
        return Err(Error::MarginalMismatch {
            rows: rt.as_f64(),
            cols: ct.as_f64(),
        });
    }

    let active_rows: Vec<usize> = (0..m).filter(|&i| rows[i] > T::zero()).collect();
    let active_cols: Vec<usize> = (0..n).filter(|&j| cols[j] > T::zero()).collect();
    let c: Vec<Vec<T>> = active_rows
        .iter()
        .map(|&i| active_cols.iter().map(|&j| cost.cost(i, j)).collect())
        .collect();
    let log_a: Vec<T> = active_rows.iter().map(|&i| rows[i].ln()).collect();
    let log_b: Vec<T> = active_cols.iter().map(|&j| cols[j].ln()).collect();
    let (ma, na) = (active_rows.len(), active_cols.len());

    // Dual potentials in cost units, warm-started through a decreasing
    // schedule of regularizations ending at `opts.reg`.
    let mut u = vec![T::zero(); ma];
    let mut v = vec![T::zero(); na];
    let spread = c.iter().flatten().fold(T::zero(), |a, &b| a.max(b.abs()));
    let mut schedule = Vec::new();
    let mut r = opts.reg;
    while r < spread {
        schedule.push(r);
        r *= T::lit(4.0);
    }
    schedule.push(r);
    schedule.reverse();

    let mut err = T::lit(f64::INFINITY);
    let mut iters = 0;
    let last = schedule.len() - 1;
    for (stage, &reg) in schedule.iter().enumerate() {
        let stage_tol = if stage == last {
            opts.tol
        } else {
            opts.tol.max(T::lit(1e-3))
        };
        loop {
            if iters >= opts.max_iters {
                return Err(Error::NonConvergence {
                    method: "sinkhorn",
                    iterations: iters,
                    error: err.as_f64(),
                });
            }
            for a in 0..ma {
                u[a] = reg * log_a[a] - reg * log_sum_exp((0..na).map(|b| (v[b] - c[a][b]) / reg));
            }
            for b in 0..na {
                v[b] = reg * log_b[b] - reg * log_sum_exp((0..ma).map(|a| (u[a] - c[a][b]) / reg));
            }
            iters += 1;
            // Columns are exact after the v update; measure the row error.
            err = (0..ma)
                .map(|a| {
                    let s = (0..na).fold(T::zero(), |acc, b| {
                        acc + ((u[a] + v[b] - c[a][b]) / reg).exp()
                    });
                    (s - rows[active_rows[a]]).abs()
                })
                .fold(T::zero(), |x, y| x.max(y));
            if err < stage_tol {
                break;
            }
        }
    }
    let reg = opts.reg;
    let mut entries = Vec::with_capacity(ma * na);
    for a in 0..ma {
        for b in 0..na {
            entries.push((
                active_rows[a],
                active_cols[b],
                ((u[a] + v[b] - c[a][b]) / reg).exp(),
            ));
        }
    }
    CouplingMatrix::from_triplets(m, n, entries, rows.to_vec(), cols.to_vec())
}

fn log_sum_exp<T: Real>(xs: impl Iterator<Item = T> + Clone) -> T {
    let max = xs.clone().fold(T::lit(f64::NEG_INFINITY), |a, b| a.max(b));
    if !max.is_finite() {
        return max;
    }
    max + xs.fold(T::zero(), |acc, x| acc + (x - max).exp()).ln()
}
