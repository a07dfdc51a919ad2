use nalgebra::DMatrix;

use crate::scalar::Real;

use super::coupling::{CouplingMatrix, SquaredEuclidean, TransportCost};
use super::simplex::solve_optimal_coupling;

/// Largest support handled by enumerating every permutation.
pub const EXHAUSTIVE_LIMIT: usize = 8;

/// Outcome of a cyclical monotonicity search.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport<T> {
    pub pairs: usize,
    /// `Σ c(x_i, y_i) − min_σ Σ c(x_i, y_σ(i))`; positive means a violation.
    pub worst_margin: T,
    /// A permutation attaining the worst margin.
    pub worst_permutation: Vec<usize>,
    /// `Σ c(x_i, y_i)` of the given pairing.
    pub pairing_cost: T,
    pub exhaustive: bool,
}

impl<T: Real> MonotonicityReport<T> {
    /// True when no permutation beats the pairing by more than `tol`
    /// relative to the pairing cost.
    pub fn is_monotone(&self, tol: T) -> bool {
        self.worst_margin <= tol * self.pairing_cost.max(T::one())
    }
}

/// Searches for a reassignment `σ` of the pairs `(x_i, y_i)` (columns of
/// `sources` and `targets`) that lowers the total squared distance.
///
/// Up to [`EXHAUSTIVE_LIMIT`] pairs every permutation is enumerated. Larger
/// supports solve the assignment problem exactly, which finds the best
/// permutation without sampling.
pub fn check_cyclical_monotonicity<T: Real>(
    sources: &DMatrix<T>,
    targets: &DMatrix<T>,
) -> MonotonicityReport<T> {
    assert_eq!(sources.shape(), targets.shape(), "support pairs must align");
    let n = sources.ncols();
    let cost = SquaredEuclidean::new(sources, targets);
    let pairing_cost = (0..n).fold(T::zero(), |acc, i| acc + cost.cost(i, i));
    let (best_cost, best_perm, exhaustive) = if n <= EXHAUSTIVE_LIMIT {
        let (c, p) = best_permutation_exhaustive(&cost, n);
        (c, p, true)
    } else {
        let (c, p) = best_permutation_assignment(&cost, n);
        (c, p, false)
    };
    MonotonicityReport {
        pairs: n,
        worst_margin: pairing_cost - best_cost,
        worst_permutation: best_perm,
        pairing_cost,
        exhaustive,
    }
}

/// Support pairs `(x_i, y_j)` of a coupling, keeping cells above `threshold`.
pub fn coupling_support<T: Real>(
    coupling: &CouplingMatrix<T>,
    sources: &DMatrix<T>,
    targets: &DMatrix<T>,
    threshold: T,
) -> (DMatrix<T>, DMatrix<T>) {
    let cells: Vec<(usize, usize)> = coupling
        .entries()
        .filter(|(_, _, v)| **v > threshold)
        .map(|(i, j, _)| (i, j))
        .collect();
    let xs = DMatrix::from_fn(sources.nrows(), cells.len(), |r, k| {
        sources[(r, cells[k].0)]
    });
    let ys = DMatrix::from_fn(targets.nrows(), cells.len(), |r, k| {
        targets[(r, cells[k].1)]
    });
    (xs, ys)
}

fn best_permutation_exhaustive<T: Real, C: TransportCost<T>>(
    cost: &C,
    n: usize,
) -> (T, Vec<usize>) {
    let mut perm: Vec<usize> = (0..n).collect();
    let total = |p: &[usize]| {
        p.iter()
            .enumerate()
            .fold(T::zero(), |acc, (i, &j)| acc + cost.cost(i, j))
    };
    let mut best = (total(&perm), perm.clone());
    // Heap's algorithm.
    let mut c = vec![0usize; n];
    let mut i = 1;
    while i < n {
        if c[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(c[i], i);
            }
            let t = total(&perm);
            if t < best.0 {
                best = (t, perm.clone());
            }
            c[i] += 1;
            i = 1;
        } else {
            c[i] = 0;
            i += 1;
        }
    }
    best
}

fn best_permutation_assignment<T: Real, C: TransportCost<T>>(
    cost: &C,
    n: usize,
) -> (T, Vec<usize>) {
    // Unit marginals keep every basic flow exactly 0 or 1.
    let ones = vec![T::one(); n];
    let sol =
        solve_optimal_coupling(cost, &ones, &ones).expect("assignment problem is always feasible");
    let mut perm = vec![usize::MAX; n];
    for (i, j, v) in sol.coupling.entries() {
        if *v > T::lit(0.5) {
            perm[i] = j;
        }
    }
    debug_assert!(perm.iter().all(|&j| j < n));
    let c = perm
        .iter()
        .enumerate()
        .fold(T::zero(), |acc, (i, &j)| acc + cost.cost(i, j));
    (c, perm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(1, xs.len(), xs)
    }

    #[test]
    fn sorted_pairs_are_monotone() {
        let r = check_cyclical_monotonicity(&line(&[0.0, 1.0, 2.0]), &line(&[0.5, 1.5, 3.0]));
        assert!(r.exhaustive);
        assert!(r.is_monotone(1e-12));
        assert_eq!(r.worst_margin, 0.0);
    }

    #[test]
    fn crossed_pairs_violate_by_two() {
        let r = check_cyclical_monotonicity(&line(&[0.0, 1.0]), &line(&[1.0, 0.0]));
        assert_eq!(r.worst_margin, 2.0);
        assert_eq!(r.worst_permutation, vec![1, 0]);
        assert!(!r.is_monotone(1e-12));
    }

    #[test]
    fn assignment_path_matches_enumeration() {
        let xs = line(&[0.3, -1.2, 2.5, 0.9, -0.4, 1.7, 3.1, -2.0]);
        let ys = line(&[1.1, 0.2, -0.7, 2.2, 0.0, -1.5, 0.8, 2.9]);
        let exact = check_cyclical_monotonicity(&xs, &ys);
        let cost = SquaredEuclidean::new(&xs, &ys);
        let (c, _) = best_permutation_assignment(&cost, 8);
        assert!((exact.pairing_cost - c - exact.worst_margin).abs() < 1e-12);
    }

    #[test]
    fn large_support_uses_assignment() {
        let xs = line(&(0..12).map(|i| i as f64).collect::<Vec<_>>());
        let mut ys = xs.clone();
        ys.swap_columns(3, 7);
        let r = check_cyclical_monotonicity(&xs, &ys);
        assert!(!r.exhaustive);
        assert!((r.worst_margin - 32.0).abs() < 1e-12);
    }
}
