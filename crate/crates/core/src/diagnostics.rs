//! Skill and convergence metrics.

use nalgebra::DVector;

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Per-cycle analysis means aligned with reference states.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryRecord<T: Real> {
    steps: Vec<usize>,
    means: Vec<DVector<T>>,
    references: Vec<DVector<T>>,
    ess: Vec<Option<T>>,
}

impl<T: Real> TrajectoryRecord<T> {
    pub fn new() -> Self {
        Self {
            steps: Vec::new(),
            means: Vec::new(),
            references: Vec::new(),
            ess: Vec::new(),
        }
    }

    pub fn push(
        &mut self,
        step: usize,
        mean: DVector<T>,
        reference: DVector<T>,
        ess: Option<T>,
    ) -> Result<()> {
        if mean.len() != reference.len() {
            return Err(Error::DimensionMismatch {
                expected: reference.len(),
                found: mean.len(),
            });
        }
        if let Some(first) = self.references.first() {
            if first.len() != reference.len() {
                return Err(Error::DimensionMismatch {
                    expected: first.len(),
                    found: reference.len(),
                });
            }
        }
        self.steps.push(step);
        self.means.push(mean);
        self.references.push(reference);
        self.ess.push(ess);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn means(&self) -> &[DVector<T>] {
        &self.means
    }

    pub fn references(&self) -> &[DVector<T>] {
        &self.references
    }

    pub fn ess(&self) -> &[Option<T>] {
        &self.ess
    }

    /// `‖z̄ⁿ − z_refⁿ‖` per recorded step.
    pub fn errors(&self) -> impl Iterator<Item = T> + '_ {
        self.means
            .iter()
            .zip(&self.references)
            .map(|(m, r)| (m - r).norm())
    }

    /// Mean of the recorded ESS values, ignoring steps without one.
    pub fn mean_ess(&self) -> Option<T> {
        let vals: Vec<T> = self.ess.iter().flatten().copied().collect();
        if vals.is_empty() {
            return None;
        }
        Some(vals.iter().fold(T::zero(), |a, &b| a + b) / T::lit(vals.len() as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RmseKind {
    /// `(1/N) Σ ‖z̄ⁿ − z_refⁿ‖`.
    #[default]
    MeanNorm,
    /// As `MeanNorm` with each norm divided by `√N_z`.
    ComponentNormalized,
    /// `√((1/N) Σ ‖z̄ⁿ − z_refⁿ‖²)`.
    RootMeanSquare,
}

/// Time-averaged RMSE of a record. Returns 0 for an empty record.
pub fn rmse_time_average<T: Real>(record: &TrajectoryRecord<T>, kind: RmseKind) -> T {
    if record.is_empty() {
        return T::zero();
    }
    let n = T::lit(record.len() as f64);
    match kind {
        RmseKind::MeanNorm => record.errors().fold(T::zero(), |a, e| a + e) / n,
        RmseKind::ComponentNormalized => {
            let nz = T::lit(record.references[0].len().max(1) as f64).sqrt();
            record.errors().fold(T::zero(), |a, e| a + e / nz) / n
        }
        RmseKind::RootMeanSquare => (record.errors().fold(T::zero(), |a, e| a + e * e) / n).sqrt(),
    }
}

/// `C(x, s) = Σₙ zⁿ(x + s) zⁿ(x) / Σₙ zⁿ(x)²` at grid index `x` with a
/// periodic shift of `shift` grid points. A zero denominator gives 1 when
/// the numerator also vanishes and NaN otherwise.
pub fn spatial_correlation_at<T: Real>(trajectory: &[DVector<T>], x: usize, shift: usize) -> T {
    let mut num = T::zero();
    let mut den = T::zero();
    for z in trajectory {
        let n = z.len();
        num += z[(x + shift) % n] * z[x % n];
        den += z[x % n] * z[x % n];
    }
    if num == den {
        T::one()
    } else {
        num / den
    }
}

/// Spatial correlation averaged over all grid points, assuming homogeneity.
pub fn spatial_correlation<T: Real>(trajectory: &[DVector<T>], shift: usize) -> T {
    let Some(first) = trajectory.first() else {
        return T::one();
    };
    let n = first.len();
    if n == 0 {
        return T::one();
    }
    let total = (0..n).fold(T::zero(), |a, x| {
        a + spatial_correlation_at(trajectory, x, shift)
    });
    total / T::lit(n as f64)
}

/// Least-squares fit of `log(error) = intercept + slope · log(M)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    /// Standard error of the slope; zero with exactly two degrees of freedom lost.
    pub std_error: f64,
}

pub fn convergence_fit(points: &[(f64, f64)]) -> Result<SlopeFit> {
    if points.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "need at least 3 points, got {}",
            points.len()
        )));
    }
    if let Some(&(m, e)) = points.iter().find(|&&(m, e)| !(e > 0.0) || !(m > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "nonpositive value in rate data: M = {m}, error = {e}"
        )));
    }
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("all M values are equal".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let std_error = (ssr / (n - 2.0) / sxx).sqrt();
    Ok(SlopeFit {
        slope,
        intercept,
        std_error,
    })
}

/// Slope of `log(error)` against `log(M)`.
pub fn convergence_slope(points: &[(f64, f64)]) -> Result<f64> {
    convergence_fit(points).map(|f| f.slope)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{flow_map, FlowMapConfig, Lorenz96};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn record_from(pairs: &[(Vec<f64>, Vec<f64>)]) -> TrajectoryRecord<f64> {
        let mut rec = TrajectoryRecord::new();
        for (k, (m, r)) in pairs.iter().enumerate() {
            rec.push(
                k,
                DVector::from_vec(m.clone()),
                DVector::from_vec(r.clone()),
                None,
            )
            .unwrap();
        }
        rec
    }

    #[test]
    fn perfect_record_has_zero_rmse() {
        let rec = record_from(&[
            (vec![1.0, 2.0], vec![1.0, 2.0]),
            (vec![3.0, 4.0], vec![3.0, 4.0]),
        ]);
        assert_eq!(rmse_time_average(&rec, RmseKind::MeanNorm), 0.0);
    }

    #[test]
    fn constant_error_gives_its_norm() {
        let rec = record_from(&[
            (vec![3.0, 4.0], vec![0.0, 0.0]),
            (vec![4.0, 6.0], vec![1.0, 2.0]),
        ]);
        assert_eq!(rmse_time_average(&rec, RmseKind::MeanNorm), 5.0);
        assert_eq!(rmse_time_average(&rec, RmseKind::RootMeanSquare), 5.0);
        assert!(
            (rmse_time_average(&rec, RmseKind::ComponentNormalized) - 5.0 / 2f64.sqrt()).abs()
                < 1e-15
        );
    }

    #[test]
    fn rmse_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = (0..50)
            .map(|_| {
                (
                    (0..4).map(|_| rng.random()).collect(),
                    (0..4).map(|_| rng.random()).collect(),
                )
            })
            .collect();
        let rec = record_from(&pairs);
        let mut total = 0.0;
        let mut total_sq = 0.0;
        for (m, r) in &pairs {
            let mut s = 0.0;
            for k in 0..4 {
                s += (m[k] - r[k]) * (m[k] - r[k]);
            }
            total += s.sqrt();
            total_sq += s;
        }
        assert!((rmse_time_average(&rec, RmseKind::MeanNorm) - total / 50.0).abs() < 1e-12);
        assert!(
            (rmse_time_average(&rec, RmseKind::RootMeanSquare) - (total_sq / 50.0).sqrt()).abs()
                < 1e-12
        );
    }

    #[test]
    fn mismatched_lengths_rejected() {
        let mut rec = TrajectoryRecord::<f64>::new();
        assert!(rec
            .push(0, DVector::zeros(2), DVector::zeros(3), None)
            .is_err());
        rec.push(0, DVector::zeros(2), DVector::zeros(2), Some(1.0))
            .unwrap();
        assert!(rec
            .push(1, DVector::zeros(3), DVector::zeros(3), None)
            .is_err());
        assert_eq!(rec.mean_ess(), Some(1.0));
    }

    #[test]
    fn constant_field_is_fully_correlated() {
        let traj = vec![DVector::from_element(10, 2.5); 5];
        for s in 0..10 {
            assert_eq!(spatial_correlation(&traj, s), 1.0);
        }
    }

    #[test]
    fn lorenz96_correlation_decays_and_matches_double_loop() {
        let model = Lorenz96::new(40, 8.0_f64, 1.0).unwrap();
        let cfg = FlowMapConfig::new(0.005, 22);
        let mut z = DVector::from_fn(40, |j, _| if j == 20 { 8.01 } else { 8.0 });
        for _ in 0..400 {
            z = flow_map(&model, &z, &cfg).unwrap();
        }
        let mut traj = Vec::new();
        for _ in 0..300 {
            z = flow_map(&model, &z, &cfg).unwrap();
            traj.push(z.clone());
        }
        let mut naive = [0.0_f64; 2];
        for (slot, s) in [1usize, 5].into_iter().enumerate() {
            let mut acc = 0.0;
            for x in 0..40 {
                let mut num = 0.0;
                let mut den = 0.0;
                for zn in &traj {
                    num += zn[(x + s) % 40] * zn[x];
                    den += zn[x] * zn[x];
                }
                acc += num / den;
            }
            naive[slot] = acc / 40.0;
        }
        let c1 = spatial_correlation(&traj, 1);
        let c5 = spatial_correlation(&traj, 5);
        assert!((c1 - naive[0]).abs() < 1e-12 && (c5 - naive[1]).abs() < 1e-12);
        assert!(c5 < c1 && c1 < 1.0);
    }

    #[test]
    fn exact_power_laws() {
        let ms = [64.0, 128.0, 256.0, 512.0];
        let inv: Vec<_> = ms.iter().map(|&m| (m, 1.0 / m)).collect();
        let half: Vec<_> = ms.iter().map(|&m: &f64| (m, m.powf(-0.5))).collect();
        assert!((convergence_slope(&inv).unwrap() + 1.0).abs() < 1e-12);
        assert!((convergence_slope(&half).unwrap() + 0.5).abs() < 1e-12);
    }

    #[test]
    fn noisy_rates_within_confidence_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut covered = 0;
        for _ in 0..200 {
            let pts: Vec<_> = (6..=14)
                .map(|k| {
                    let m = 2f64.powi(k);
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    (m, 3.0 * m.powf(-0.75) * (0.1 * noise).exp())
                })
                .collect();
            let fit = convergence_fit(&pts).unwrap();
            // Two-sided 95% t quantile with 7 degrees of freedom.
            if (fit.slope + 0.75).abs() <= 2.365 * fit.std_error {
                covered += 1;
            }
        }
        assert!((180..=200).contains(&covered), "coverage {covered}/200");
    }

    #[test]
    fn invalid_rate_data() {
        assert!(convergence_slope(&[(1.0, 1.0), (2.0, 0.5)]).is_err());
        assert!(convergence_slope(&[(1.0, 1.0), (2.0, 0.0), (4.0, 0.1)]).is_err());
        assert!(convergence_slope(&[(1.0, 1.0), (2.0, -1.0), (4.0, 0.1)]).is_err());
    }

    proptest! {
        #[test]
        fn zero_shift_is_one(vals in proptest::collection::vec(-10.0f64..10.0, 24)) {
            let traj: Vec<_> = vals.chunks(6).map(DVector::from_column_slice).collect();
            prop_assert_eq!(spatial_correlation(&traj, 0), 1.0);
        }

        #[test]
        fn rmse_nonnegative_and_zero_iff_exact(vals in proptest::collection::vec(-5.0f64..5.0, 12), zero in any::<bool>()) {
            let pairs: Vec<_> = vals.chunks(3).map(|c| {
                let r = vec![0.5; 3];
                let m = if zero { r.clone() } else { c.to_vec() };
                (m, r)
            }).collect();
            let rec = record_from(&pairs);
            let v = rmse_time_average(&rec, RmseKind::MeanNorm);
            prop_assert!(v >= 0.0);
            let exact = pairs.iter().all(|(m, r)| m == r);
            prop_assert_eq!(v == 0.0, exact);
        }

        #[test]
        fn slope_is_scale_invariant(c in 1e-3f64..1e3, p in -2.0f64..0.0, seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<_> = (3..9).map(|k| {
                let m = 2f64.powi(k);
                (m, m.powf(p) * (1.0 + 0.3 * rng.random::<f64>()))
            }).collect();
            let scaled: Vec<_> = pts.iter().map(|&(m, e)| (m, c * e)).collect();
            let a = convergence_slope(&pts).unwrap();
            let b = convergence_slope(&scaled).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }
    }
}
