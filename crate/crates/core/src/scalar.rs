//! Scalar traits.
//!
//! Ensemble algebra, dynamics and the filters run over [`Real`] (`f32` or
//! `f64`). The transportation solver only needs an ordered field, so it is
//! generic over the weaker [`LpValue`], which is also implemented for exact
//! rationals.

use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_integer::Integer;
use num_rational::Ratio;
use num_traits::{FromPrimitive, Signed, ToPrimitive};

/// Ordered field used by the transportation simplex.
pub trait LpValue: Clone + PartialOrd + Signed + Debug {
    /// Pivoting threshold relative to `scale`. Exact types return zero.
    fn pivot_tolerance(scale: &Self) -> Self;

    /// Allowed mismatch between total row and column mass.
    fn balance_tolerance(total: &Self) -> Self;

    fn approx_f64(&self) -> f64;
}

impl LpValue for f64 {
    fn pivot_tolerance(scale: &Self) -> Self {
        1e-12 * scale.abs().max(1.0)
    }

    fn balance_tolerance(total: &Self) -> Self {
        1e-9 * total.abs().max(1.0)
    }

    fn approx_f64(&self) -> f64 {
        *self
    }
}

impl LpValue for f32 {
    fn pivot_tolerance(scale: &Self) -> Self {
        1e-5 * scale.abs().max(1.0)
    }

    fn balance_tolerance(total: &Self) -> Self {
        1e-4 * total.abs().max(1.0)
    }

    fn approx_f64(&self) -> f64 {
        *self as f64
    }
}

impl<I> LpValue for Ratio<I>
where
    I: Clone + Integer + Signed + ToPrimitive + Debug,
{
    fn pivot_tolerance(_scale: &Self) -> Self {
        Ratio::from_integer(I::zero())
    }

    fn balance_tolerance(_total: &Self) -> Self {
        Ratio::from_integer(I::zero())
    }

    fn approx_f64(&self) -> f64 {
        match (self.numer().to_f64(), self.denom().to_f64()) {
            (Some(n), Some(d)) => n / d,
            _ => f64::NAN,
        }
    }
}

/// Floating point scalar for the ensemble filters.
pub trait Real:
    RealField + LpValue + Copy + FromPrimitive + ToPrimitive + Default + Display + Send + Sync
{
    /// Default absolute tolerance for the implicit midpoint fixed-point solve.
    fn solver_tolerance() -> Self;

    /// Lossy conversion from `f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        nalgebra::convert(x)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f64 {
    fn solver_tolerance() -> Self {
        1e-12
    }
}

impl Real for f32 {
    fn solver_tolerance() -> Self {
        1e-5
    }
}
