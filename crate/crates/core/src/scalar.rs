//! Scalar abstraction shared by every numerical routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Floating point type the model can be evaluated in: `f32` or `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + LinalgScalar
    + Debug
    + Display
    + Default
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Linear predictors above this value are treated as overflowing `exp`.
    const EXP_CUTOFF: f64;

    /// Gradient tolerance used by the Newton mode solver.
    const NEWTON_TOL: f64;

    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Lossless-enough conversion from an `f64` literal.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `log(k!)`, evaluated in double precision.
    fn ln_factorial(k: u64) -> Self {
        Self::lit(statrs::function::gamma::ln_gamma(k as f64 + 1.0))
    }

    #[inline]
    fn ln_2pi() -> Self {
        Self::lit((2.0 * std::f64::consts::PI).ln())
    }
}

impl Real for f64 {
    const EXP_CUTOFF: f64 = 700.0;
    const NEWTON_TOL: f64 = 1e-8;

    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f64>()
    }
}

impl Real for f32 {
    const EXP_CUTOFF: f64 = 85.0;
    const NEWTON_TOL: f64 = 1e-4;

    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }

    fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.random::<f32>()
    }
}
