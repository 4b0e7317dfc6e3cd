//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point type the policy and objectives are generic over.
///
/// Implemented for `f32` and `f64`; the crate-root aliases pick `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Lossless-for-constants conversion from `f64`.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
}

/// Numerically stable `ln(sum(exp(xs)))`.
pub fn log_sum_exp<S: Scalar>(xs: &[S]) -> S {
    let max = xs.iter().copied().fold(S::neg_infinity(), S::max);
    if !max.is_finite() {
        return max;
    }
    let sum: S = xs.iter().map(|&x| (x - max).exp()).sum();
    max + sum.ln()
}

/// In-place log-softmax.
pub fn log_softmax_in_place<S: Scalar>(xs: &mut [S]) {
    let lse = log_sum_exp(xs);
    for x in xs.iter_mut() {
        *x = *x - lse;
    }
}

/// Shannon entropy (nats) of a probability vector; zero entries contribute nothing.
pub fn entropy<S: Scalar>(probs: &[S]) -> S {
    probs
        .iter()
        .filter(|&&p| p > S::zero())
        .map(|&p| -p * p.ln())
        .sum()
}
