//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point element type: `f32` for fast training, `f64` for
/// gradient checks, oracles and checkpoints.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Short name written into checkpoints and configs.
    const NAME: &'static str;

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every float type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("float converts to f64")
    }

    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64_lossy(v)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Numerically guarded logistic function. Inputs are clamped to ±30; NaN
/// passes through.
#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x.is_nan() {
        return x;
    }
    let lim = T::lit(30.0);
    let x = x.max(-lim).min(lim);
    T::one() / (T::one() + (-x).exp())
}

#[inline]
pub fn tanh<T: Scalar>(x: T) -> T {
    x.tanh()
}

/// Max-subtracted softmax over a slice.
pub fn softmax<T: Scalar>(v: &[T]) -> Result<Vec<T>, crate::Error> {
    if v.is_empty() {
        return Err(crate::Error::Shape("softmax of an empty vector".into()));
    }
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in v.iter_mut() {
        *x /= total;
    }
}
