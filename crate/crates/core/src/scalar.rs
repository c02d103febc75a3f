use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar the whole model is generic over: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + 'static
{
    /// Short dtype label, as used by `LFSAMBA_PRECISION`.
    const NAME: &'static str;

    /// Lossy conversion from an `f64` literal.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    #[inline]
    fn as_f32(self) -> f32 {
        self.to_f32().expect("scalar convertible to f32")
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";
}

/// Logistic function with overflow guards at |t| > 30.
#[inline]
pub fn sigmoid<S: Scalar>(t: S) -> S {
    let thirty = S::lit(30.0);
    if t > thirty {
        S::one()
    } else if t < -thirty {
        t.exp()
    } else {
        S::one() / (S::one() + (-t).exp())
    }
}

/// `ln(1 + e^t)`, returning `t` directly above 30.
#[inline]
pub fn softplus<S: Scalar>(t: S) -> S {
    if t > S::lit(30.0) {
        t
    } else {
        t.exp().ln_1p()
    }
}
