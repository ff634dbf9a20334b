//! Scalar abstraction shared by every numeric routine in the crate.
//!
//! All model math is written against [`Real`], implemented for `f32` and
//! `f64`. Random draws are routed through the trait so generic code never
//! needs `where StandardNormal: Distribution<T>` bounds.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Open01, StandardNormal};

pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + Sum + 'static
{
    /// Converts an `f64` literal; every literal used by the crate is representable.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("count representable in scalar type")
    }

    #[inline]
    fn from_len(n: usize) -> Self {
        Self::from_usize(n).expect("length representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Uniform on the open interval (0, 1).
    fn open01<R: Rng + ?Sized>(rng: &mut R) -> Self;

    /// Gamma(shape, scale = 1).
    fn std_gamma<R: Rng + ?Sized>(shape: Self, rng: &mut R) -> Self;

    fn ln_gamma(self) -> Self;
}

macro_rules! impl_real {
    ($t:ty) => {
        impl Real for $t {
            #[inline]
            fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
                StandardNormal.sample(rng)
            }

            #[inline]
            fn open01<R: Rng + ?Sized>(rng: &mut R) -> Self {
                Open01.sample(rng)
            }

            #[inline]
            fn std_gamma<R: Rng + ?Sized>(shape: Self, rng: &mut R) -> Self {
                Gamma::new(shape, 1.0)
                    .expect("gamma shape must be positive and finite")
                    .sample(rng)
            }

            #[inline]
            fn ln_gamma(self) -> Self {
                statrs::function::gamma::ln_gamma(self as f64) as $t
            }
        }
    };
}

impl_real!(f32);
impl_real!(f64);

/// `ln(y!)` for a count.
#[inline]
pub fn ln_factorial<T: Real>(y: u64) -> T {
    if y < 2 {
        T::zero()
    } else {
        T::from_count(y + 1).ln_gamma()
    }
}

/// Log density of `Normal(mean, var)` at `x`.
#[inline]
pub fn normal_ln_pdf<T: Real>(x: T, mean: T, var: T) -> T {
    let d = x - mean;
    -T::lit(0.5) * (T::lit(std::f64::consts::TAU) * var).ln() - d * d / (T::lit(2.0) * var)
}

/// Log of a sum of exponentials, stable for large magnitudes.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

/// Draws an index from unnormalized log weights.
pub fn sample_log_weights<T: Real, R: Rng + ?Sized>(log_w: &[T], rng: &mut R) -> usize {
    let lse = log_sum_exp(log_w);
    let u = T::open01(rng);
    let mut acc = T::zero();
    for (t, &lw) in log_w.iter().enumerate() {
        acc = acc + (lw - lse).exp();
        if u < acc {
            return t;
        }
    }
    // rounding left `acc` marginally below one
    log_w
        .iter()
        .rposition(|w| w.is_finite())
        .unwrap_or(log_w.len() - 1)
}
