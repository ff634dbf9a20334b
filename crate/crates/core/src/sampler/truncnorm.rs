//! One-sided truncated normal draws.
//!
//! Near the mode plain rejection from the untruncated normal is used; in the
//! tail the exponential-proposal rejection sampler of Robert (1995).

use rand::Rng;

use crate::scalar::Real;

/// Standard normal truncated to `[a, ∞)`.
pub fn std_normal_above<T: Real, R: Rng + ?Sized>(a: T, rng: &mut R) -> T {
    if a < T::lit(0.45) {
        loop {
            let x = T::std_normal(rng);
            if x >= a {
                return x;
            }
        }
    }
    let rate = (a + (a * a + T::lit(4.0)).sqrt()) / T::lit(2.0);
    loop {
        let x = a - T::open01(rng).ln() / rate;
        let d = x - rate;
        if T::open01(rng).ln() <= -d * d / T::lit(2.0) {
            return x;
        }
    }
}

/// Normal(mean, var) truncated to `[lower, ∞)`.
pub fn normal_above<T: Real, R: Rng + ?Sized>(mean: T, var: T, lower: T, rng: &mut R) -> T {
    let sd = var.sqrt();
    let x = mean + sd * std_normal_above((lower - mean) / sd, rng);
    // rounding in mean + sd·z can land a hair below the bound
    x.max(lower)
}

/// Normal(mean, var) truncated to `(-∞, upper]`.
pub fn normal_below<T: Real, R: Rng + ?Sized>(mean: T, var: T, upper: T, rng: &mut R) -> T {
    -normal_above(-mean, var, -upper, rng)
}
