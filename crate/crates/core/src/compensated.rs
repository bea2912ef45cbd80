//! Error-free transformations and compensated accumulation.
//!
//! `two_sum` and `two_prod` return the rounded result together with the exact
//! rounding error, so `a + b == s + e` and `a * b == p + e` hold in exact
//! arithmetic. Everything here is generic over `f32`/`f64`.

use num_traits::Float;

/// Knuth's branch-free 2Sum.
#[inline]
pub fn two_sum<F: Float>(a: F, b: F) -> (F, F) {
    let s = a + b;
    let bb = s - a;
    let e = (a - (s - bb)) + (b - bb);
    (s, e)
}

/// Dekker's fast 2Sum; requires `|a| >= |b|` (or `a == 0`).
#[inline]
pub fn fast_two_sum<F: Float>(a: F, b: F) -> (F, F) {
    let s = a + b;
    let e = b - (s - a);
    (s, e)
}

/// Exact product error through a fused multiply-add.
#[inline]
pub fn two_prod<F: Float>(a: F, b: F) -> (F, F) {
    let p = a * b;
    let e = a.mul_add(b, -p);
    (p, e)
}

/// Running sum with a Kahan-style correction term.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Compensated<F> {
    pub sum: F,
    pub comp: F,
}

impl<F: Float> Default for Compensated<F> {
    fn default() -> Self {
        Self {
            sum: F::zero(),
            comp: F::zero(),
        }
    }
}

impl<F: Float> Compensated<F> {
    pub fn new(sum: F) -> Self {
        Self {
            sum,
            comp: F::zero(),
        }
    }

    pub fn add(&mut self, x: F) {
        let (s, e) = two_sum(self.sum, x + self.comp);
        self.sum = s;
        self.comp = e;
    }

    /// `self <- scale * self + x`, tracking the product and both sum rounding
    /// errors, so the pair keeps roughly twice the working precision.
    pub fn scale_add(&mut self, scale: F, x: F) {
        let (p, pe) = two_prod(scale, self.sum);
        let (a, ae) = two_sum(x, scale * self.comp + pe);
        let (s, e) = two_sum(p, a);
        self.sum = s;
        self.comp = e + ae;
    }

    /// The unevaluated pair `sum + comp` widened to `f64`.
    pub fn wide(&self) -> f64 {
        self.sum.to_f64().unwrap_or(f64::NAN) + self.comp.to_f64().unwrap_or(f64::NAN)
    }

    pub fn value(&self) -> F {
        self.sum + self.comp
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_sum_recovers_lost_bits() {
        let (s, e) = two_sum(1.0f64, 1e-20);
        assert_eq!(s, 1.0);
        assert_eq!(e, 1e-20);
        let (s, e) = fast_two_sum(1e16f64, 1.0);
        assert_eq!(s + e, 1e16 + 1.0);
    }

    #[test]
    fn two_prod_is_exact() {
        let a = 1.0f32 + f32::EPSILON;
        let (p, e) = two_prod(a, a);
        // (1 + eps)^2 = 1 + 2 eps + eps^2, the eps^2 part is lost in p.
        assert_eq!(p, 1.0 + 2.0 * f32::EPSILON);
        assert_eq!(e, f32::EPSILON * f32::EPSILON);
    }

    #[test]
    fn kahan_sum_of_ones_in_f32_is_exact_past_2_pow_24() {
        let n = (1u32 << 24) + 1000;
        let mut naive = 0.0f32;
        let mut acc = Compensated::<f32>::default();
        for _ in 0..n {
            naive += 1.0;
            acc.add(1.0);
        }
        assert_eq!(naive, 16_777_216.0);
        assert_eq!(acc.value() as f64, n as f64);
    }

    #[test]
    fn scale_add_matches_plain_recurrence_in_exact_cases() {
        let mut acc = Compensated::<f64>::default();
        for u in [1.0, 2.0, -0.5] {
            acc.scale_add(0.5, u);
        }
        // ((1 * .5) + 2) * .5 - .5 = 0.75
        assert_eq!(acc.value(), 0.75);
    }
}
