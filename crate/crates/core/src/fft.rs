//! Thin helpers over `rustfft` for non-circular real convolution.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Transform size for a linear convolution of a length-`signal` input with a
/// length-`kernel` filter: the next power of two >= `signal + kernel - 1`.
pub fn conv_size(signal: usize, kernel: usize) -> usize {
    (signal + kernel).saturating_sub(1).max(1).next_power_of_two()
}

pub(crate) fn forward_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_forward(n))
}

pub(crate) fn inverse_plan(n: usize) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| p.borrow_mut().plan_fft_inverse(n))
}

/// Zero-padded forward transform of a real sequence.
pub(crate) fn real_spectrum(x: &[f64], n: usize) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (b, &v) in buf.iter_mut().zip(x) {
        b.re = v;
    }
    forward_plan(n).process(&mut buf);
    buf
}

/// Forward transform of two real sequences packed as `a + i b`.
pub(crate) fn packed_spectrum(a: &[f64], b: Option<&[f64]>, n: usize) -> Vec<Complex64> {
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for (z, &v) in buf.iter_mut().zip(a) {
        z.re = v;
    }
    if let Some(b) = b {
        for (z, &v) in buf.iter_mut().zip(b) {
            z.im = v;
        }
    }
    forward_plan(n).process(&mut buf);
    buf
}

/// Splits the packed spectrum `Z = FFT(a + i b)` into `(A_k, B_k)` at bin `k`.
#[inline]
pub(crate) fn unpack_bin(z: &[Complex64], k: usize) -> (Complex64, Complex64) {
    let n = z.len();
    let zk = z[k];
    let zr = z[(n - k) % n].conj();
    let a = (zk + zr) * 0.5;
    let b = (zk - zr) * Complex64::new(0.0, -0.5);
    (a, b)
}

/// `y[t] = sum_{i <= t} k[i] u[t - i]` for `t < u.len()`.
pub fn causal_conv(kernel: &[f64], u: &[f64]) -> Vec<f64> {
    let len = u.len();
    if len == 0 || kernel.is_empty() {
        return vec![0.0; len];
    }
    let n = conv_size(len, kernel.len());
    let kf = real_spectrum(kernel, n);
    let mut buf = real_spectrum(u, n);
    for (b, k) in buf.iter_mut().zip(&kf) {
        *b *= k;
    }
    inverse_plan(n).process(&mut buf);
    let scale = 1.0 / n as f64;
    buf[..len].iter().map(|z| z.re * scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_size_is_power_of_two_covering_linear_support() {
        assert_eq!(conv_size(1, 1), 1);
        assert_eq!(conv_size(16, 16), 32);
        assert_eq!(conv_size(17, 16), 32);
        assert_eq!(conv_size(100, 10), 128);
    }

    #[test]
    fn unpack_recovers_individual_spectra() {
        let a = [1.0, -2.0, 0.5, 3.0];
        let b = [0.25, 4.0, -1.0, 2.0];
        let z = packed_spectrum(&a, Some(&b), 8);
        let fa = real_spectrum(&a, 8);
        let fb = real_spectrum(&b, 8);
        for k in 0..8 {
            let (ak, bk) = unpack_bin(&z, k);
            assert!((ak - fa[k]).norm() < 1e-12);
            assert!((bk - fb[k]).norm() < 1e-12);
        }
    }

    #[test]
    fn short_causal_conv() {
        let y = causal_conv(&[1.0, 0.5], &[2.0, 0.0, 4.0]);
        let want = [2.0, 1.0, 4.0];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
