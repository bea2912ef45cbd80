//! Diagonal state-space layer for a single channel.
//!
//! A channel maps a real input stream `u` to a real output stream `y` through
//! a complex diagonal state. Parameters are stored for half of a
//! conjugate-symmetric spectrum and the output is realized as `2 Re(.)` of the
//! half-spectrum sum, so outputs are real by construction. A [`Spectrum::Real`]
//! channel stores a genuinely real spectrum and is realized as `Re(.)`.
//!
//! The same channel can be evaluated two ways:
//! - convolution view: build the kernel `K_i = C A^i B` once and convolve
//!   ([`compute_kernel`], [`conv_forward`]);
//! - recurrent view: `x_k = A x_{k-1} + B u_k`, `y_k = C x_k`
//!   ([`recurrent_step`], [`recurrent_forward`]).

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::compensated::{two_prod, two_sum};
use crate::error::{Error, Result};
use crate::fft;

/// Lower end of the log-uniform step-size initialization range.
pub const DELTA_MIN: f64 = 1e-3;
/// Upper end of the log-uniform step-size initialization range.
pub const DELTA_MAX: f64 = 1e-1;

/// How a stored spectrum turns into a real output.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Spectrum {
    /// Stored modes are one half of conjugate pairs; output is `2 Re(sum)`.
    #[default]
    ConjugatePairs,
    /// All modes are real and stored in full; output is `Re(sum)`.
    Real,
}

impl Spectrum {
    #[inline]
    pub fn realize(self, z: Complex64) -> f64 {
        match self {
            Spectrum::ConjugatePairs => 2.0 * z.re,
            Spectrum::Real => z.re,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuousSsm {
    /// Diagonal of `A`.
    pub lambda: Vec<Complex64>,
    pub b: Vec<Complex64>,
    pub c: Vec<Complex64>,
    /// Skip coefficient `D`.
    pub d: f64,
    pub log_delta: f64,
    pub spectrum: Spectrum,
}

impl ContinuousSsm {
    pub fn delta(&self) -> f64 {
        self.log_delta.exp()
    }

    /// Number of stored modes (half the state size for conjugate pairs).
    pub fn modes(&self) -> usize {
        self.lambda.len()
    }

    /// Full state size `N`.
    pub fn state_size(&self) -> usize {
        match self.spectrum {
            Spectrum::ConjugatePairs => 2 * self.lambda.len(),
            Spectrum::Real => self.lambda.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteSsm {
    pub lambda_bar: Vec<Complex64>,
    pub b_bar: Vec<Complex64>,
    pub c_bar: Vec<Complex64>,
    pub spectrum: Spectrum,
}

impl DiscreteSsm {
    pub fn new(
        lambda_bar: Vec<Complex64>,
        b_bar: Vec<Complex64>,
        c_bar: Vec<Complex64>,
        spectrum: Spectrum,
    ) -> Result<Self> {
        let n = lambda_bar.len();
        if b_bar.len() != n || c_bar.len() != n {
            return Err(Error::shape(
                "DiscreteSsm::new",
                format!(
                    "lambda_bar {n}, b_bar {}, c_bar {}",
                    b_bar.len(),
                    c_bar.len()
                ),
            ));
        }
        Ok(Self {
            lambda_bar,
            b_bar,
            c_bar,
            spectrum,
        })
    }

    pub fn modes(&self) -> usize {
        self.lambda_bar.len()
    }
}

/// Real convolution kernel of one channel.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmKernel {
    pub k: Vec<f64>,
}

impl SsmKernel {
    pub fn len(&self) -> usize {
        self.k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.k.is_empty()
    }
}

/// Recurrent state of one channel.
///
/// `comp` holds the pending rounding correction in compensated mode and stays
/// zero in naive mode; the represented state is `x + comp`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsmState {
    pub x: Vec<Complex64>,
    pub comp: Vec<Complex64>,
}

impl SsmState {
    pub fn zeros(modes: usize) -> Self {
        Self {
            x: vec![Complex64::new(0.0, 0.0); modes],
            comp: vec![Complex64::new(0.0, 0.0); modes],
        }
    }

    pub fn modes(&self) -> usize {
        self.x.len()
    }

    /// State value including any pending compensation.
    pub fn value(&self, n: usize) -> Complex64 {
        self.x[n] + self.comp[n]
    }

    pub fn is_finite(&self) -> bool {
        self.x
            .iter()
            .chain(&self.comp)
            .all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

/// Accumulation mode of the recurrent view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SumMode {
    #[default]
    Naive,
    /// Error-free transformations carry the rounding error of every
    /// multiply-add into a per-coordinate correction term.
    Compensated,
}

impl std::str::FromStr for SumMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(SumMode::Naive),
            "compensated" => Ok(SumMode::Compensated),
            other => Err(Error::invalid(format!("unknown sum mode `{other}`"))),
        }
    }
}

/// Bilinear (Tustin) discretization of a diagonal SSM.
pub fn discretize_bilinear(ssm: &ContinuousSsm) -> Result<DiscreteSsm> {
    let n = ssm.lambda.len();
    if ssm.b.len() != n || ssm.c.len() != n {
        return Err(Error::shape(
            "discretize_bilinear",
            format!("lambda {n}, b {}, c {}", ssm.b.len(), ssm.c.len()),
        ));
    }
    let delta = ssm.delta();
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::invalid(format!("step size must be positive, got {delta}")));
    }
    if ssm.spectrum == Spectrum::Real
        && ssm
            .lambda
            .iter()
            .chain(&ssm.b)
            .chain(&ssm.c)
            .any(|z| z.im != 0.0)
    {
        return Err(Error::invalid("real spectrum with complex parameters"));
    }

    let half = 0.5 * delta;
    let mut lambda_bar = Vec::with_capacity(n);
    let mut b_bar = Vec::with_capacity(n);
    for (lam, b) in ssm.lambda.iter().zip(&ssm.b) {
        let den = 1.0 - half * lam;
        if den.norm_sqr() == 0.0 {
            return Err(Error::invalid(format!(
                "bilinear pole: lambda = {lam} equals 2/delta"
            )));
        }
        lambda_bar.push((1.0 + half * lam) / den);
        b_bar.push(delta * b / den);
    }
    DiscreteSsm::new(lambda_bar, b_bar, ssm.c.clone(), ssm.spectrum)
}

/// Diagonal HiPPO-style initialization: `lambda_n = -1/2 + i pi n`.
///
/// `B` is all ones, `C` is standard complex normal (variance 1/2 per
/// component), `log_delta` is uniform in `[ln DELTA_MIN, ln DELTA_MAX]` and
/// `D = 0`.
pub fn init_s4d(n_state: usize, seed: u64) -> Result<ContinuousSsm> {
    if n_state == 0 || n_state % 2 != 0 {
        return Err(Error::invalid(format!(
            "state size must be a positive even number, got {n_state}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(init_s4d_with(n_state / 2, &mut rng))
}

pub(crate) fn init_s4d_with<R: Rng>(modes: usize, rng: &mut R) -> ContinuousSsm {
    let normal = Normal::new(0.0, std::f64::consts::FRAC_1_SQRT_2).expect("valid std");
    let lambda = (0..modes)
        .map(|n| Complex64::new(-0.5, PI * n as f64))
        .collect();
    let b = vec![Complex64::new(1.0, 0.0); modes];
    let c = (0..modes)
        .map(|_| Complex64::new(rng.sample(normal), rng.sample(normal)))
        .collect();
    let log_delta = rng.random_range(DELTA_MIN.ln()..DELTA_MAX.ln());
    ContinuousSsm {
        lambda,
        b,
        c,
        d: 0.0,
        log_delta,
        spectrum: Spectrum::ConjugatePairs,
    }
}

/// Kernel `K_i = realize(C A^i B)` for `i < length`, via per-mode geometric
/// powers of the diagonal.
pub fn compute_kernel(dssm: &DiscreteSsm, length: usize) -> Result<SsmKernel> {
    if length == 0 {
        return Err(Error::invalid("kernel length must be at least 1"));
    }
    let mut acc = vec![Complex64::new(0.0, 0.0); length];
    for n in 0..dssm.modes() {
        let w = dssm.c_bar[n] * dssm.b_bar[n];
        let lam = dssm.lambda_bar[n];
        let mut p = Complex64::new(1.0, 0.0);
        for a in acc.iter_mut() {
            *a += w * p;
            p *= lam;
        }
    }
    Ok(SsmKernel {
        k: acc.into_iter().map(|z| dssm.spectrum.realize(z)).collect(),
    })
}

/// Convolution view: `y[t] = sum_{i<=t} K_i u[t-i] + d u[t]`, computed with a
/// zero-padded FFT.
pub fn conv_forward(kernel: &SsmKernel, u: &[f64], d: f64) -> Result<Vec<f64>> {
    if kernel.len() != u.len() {
        return Err(Error::shape(
            "conv_forward",
            format!("kernel length {} vs input length {}", kernel.len(), u.len()),
        ));
    }
    let mut y = fft::causal_conv(&kernel.k, u);
    for (yt, &ut) in y.iter_mut().zip(u) {
        *yt += d * ut;
    }
    Ok(y)
}

/// Advances the state in place and returns `C x'` before realization.
pub(crate) fn advance(dssm: &DiscreteSsm, state: &mut SsmState, u: f64, mode: SumMode) -> Complex64 {
    let mut out = Complex64::new(0.0, 0.0);
    for n in 0..dssm.modes() {
        let lam = dssm.lambda_bar[n];
        let b = dssm.b_bar[n];
        match mode {
            SumMode::Naive => {
                let x = lam * state.x[n] + b * u;
                state.x[n] = x;
                out += dssm.c_bar[n] * x;
            }
            SumMode::Compensated => {
                let s = state.x[n];
                let c = state.comp[n];
                // Real part: lam.re*s.re - lam.im*s.im + b.re*u.
                let (p1, e1) = two_prod(lam.re, s.re);
                let (p2, e2) = two_prod(lam.im, s.im);
                let (q, e3) = two_prod(b.re, u);
                let (t, e4) = two_sum(p1, -p2);
                let (re, e5) = two_sum(t, q);
                let re_err = (e1 - e2) + (e3 + e4 + e5) + (lam.re * c.re - lam.im * c.im);
                // Imaginary part: lam.re*s.im + lam.im*s.re + b.im*u.
                let (p1, e1) = two_prod(lam.re, s.im);
                let (p2, e2) = two_prod(lam.im, s.re);
                let (q, e3) = two_prod(b.im, u);
                let (t, e4) = two_sum(p1, p2);
                let (im, e5) = two_sum(t, q);
                let im_err = (e1 + e2) + (e3 + e4 + e5) + (lam.re * c.im + lam.im * c.re);

                let (re, re_c) = two_sum(re, re_err);
                let (im, im_c) = two_sum(im, im_err);
                state.x[n] = Complex64::new(re, im);
                state.comp[n] = Complex64::new(re_c, im_c);
                out += dssm.c_bar[n] * state.value(n);
            }
        }
    }
    out
}

fn check_state(dssm: &DiscreteSsm, state: &SsmState) -> Result<()> {
    if state.modes() != dssm.modes() || state.comp.len() != dssm.modes() {
        return Err(Error::shape(
            "recurrent_step",
            format!("state has {} modes, ssm has {}", state.modes(), dssm.modes()),
        ));
    }
    Ok(())
}

/// One step of the recurrent view in naive mode.
pub fn recurrent_step(
    dssm: &DiscreteSsm,
    state: &SsmState,
    u: f64,
    d: f64,
) -> Result<(SsmState, f64)> {
    recurrent_step_with(dssm, state, u, d, SumMode::Naive)
}

/// One step of the recurrent view: `x' = A x + B u`, `y = realize(C x') + d u`.
pub fn recurrent_step_with(
    dssm: &DiscreteSsm,
    state: &SsmState,
    u: f64,
    d: f64,
    mode: SumMode,
) -> Result<(SsmState, f64)> {
    check_state(dssm, state)?;
    let mut next = state.clone();
    let z = advance(dssm, &mut next, u, mode);
    if !next.is_finite() {
        return Err(Error::Divergence("recurrent state is not finite".into()));
    }
    Ok((next, dssm.spectrum.realize(z) + d * u))
}

/// Runs the recurrence over a whole sequence from the zero state (`D = 0`).
pub fn recurrent_forward(dssm: &DiscreteSsm, u: &[f64], mode: SumMode) -> Result<Vec<f64>> {
    let mut state = SsmState::zeros(dssm.modes());
    let mut y = Vec::with_capacity(u.len());
    for (t, &ut) in u.iter().enumerate() {
        let z = advance(dssm, &mut state, ut, mode);
        if !state.is_finite() {
            return Err(Error::Divergence(format!("recurrent state not finite at step {t}")));
        }
        y.push(dssm.spectrum.realize(z));
    }
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn scalar_ssm(lambda: Complex64, delta: f64) -> ContinuousSsm {
        ContinuousSsm {
            lambda: vec![lambda],
            b: vec![c(1.0, 0.0)],
            c: vec![c(1.0, 0.0)],
            d: 0.0,
            log_delta: delta.ln(),
            spectrum: Spectrum::ConjugatePairs,
        }
    }

    #[test]
    fn bilinear_identity_at_zero() {
        let d = discretize_bilinear(&scalar_ssm(c(0.0, 0.0), 1.0)).unwrap();
        assert_eq!(d.lambda_bar[0], c(1.0, 0.0));
        assert_eq!(d.b_bar[0], c(1.0, 0.0));
    }

    #[test]
    fn bilinear_minus_one() {
        let d = discretize_bilinear(&scalar_ssm(c(-1.0, 0.0), 1.0)).unwrap();
        assert!((d.lambda_bar[0] - c(1.0 / 3.0, 0.0)).norm() < 1e-15);
        assert!((d.b_bar[0] - c(2.0 / 3.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn bilinear_oscillatory_mode() {
        // Frozen from a 40-digit evaluation of (1 + z)/(1 - z) and delta/(1 - z)
        // with z = delta/2 * (-0.5 + i pi), delta = exp(ln 0.01).
        let d = discretize_bilinear(&scalar_ssm(c(-0.5, PI), 0.01)).unwrap();
        let lb = d.lambda_bar[0];
        let bb = d.b_bar[0];
        assert!((lb.re - 0.994_522_791_502_016_0).abs() < 1e-15, "{lb}");
        assert!((lb.im - 0.031_251_761_342_644_10).abs() < 1e-15, "{lb}");
        assert!((bb.re - 0.009_972_613_957_510_084).abs() < 1e-17, "{bb}");
        assert!((bb.im - 0.000_156_258_806_713_220_57).abs() < 1e-17, "{bb}");
        assert!(lb.norm() < 1.0);
    }

    #[test]
    fn bilinear_rejects_bad_step_and_pole() {
        let mut s = scalar_ssm(c(-1.0, 0.0), 1.0);
        s.log_delta = f64::NEG_INFINITY;
        assert!(discretize_bilinear(&s).is_err());
        let pole = scalar_ssm(c(2.0, 0.0), 1.0);
        assert!(matches!(discretize_bilinear(&pole), Err(Error::Invalid(_))));
    }

    #[test]
    fn init_is_deterministic_and_follows_formula() {
        let a = init_s4d(8, 3).unwrap();
        let b = init_s4d(8, 3).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_s4d(8, 4).unwrap());
        assert_eq!(a.modes(), 4);
        for (n, lam) in a.lambda.iter().enumerate() {
            assert_eq!(*lam, c(-0.5, PI * n as f64));
        }
        assert!(a.b.iter().all(|&b| b == c(1.0, 0.0)));
        assert_eq!(a.d, 0.0);
        let delta = a.delta();
        assert!((DELTA_MIN..=DELTA_MAX).contains(&delta));
    }

    #[test]
    fn init_smallest_state() {
        let s = init_s4d(2, 11).unwrap();
        assert_eq!(s.lambda, vec![c(-0.5, 0.0)]);
    }

    #[test]
    fn init_rejects_odd_state() {
        assert!(init_s4d(3, 0).is_err());
        assert!(init_s4d(0, 0).is_err());
    }

    #[test]
    fn init_eigenvalues_inside_and_near_unit_circle() {
        let s = init_s4d(64, 0).unwrap();
        let d = discretize_bilinear(&s).unwrap();
        for lb in &d.lambda_bar {
            let r = lb.norm();
            assert!(r > 0.0 && r < 1.0);
            // |lambda_bar| >= (1 - delta/4)/(1 + delta/4) for Re(lambda) = -1/2.
            assert!(r > 0.95, "{r}");
        }
    }

    #[test]
    fn kernel_of_length_one_is_cb() {
        let s = init_s4d(4, 1).unwrap();
        let d = discretize_bilinear(&s).unwrap();
        let k = compute_kernel(&d, 1).unwrap();
        let cb: Complex64 = d.c_bar.iter().zip(&d.b_bar).map(|(c, b)| c * b).sum();
        assert_eq!(k.k, vec![2.0 * cb.re]);
        assert!(compute_kernel(&d, 0).is_err());
    }

    #[test]
    fn real_geometric_kernel() {
        let d = DiscreteSsm::new(vec![c(0.5, 0.0)], vec![c(1.0, 0.0)], vec![c(2.0, 0.0)], Spectrum::Real)
            .unwrap();
        assert_eq!(compute_kernel(&d, 4).unwrap().k, vec![2.0, 1.0, 0.5, 0.25]);
    }

    #[test]
    fn single_real_step() {
        let d = DiscreteSsm::new(
            vec![c(1.0 / 3.0, 0.0)],
            vec![c(2.0 / 3.0, 0.0)],
            vec![c(1.0, 0.0)],
            Spectrum::Real,
        )
        .unwrap();
        let (next, y) = recurrent_step(&d, &SsmState::zeros(1), 1.0, 0.0).unwrap();
        assert_eq!(next.x[0], c(2.0 / 3.0, 0.0));
        assert_eq!(y, 2.0 / 3.0);

        let pairs = DiscreteSsm {
            spectrum: Spectrum::ConjugatePairs,
            ..d
        };
        let (_, y) = recurrent_step(&pairs, &SsmState::zeros(1), 1.0, 0.0).unwrap();
        assert_eq!(y, 4.0 / 3.0);
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let d = discretize_bilinear(&init_s4d(6, 2).unwrap()).unwrap();
        let (next, y) = recurrent_step(&d, &SsmState::zeros(3), 0.0, 0.7).unwrap();
        assert_eq!(next, SsmState::zeros(3));
        assert_eq!(y, 0.0);
    }

    #[test]
    fn step_rejects_wrong_state_size_and_divergence() {
        let d = discretize_bilinear(&init_s4d(4, 2).unwrap()).unwrap();
        assert!(recurrent_step(&d, &SsmState::zeros(3), 1.0, 0.0).is_err());
        let big = DiscreteSsm::new(vec![c(1e300, 0.0)], vec![c(1.0, 0.0)], vec![c(1.0, 0.0)], Spectrum::Real)
            .unwrap();
        let (s, _) = recurrent_step(&big, &SsmState::zeros(1), 1e300, 0.0).unwrap();
        assert!(matches!(
            recurrent_step(&big, &s, 0.0, 0.0),
            Err(Error::Divergence(_))
        ));
    }

    #[test]
    fn conv_rejects_length_mismatch() {
        let k = SsmKernel { k: vec![1.0; 4] };
        assert!(conv_forward(&k, &[1.0; 5], 0.0).is_err());
    }

    #[test]
    fn impulse_response_is_kernel_in_both_modes() {
        let d = discretize_bilinear(&init_s4d(8, 5).unwrap()).unwrap();
        let k = compute_kernel(&d, 32).unwrap();
        let mut u = vec![0.0; 32];
        u[0] = 1.0;
        for mode in [SumMode::Naive, SumMode::Compensated] {
            let y = recurrent_forward(&d, &u, mode).unwrap();
            for (a, b) in y.iter().zip(&k.k) {
                assert!((a - b).abs() < 1e-13);
            }
        }
        let y = conv_forward(&k, &u, 0.0).unwrap();
        for (a, b) in y.iter().zip(&k.k) {
            assert!((a - b).abs() < 1e-13);
        }
    }

    #[test]
    fn compensated_running_sum_is_exact_to_an_ulp() {
        let d = DiscreteSsm::new(vec![c(1.0, 0.0)], vec![c(1.0, 0.0)], vec![c(1.0, 0.0)], Spectrum::Real)
            .unwrap();
        let n = 1_000_000;
        let u = vec![0.1; n];
        let comp = recurrent_forward(&d, &u, SumMode::Compensated).unwrap();
        let naive = recurrent_forward(&d, &u, SumMode::Naive).unwrap();
        // 0.1 is not exact; the true sum of n copies of fl(0.1) is n * fl(0.1).
        let exact = n as f64 * 0.1;
        let ulp = f64::EPSILON * exact;
        assert!((comp[n - 1] - exact).abs() <= ulp);
        assert!((naive[n - 1] - exact).abs() > 100.0 * ulp);
    }
}
