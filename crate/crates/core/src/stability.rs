//! Forward error of the scalar recurrence `x_t = lambda x_{t-1} + u_t` in
//! working precision, measured against a double-double reference, and tables
//! of the actor's state decay, kernels and eigenvalues.

use std::fmt::{self, Write as _};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::compensated::{fast_two_sum, two_prod, two_sum, Compensated};
use crate::error::{Error, Result};
use crate::policy::ActorNetwork;

/// Longest sequence accepted by the error measurement.
pub const MAX_LEN: usize = 1_000_000;

/// Slack factor absorbing the second-order terms the bound drops.
pub const BOUND_SLACK: f64 = 2.0;

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DoubleDouble {
    pub hi: f64,
    pub lo: f64,
}

impl DoubleDouble {
    pub const ZERO: Self = Self { hi: 0.0, lo: 0.0 };

    pub fn from_f64(x: f64) -> Self {
        Self { hi: x, lo: 0.0 }
    }

    pub fn add(self, o: Self) -> Self {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = fast_two_sum(s, e + t);
        let (hi, lo) = fast_two_sum(s, e + f);
        Self { hi, lo }
    }

    pub fn mul_f64(self, b: f64) -> Self {
        let (p, e) = two_prod(self.hi, b);
        let (hi, lo) = fast_two_sum(p, e + self.lo * b);
        Self { hi, lo }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    /// `|x - self|` rounded to `f64`.
    pub fn abs_diff(self, x: f64) -> f64 {
        ((x - self.hi) - self.lo).abs()
    }

    pub fn is_finite(self) -> bool {
        self.hi.is_finite() && self.lo.is_finite()
    }
}

/// Reference states of the recurrence for every step.
pub fn oracle_recurrence(lambda: f64, u: &[f64]) -> Vec<DoubleDouble> {
    let mut x = DoubleDouble::ZERO;
    u.iter()
        .map(|&ut| {
            x = x.mul_f64(lambda).add(DoubleDouble::from_f64(ut));
            x
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorMode {
    NaiveF32,
    NaiveF64,
    CompensatedF32,
}

impl ErrorMode {
    pub fn name(self) -> &'static str {
        match self {
            Self::NaiveF32 => "naive-f32",
            Self::NaiveF64 => "naive-f64",
            Self::CompensatedF32 => "compensated-f32",
        }
    }

    /// Unit roundoff of the working precision.
    pub fn unit_roundoff(self) -> f64 {
        match self {
            Self::NaiveF32 | Self::CompensatedF32 => (f32::EPSILON / 2.0) as f64,
            Self::NaiveF64 => f64::EPSILON / 2.0,
        }
    }

    pub fn is_naive(self) -> bool {
        !matches!(self, Self::CompensatedF32)
    }

    /// Rounds an input to the working precision.
    pub fn round(self, x: f64) -> f64 {
        match self {
            Self::NaiveF32 | Self::CompensatedF32 => x as f32 as f64,
            Self::NaiveF64 => x,
        }
    }

    /// States of the recurrence computed in this mode, widened to `f64`.
    pub fn run(self, lambda: f64, u: &[f64]) -> Vec<f64> {
        match self {
            Self::NaiveF32 => {
                let l = lambda as f32;
                let mut x = 0.0f32;
                u.iter()
                    .map(|&ut| {
                        x = l * x + ut as f32;
                        x as f64
                    })
                    .collect()
            }
            Self::NaiveF64 => {
                let mut x = 0.0f64;
                u.iter()
                    .map(|&ut| {
                        x = lambda * x + ut;
                        x
                    })
                    .collect()
            }
            Self::CompensatedF32 => {
                let l = lambda as f32;
                let mut acc = Compensated::<f32>::default();
                u.iter()
                    .map(|&ut| {
                        acc.scale_add(l, ut as f32);
                        acc.wide()
                    })
                    .collect()
            }
        }
    }
}

impl fmt::Display for ErrorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ErrorMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive-f32" => Ok(Self::NaiveF32),
            "naive-f64" => Ok(Self::NaiveF64),
            "compensated-f32" => Ok(Self::CompensatedF32),
            other => Err(Error::invalid(format!(
                "unknown mode `{other}` (expected naive-f32, naive-f64 or compensated-f32)"
            ))),
        }
    }
}

/// Per-step forward error averaged over seeds, with the first-order bound
/// `t * eps * sum_i |lambda^(t-i) u_i|`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTrace {
    pub mode: ErrorMode,
    pub lambda: f64,
    pub seed_count: usize,
    pub measured: Vec<f64>,
    pub bound: Vec<f64>,
    /// Largest per-seed `measured / bound` at each step.
    pub peak_ratio: Vec<f64>,
    /// Mean over seeds of the reference magnitude `|sum*_t|`.
    pub reference: Vec<f64>,
    /// First step at which some seed's working-precision state overflowed.
    pub overflow_at: Option<usize>,
}

fn ratio(measured: f64, bound: f64) -> f64 {
    if measured == 0.0 {
        0.0
    } else if bound == 0.0 {
        f64::INFINITY
    } else {
        measured / bound
    }
}

impl ErrorTrace {
    /// Trace from given columns, for single runs and synthetic checks.
    pub fn from_columns(mode: ErrorMode, lambda: f64, measured: Vec<f64>, bound: Vec<f64>) -> Result<Self> {
        if measured.len() != bound.len() {
            return Err(Error::shape(
                "ErrorTrace::from_columns",
                format!("{} measured vs {} bound values", measured.len(), bound.len()),
            ));
        }
        let peak_ratio = measured.iter().zip(&bound).map(|(&m, &b)| ratio(m, b)).collect();
        let reference = vec![f64::NAN; measured.len()];
        Ok(Self {
            mode,
            lambda,
            seed_count: 1,
            measured,
            bound,
            peak_ratio,
            reference,
            overflow_at: None,
        })
    }

    pub fn len(&self) -> usize {
        self.measured.len()
    }

    pub fn is_empty(&self) -> bool {
        self.measured.is_empty()
    }

    pub fn final_error(&self) -> f64 {
        self.measured.last().copied().unwrap_or(0.0)
    }

    /// Final error relative to the final reference magnitude.
    pub fn final_relative_error(&self) -> f64 {
        match (self.measured.last(), self.reference.last()) {
            (Some(&m), Some(&r)) if r > 0.0 => m / r,
            (Some(&m), _) => m,
            _ => 0.0,
        }
    }

    /// Largest reference magnitude over the run.
    pub fn max_reference(&self) -> f64 {
        self.reference.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,measured,bound,mode,lambda,seed_count\n");
        for (t, (m, b)) in self.measured.iter().zip(&self.bound).enumerate() {
            writeln!(s, "{t},{m:e},{b:e},{},{},{}", self.mode, self.lambda, self.seed_count).expect("writing to a String");
        }
        s
    }
}

struct SeedRun {
    err: Vec<f64>,
    bound: Vec<f64>,
    reference: Vec<f64>,
    overflow_at: Option<usize>,
}

fn run_one(lambda: f64, u: &[f64], mode: ErrorMode) -> SeedRun {
    let lambda = mode.round(lambda);
    let u: Vec<f64> = u.iter().map(|&x| mode.round(x)).collect();
    let exact = oracle_recurrence(lambda, &u);
    let got = mode.run(lambda, &u);
    let eps = mode.unit_roundoff();
    let mut abs_sum = 0.0f64;
    let mut overflow_at = None;
    let mut err = Vec::with_capacity(u.len());
    let mut bound = Vec::with_capacity(u.len());
    let mut reference = Vec::with_capacity(u.len());
    for (t, ((&ut, x), g)) in u.iter().zip(&exact).zip(&got).enumerate() {
        abs_sum = lambda.abs() * abs_sum + ut.abs();
        bound.push(t as f64 * eps * abs_sum);
        reference.push(x.to_f64().abs());
        if !g.is_finite() && overflow_at.is_none() {
            overflow_at = Some(t);
        }
        err.push(if overflow_at.is_some() || !x.is_finite() {
            f64::NAN
        } else {
            x.abs_diff(*g)
        });
    }
    SeedRun {
        err,
        bound,
        reference,
        overflow_at,
    }
}

/// Trace of a single run on the given inputs.
pub fn forward_error_for_input(lambda: f64, u: &[f64], mode: ErrorMode) -> Result<ErrorTrace> {
    check_len(u.len())?;
    let r = run_one(lambda, u, mode);
    let mut trace = ErrorTrace::from_columns(mode, mode.round(lambda), r.err, r.bound)?;
    trace.reference = r.reference;
    trace.overflow_at = r.overflow_at;
    Ok(trace)
}

fn check_len(len: usize) -> Result<()> {
    if len == 0 || len > MAX_LEN {
        return Err(Error::invalid(format!("sequence length must lie in 1..={MAX_LEN}, got {len}")));
    }
    Ok(())
}

/// Standard normal inputs of run `k` of a measurement seeded with `seed`.
pub fn normal_inputs(seed: u64, k: usize, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x2545_F491_4F6C_DD1D).wrapping_add(k as u64));
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Forward error averaged over `seeds` runs with standard normal inputs.
pub fn measure_forward_error(lambda: f64, len: usize, mode: ErrorMode, seed: u64, seeds: usize) -> Result<ErrorTrace> {
    check_len(len)?;
    if seeds == 0 {
        return Err(Error::invalid("seeds must be >= 1"));
    }
    if !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be finite, got {lambda}")));
    }
    let mut measured = vec![0.0; len];
    let mut bound = vec![0.0; len];
    let mut reference = vec![0.0; len];
    let mut peak_ratio = vec![0.0f64; len];
    let mut overflow_at: Option<usize> = None;
    for k in 0..seeds {
        let r = run_one(lambda, &normal_inputs(seed, k, len), mode);
        for t in 0..len {
            measured[t] += r.err[t];
            bound[t] += r.bound[t];
            reference[t] += r.reference[t];
            let q = ratio(r.err[t], r.bound[t]);
            peak_ratio[t] = if q.is_nan() || peak_ratio[t].is_nan() {
                f64::NAN
            } else {
                peak_ratio[t].max(q)
            };
        }
        overflow_at = match (overflow_at, r.overflow_at) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (a, b) => a.or(b),
        };
    }
    let n = seeds as f64;
    for v in measured.iter_mut().chain(bound.iter_mut()).chain(reference.iter_mut()) {
        *v /= n;
    }
    Ok(ErrorTrace {
        mode,
        lambda: mode.round(lambda),
        seed_count: seeds,
        measured,
        bound,
        peak_ratio,
        reference,
        overflow_at,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    pub passed: bool,
    pub max_ratio: f64,
    pub first_violation: Option<usize>,
    pub steps: usize,
}

/// Checks `measured <= slack * bound` at every step, both for the averaged
/// columns and for every individual seed.
pub fn verify_theorem_bound(trace: &ErrorTrace, slack: f64) -> Result<BoundReport> {
    if !trace.mode.is_naive() {
        return Err(Error::invalid(format!("the bound applies to naive modes, trace is {}", trace.mode)));
    }
    let mut max_ratio = 0.0f64;
    let mut first_violation = None;
    for t in 0..trace.len() {
        let q = ratio(trace.measured[t], trace.bound[t]).max(trace.peak_ratio[t]);
        let q = if trace.measured[t].is_nan() || trace.peak_ratio[t].is_nan() {
            f64::NAN
        } else {
            q
        };
        if q.is_nan() || q > slack {
            first_violation.get_or_insert(t);
        }
        if !q.is_nan() {
            max_ratio = max_ratio.max(q);
        }
    }
    Ok(BoundReport {
        passed: first_violation.is_none(),
        max_ratio,
        first_violation,
        steps: trace.len(),
    })
}

/// `m^i` for `i < len` by repeated multiplication, so rows with `m <= 1`
/// never increase and `m == 1` gives exact ones.
pub fn decay_row(m: f64, len: usize) -> Vec<f64> {
    let mut p = 1.0f64;
    (0..len)
        .map(|_| {
            let v = p;
            p *= m;
            v
        })
        .collect()
}

fn channel_count(actor: &ActorNetwork, channels: Option<usize>) -> usize {
    channels.map_or(actor.cfg.hidden, |c| c.min(actor.cfg.hidden))
}

/// `block,channel,coordinate,i,abs_pow`: `|lambda_bar|^i` for every stored
/// coordinate.
pub fn state_decay_csv(actor: &ActorNetwork, len: usize, channels: Option<usize>) -> Result<String> {
    let systems = actor.discrete_ssms()?;
    let hc = channel_count(actor, channels);
    let mut s = String::from("block,channel,coordinate,i,abs_pow\n");
    for (b, block) in systems.iter().enumerate() {
        for (h, sys) in block.iter().take(hc).enumerate() {
            for (n, lam) in sys.lambda_bar.iter().enumerate() {
                for (i, p) in decay_row(lam.norm(), len).iter().enumerate() {
                    writeln!(s, "{b},{h},{n},{i},{p}").expect("writing to a String");
                }
            }
        }
    }
    Ok(s)
}

/// `block,channel,lag,k`: discretized convolution kernels.
pub fn kernel_csv(actor: &ActorNetwork, len: usize, channels: Option<usize>) -> Result<String> {
    if len == 0 {
        return Err(Error::invalid("kernel length must be >= 1"));
    }
    let kernels = actor.kernels(len)?;
    let hc = channel_count(actor, channels);
    let mut s = String::from("block,channel,lag,k\n");
    for (b, block) in kernels.iter().enumerate() {
        for (h, k) in block.iter().take(hc).enumerate() {
            for (i, v) in k.iter().enumerate() {
                writeln!(s, "{b},{h},{i},{v}").expect("writing to a String");
            }
        }
    }
    Ok(s)
}

/// `block,channel,coordinate,re,im,re_bar,im_bar,abs_bar`: continuous and
/// discrete eigenvalues.
pub fn eigen_csv(actor: &ActorNetwork, channels: Option<usize>) -> Result<String> {
    let cont = actor.continuous_eigenvalues()?;
    let disc = actor.discrete_ssms()?;
    let hc = channel_count(actor, channels);
    let mut s = String::from("block,channel,coordinate,re,im,re_bar,im_bar,abs_bar\n");
    for (b, (cb, db)) in cont.iter().zip(&disc).enumerate() {
        for (h, (ch, dh)) in cb.iter().zip(db).take(hc).enumerate() {
            for (n, (l, lb)) in ch.iter().zip(&dh.lambda_bar).enumerate() {
                writeln!(
                    s,
                    "{b},{h},{n},{},{},{},{},{}",
                    l.re,
                    l.im,
                    lb.re,
                    lb.im,
                    lb.norm()
                )
                .expect("writing to a String");
            }
        }
    }
    Ok(s)
}

/// Writes `state_decay.csv`, `kernel.csv` and `eigenvalues.csv` into `dir`.
pub fn dump_dependency_curves(
    actor: &ActorNetwork,
    len: usize,
    channels: Option<usize>,
    dir: &std::path::Path,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let files = [
        ("state_decay.csv", state_decay_csv(actor, len, channels)?),
        ("kernel.csv", kernel_csv(actor, len, channels)?),
        ("eigenvalues.csv", eigen_csv(actor, channels)?),
    ];
    files
        .into_iter()
        .map(|(name, body)| {
            let p = dir.join(name);
            std::fs::write(&p, body)?;
            Ok(p)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::NormStats;
    use crate::policy::ActorConfig;
    use num_bigint::BigInt;
    use num_rational::BigRational;
    use num_traits::{Signed, Zero};
    use rand::Rng;

    fn rational(x: f64) -> BigRational {
        BigRational::from_float(x).expect("finite")
    }

    #[test]
    fn oracle_agrees_with_exact_rationals() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let tol = BigRational::new(BigInt::from(1), BigInt::from(10).pow(30));
        let per_step = 2f64.powi(-100);
        for _ in 0..50 {
            let lambda: f64 = rng.random_range(-1.0..1.0);
            let u: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
            let dd = oracle_recurrence(lambda, &u);
            let mut exact = BigRational::zero();
            let mut abs = BigRational::zero();
            let l = rational(lambda);
            for (t, (&ut, d)) in u.iter().zip(&dd).enumerate() {
                exact = &exact * &l + rational(ut);
                abs = &abs * l.abs() + rational(ut).abs();
                let got = rational(d.hi) + rational(d.lo);
                let diff = (&got - &exact).abs();
                let allowed = rational((t + 1) as f64 * per_step) * &abs;
                assert!(diff <= allowed, "step {t}");
                assert!(diff <= &tol * &abs, "step {t}");
            }
        }
    }

    #[test]
    fn lambda_zero_has_no_accumulation() {
        let u = normal_inputs(3, 0, 500);
        for mode in [ErrorMode::NaiveF32, ErrorMode::NaiveF64, ErrorMode::CompensatedF32] {
            let tr = forward_error_for_input(0.0, &u, mode).unwrap();
            for (t, m) in tr.measured.iter().enumerate() {
                assert!(*m <= mode.unit_roundoff() * mode.round(u[t]).abs(), "{mode} step {t}");
            }
        }
    }

    #[test]
    fn constant_inputs_at_lambda_one() {
        // Integer partial sums below 2^24 are exact in f32.
        let ones = forward_error_for_input(1.0, &vec![1.0; 100_000], ErrorMode::NaiveF32).unwrap();
        assert!(ones.measured.iter().all(|&m| m == 0.0));
        let thirds = forward_error_for_input(1.0, &vec![1.0 / 3.0; 100_000], ErrorMode::NaiveF32).unwrap();
        let rep = verify_theorem_bound(&thirds, BOUND_SLACK).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!(thirds.measured[99_999] > 10.0 * thirds.measured[1_000]);
        assert!(thirds.measured[1_000] > 0.0);
    }

    #[test]
    fn compensated_is_far_more_accurate_at_lambda_one() {
        let naive = measure_forward_error(1.0, 20_000, ErrorMode::NaiveF32, 5, 10).unwrap();
        let comp = measure_forward_error(1.0, 20_000, ErrorMode::CompensatedF32, 5, 10).unwrap();
        assert!(comp.final_relative_error() <= 1e-6);
        assert!(naive.final_error() >= 100.0 * comp.final_error());
        let eps = ErrorMode::CompensatedF32.unit_roundoff();
        let cap = 4.0 * eps * comp.max_reference();
        assert!(comp.measured.iter().all(|&m| m <= cap));
    }

    #[test]
    fn naive_traces_respect_the_bound() {
        for lambda in [0.0, 0.5, 0.8, 0.99, 1.0] {
            for mode in [ErrorMode::NaiveF32, ErrorMode::NaiveF64] {
                let tr = measure_forward_error(lambda, 2_000, mode, 1, 5).unwrap();
                let rep = verify_theorem_bound(&tr, BOUND_SLACK).unwrap();
                assert!(rep.passed, "{lambda} {mode} {rep:?}");
            }
        }
    }

    #[test]
    fn inflated_trace_fails_at_the_right_index() {
        let bound: Vec<f64> = (0..10).map(|t| t as f64).collect();
        let mut measured: Vec<f64> = bound.iter().map(|b| 0.5 * b).collect();
        measured[6] = 2.5 * bound[6];
        measured[8] = 3.0 * bound[8];
        let tr = ErrorTrace::from_columns(ErrorMode::NaiveF32, 1.0, measured, bound).unwrap();
        let rep = verify_theorem_bound(&tr, 2.0).unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.first_violation, Some(6));
        assert_eq!(rep.max_ratio, 3.0);
        let comp = ErrorTrace::from_columns(ErrorMode::CompensatedF32, 1.0, vec![0.0], vec![0.0]).unwrap();
        assert!(verify_theorem_bound(&comp, 2.0).is_err());
    }

    #[test]
    fn divergent_lambda_reports_overflow() {
        let tr = measure_forward_error(1.005, 100_000, ErrorMode::NaiveF32, 2, 2).unwrap();
        let t = tr.overflow_at.expect("f32 overflows");
        assert!(t > 1000 && t < 100_000);
        assert!(tr.measured[t].is_nan());
    }

    #[test]
    fn measurement_is_deterministic_and_validated() {
        let a = measure_forward_error(0.8, 300, ErrorMode::NaiveF32, 4, 3).unwrap();
        let b = measure_forward_error(0.8, 300, ErrorMode::NaiveF32, 4, 3).unwrap();
        assert_eq!(a, b);
        assert!(measure_forward_error(0.8, 0, ErrorMode::NaiveF32, 4, 3).is_err());
        assert!(measure_forward_error(0.8, MAX_LEN + 1, ErrorMode::NaiveF32, 4, 3).is_err());
        assert!(measure_forward_error(0.8, 10, ErrorMode::NaiveF32, 4, 0).is_err());
        assert!("naive-f16".parse::<ErrorMode>().is_err());
        assert_eq!("compensated-f32".parse::<ErrorMode>().unwrap(), ErrorMode::CompensatedF32);
        let csv = a.to_csv();
        assert!(csv.starts_with("t,measured,bound,mode,lambda,seed_count\n"));
        assert_eq!(csv.lines().count(), 301);
        assert!(csv.lines().nth(1).unwrap().ends_with(",naive-f32,0.800000011920929,3"));
    }

    fn actor() -> ActorNetwork {
        let cfg = ActorConfig {
            hidden: 10,
            state_size: 64,
            blocks: 1,
            ..ActorConfig::new(2, 1)
        };
        ActorNetwork::new(cfg, NormStats::identity(2), 5).unwrap()
    }

    #[test]
    fn initial_eigenvalues_are_stable() {
        let a = actor();
        let csv = eigen_csv(&a, None).unwrap();
        assert_eq!(csv.lines().count(), 1 + 10 * 32);
        for line in csv.lines().skip(1) {
            let f: Vec<f64> = line.split(',').map(|v| v.parse().unwrap()).collect();
            assert!(f[3] < 0.0);
            assert!(f[7] < 1.0);
        }
    }

    #[test]
    fn decay_rows_are_non_increasing_and_unit_rows_constant() {
        let a = actor();
        let csv = state_decay_csv(&a, 50, Some(2)).unwrap();
        let rows: Vec<Vec<f64>> = csv
            .lines()
            .skip(1)
            .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 2 * 32 * 50);
        for w in rows.windows(2) {
            if w[0][..3] == w[1][..3] {
                assert!(w[1][4] <= w[0][4]);
            }
        }
        assert!(decay_row(1.0, 1000).iter().all(|&v| v == 1.0));
        let r = decay_row(0.999_999_9, 1000);
        assert!(r.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn kernel_dump_matches_actor_kernels() {
        let a = actor();
        let csv = kernel_csv(&a, 8, Some(1)).unwrap();
        let k = a.kernels(8).unwrap();
        let vals: Vec<f64> = csv.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
        assert_eq!(vals, k[0][0]);
        let dir = tempfile::tempdir().unwrap();
        let files = dump_dependency_curves(&a, 4, Some(1), dir.path()).unwrap();
        assert_eq!(files.len(), 3);
        assert!(files.iter().all(|f| f.exists()));
    }
}
