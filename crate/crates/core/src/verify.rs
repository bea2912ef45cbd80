//! Property checks runnable from the command line, reported as a table.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::gradcheck::{check_gradients, project, random_tensor, GradCheckConfig, GradCheckReport};
use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::data::{compute_returns_to_go, NormStats};
use crate::error::Result;
use crate::policy::{ActorConfig, ActorNetwork, SequenceInput};
use crate::ssm::{self, ContinuousSsm, Spectrum, SsmState};
use crate::stability::{measure_forward_error, verify_theorem_bound, ErrorMode, BOUND_SLACK};

/// Tolerance of the convolution and recurrent views in `f64`.
pub const VIEW_TOL: f64 = 1e-8;
/// Pass threshold of the finite-difference gradient checks.
pub const GRAD_TOL: f64 = 1e-4;

fn complex_normal(rng: &mut impl Rng) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Random stable diagonal system with conjugate-pair spectrum.
pub fn random_ssm(rng: &mut impl Rng) -> ContinuousSsm {
    let modes = rng.random_range(1..=16);
    let lambda = (0..modes)
        .map(|n| Complex64::new(-rng.random_range(0.01..1.0), PI * n as f64 + rng.random_range(-0.5..0.5)))
        .collect();
    let b = (0..modes).map(|_| complex_normal(rng)).collect();
    let c = (0..modes).map(|_| complex_normal(rng)).collect();
    ContinuousSsm {
        lambda,
        b,
        c,
        d: StandardNormal.sample(rng),
        log_delta: rng.random_range(ssm::DELTA_MIN.ln()..ssm::DELTA_MAX.ln()),
        spectrum: Spectrum::ConjugatePairs,
    }
}

/// Largest absolute difference between the convolution view and iterated
/// recurrent steps over `count` random systems and the given lengths.
pub fn view_equivalence(count: usize, lens: &[usize], seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..count {
        let cont = random_ssm(&mut rng);
        let disc = ssm::discretize_bilinear(&cont)?;
        for &len in lens {
            let u: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut rng)).collect();
            let kernel = ssm::compute_kernel(&disc, len)?;
            let conv = ssm::conv_forward(&kernel, &u, cont.d)?;
            let mut state = SsmState::zeros(disc.modes());
            for (t, &ut) in u.iter().enumerate() {
                let (next, y) = ssm::recurrent_step(&disc, &state, ut, cont.d)?;
                state = next;
                worst = worst.max((y - conv[t]).abs());
            }
        }
    }
    Ok(worst)
}

fn params(entries: Vec<(&str, Tensor)>) -> ParamSet {
    let mut p = ParamSet::new();
    for (n, t) in entries {
        p.insert(n, t);
    }
    p
}

/// Uniform in `+-[0.1, 1]`, away from kinks and poles.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let t = random_tensor(shape, 0.1, 1.0, rng);
    let sign = random_tensor(shape, -1.0, 1.0, rng);
    let d = t.data().iter().zip(sign.data()).map(|(a, s)| a * s.signum()).collect();
    Tensor::new(shape.to_vec(), d).expect("shape matches data")
}

type Binary = fn(&mut Tape, Var, Var) -> Result<Var>;

/// Finite-difference checks of every tape primitive at one seed.
pub fn primitive_gradient_checks(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let cfg = GradCheckConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    let p = params(vec![
        ("a", away_from_zero(&[3, 4], &mut rng)),
        ("b", away_from_zero(&[3, 4], &mut rng)),
    ]);
    let ops: [(&str, Binary); 11] = [
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("div", |t, a, b| t.div(a, b)),
        ("scale", |t, a, _| Ok(t.scale(a, -1.7))),
        ("add_scalar", |t, a, _| Ok(t.add_scalar(a, 0.3))),
        ("exp", |t, a, _| Ok(t.exp(a))),
        ("tanh", |t, a, _| Ok(t.tanh(a))),
        ("relu", |t, a, _| Ok(t.relu(a))),
        ("gelu", |t, a, _| Ok(t.gelu(a))),
        ("dropout", |t, a, b| t.dropout(a, 0.3, 11, true).and_then(|d| t.mul(d, b))),
    ];
    for (k, (name, op)) in ops.iter().enumerate() {
        let r = check_gradients(&p, &cfg, |t, ps| {
            let a = t.param("a", ps.get("a")?);
            let b = t.param("b", ps.get("b")?);
            let y = op(t, a, b)?;
            project(t, y, seed.wrapping_add(100 + k as u64))
        })?;
        out.push((name.to_string(), r));
    }

    let p = params(vec![
        ("x", random_tensor(&[5, 3], -1.0, 1.0, &mut rng)),
        ("w", random_tensor(&[3, 4], -1.0, 1.0, &mut rng)),
        ("r", random_tensor(&[4], -1.0, 1.0, &mut rng)),
        ("g", random_tensor(&[4], 0.5, 1.5, &mut rng)),
        ("c", random_tensor(&[5], -1.0, 1.0, &mut rng)),
        ("t", random_tensor(&[5, 4], -1.0, 1.0, &mut rng)),
    ]);
    let r = check_gradients(&p, &cfg, |t, ps| {
        let x = t.param("x", ps.get("x")?);
        let w = t.param("w", ps.get("w")?);
        let r = t.param("r", ps.get("r")?);
        let g = t.param("g", ps.get("g")?);
        let c = t.param("c", ps.get("c")?);
        let tg = t.param("t", ps.get("t")?);
        let y = t.matmul(x, w)?;
        let y = t.add_row(y, r)?;
        let y = t.mul_row(y, g)?;
        let y = t.layer_norm(y, g, r)?;
        let cc = t.repeat_cols(c, 4)?;
        let y = t.add(y, cc)?;
        let z = t.concat_cols(y, x)?;
        let z = t.slice_cols(z, 1, 6)?;
        let z = t.gather_rows(z, &[4, 0, 0, 2])?;
        let a = project(t, z, seed)?;
        let b = t.weighted_sq_error(y, tg, vec![0.5, 0.0, 1.0, 2.0, 0.25])?;
        let m = t.mse_loss(y, tg)?;
        let ab = t.add(a, b)?;
        let s = t.add(ab, m)?;
        Ok(t.mean(s))
    })?;
    out.push(("matmul/rows/layer_norm/gather/concat/slice/losses".into(), r));

    for (batch, len, klen) in [(3, 6, 6), (2, 5, 3)] {
        let p = params(vec![
            ("k", random_tensor(&[2, klen], -1.0, 1.0, &mut rng)),
            ("x", random_tensor(&[batch * len, 2], -1.0, 1.0, &mut rng)),
        ]);
        let r = check_gradients(&p, &cfg, |t, ps| {
            let k = t.param("k", ps.get("k")?);
            let x = t.param("x", ps.get("x")?);
            let y = t.fft_conv(k, x, batch, len)?;
            project(t, y, seed)
        })?;
        out.push((format!("fft_conv k={klen} l={len}"), r));
    }

    let (h, modes, len) = (2, 3, 9);
    let p = params(vec![
        ("lr", random_tensor(&[h, modes], 0.5, 0.95, &mut rng)),
        ("li", random_tensor(&[h, modes], -0.3, 0.3, &mut rng)),
        ("wr", random_tensor(&[h, modes], -1.0, 1.0, &mut rng)),
        ("wi", random_tensor(&[h, modes], -1.0, 1.0, &mut rng)),
    ]);
    let r = check_gradients(&p, &cfg, |t, ps| {
        let lr = t.param("lr", ps.get("lr")?);
        let li = t.param("li", ps.get("li")?);
        let wr = t.param("wr", ps.get("wr")?);
        let wi = t.param("wi", ps.get("wi")?);
        let pw = t.complex_geom_powers(lr, li, len)?;
        let k = t.realize_contract(wr, wi, pw, 2.0)?;
        project(t, k, seed)
    })?;
    out.push(("geom_powers/realize_contract".into(), r));

    let z: Vec<Complex64> = (0..2 * 3 * 2).map(|_| complex_normal(&mut rng)).collect();
    let p = params(vec![
        ("cr", random_tensor(&[3, 2], -1.0, 1.0, &mut rng)),
        ("ci", random_tensor(&[3, 2], -1.0, 1.0, &mut rng)),
    ]);
    let r = check_gradients(&p, &cfg, |t, ps| {
        let cr = t.param("cr", ps.get("cr")?);
        let ci = t.param("ci", ps.get("ci")?);
        let y = t.carry_readout(cr, ci, z.clone(), 2.0)?;
        project(t, y, seed)
    })?;
    out.push(("carry_readout".into(), r));
    Ok(out)
}

/// Finite-difference check of the whole actor in the convolution view.
pub fn actor_gradient_check(seed: u64) -> Result<GradCheckReport> {
    let cfg = ActorConfig {
        hidden: 6,
        state_size: 4,
        blocks: 2,
        dropout: 0.0,
        ..ActorConfig::new(3, 2)
    };
    let net = ActorNetwork::new(cfg, NormStats::identity(3), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED);
    let (batch, len) = (2, 3);
    let rows = batch * len;
    let s: Vec<f64> = (0..rows * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a: Vec<f64> = (0..rows * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
    let r: Vec<f64> = (0..rows).map(|_| rng.random_range(-1.0..1.0)).collect();
    check_gradients(&net.params, &GradCheckConfig::default(), |tape, p| {
        let n = ActorNetwork {
            params: p.clone(),
            ..net.clone()
        };
        let y = n.forward_sequence_tape(
            tape,
            SequenceInput {
                batch,
                len,
                states: &s,
                prev_actions: &a,
                rtg: &r,
            },
            false,
            0,
        )?;
        project(tape, y, seed)
    })
}

/// Number of sampled `(Re(lambda) < 0, delta > 0)` pairs whose bilinear image
/// is not strictly inside the unit disk.
///
/// `-Re(lambda)` is log-uniform in `[1e-4, 10]`, `Im(lambda)` uniform in
/// `[-1000, 1000]` and `delta` log-uniform in `[1e-4, 1]`.
pub fn discretization_exceptions(samples: usize, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..samples {
        let re = -(10f64).powf(rng.random_range(-4.0..1.0));
        let im = rng.random_range(-1000.0..1000.0);
        let log_delta = rng.random_range(-4.0..0.0) * std::f64::consts::LN_10;
        let cont = ContinuousSsm {
            lambda: vec![Complex64::new(re, im)],
            b: vec![Complex64::new(1.0, 0.0)],
            c: vec![Complex64::new(1.0, 0.0)],
            d: 0.0,
            log_delta,
            spectrum: Spectrum::ConjugatePairs,
        };
        let disc = ssm::discretize_bilinear(&cont)?;
        if disc.lambda_bar[0].norm() >= 1.0 {
            bad += 1;
        }
    }
    Ok(bad)
}

/// Dyadic rewards whose partial sums are exact in `f64`, so the suffix sums
/// can be compared for equality against integer arithmetic.
pub fn rtg_matches_integer_oracle(len: usize, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ticks: Vec<i64> = (0..len).map(|_| rng.random_range(-(1 << 20)..(1 << 20))).collect();
    let scale = 2f64.powi(-10);
    let rewards: Vec<f64> = ticks.iter().map(|&k| k as f64 * scale).collect();
    let got = compute_returns_to_go(&rewards);
    let mut suffix = 0i64;
    let mut want = vec![0.0; len];
    for i in (0..len).rev() {
        suffix += ticks[i];
        want[i] = suffix as f64 * scale;
    }
    got == want
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckOutcome {
    let t0 = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name: name.to_string(),
        passed,
        detail,
        seconds: t0.elapsed().as_secs_f64(),
    }
}

/// Runs the property suite; `quick` shrinks counts and lengths.
pub fn run_suite(quick: bool, seed: u64) -> Vec<CheckOutcome> {
    let (ssms, lens): (usize, &[usize]) = if quick { (20, &[16, 256]) } else { (100, &[16, 256, 4096]) };
    let grad_seeds = if quick { 3 } else { 20 };
    let (err_len, err_seeds) = if quick { (10_000, 10) } else { (100_000, 100) };
    let mut out = Vec::new();

    out.push(timed("view equivalence", || {
        let worst = view_equivalence(ssms, lens, seed)?;
        Ok((worst <= VIEW_TOL, format!("max abs {worst:.3e} over {ssms} systems, L {lens:?}")))
    }));

    out.push(timed("primitive gradients", || {
        let mut worst = (0.0f64, String::new());
        for s in 0..grad_seeds {
            for (name, r) in primitive_gradient_checks(seed.wrapping_add(s))? {
                if r.max_rel_err >= worst.0 {
                    worst = (r.max_rel_err, format!("{name} {}", r.worst));
                }
            }
        }
        Ok((worst.0 <= GRAD_TOL, format!("max rel {:.3e} ({}), {grad_seeds} seeds", worst.0, worst.1)))
    }));

    out.push(timed("actor gradients", || {
        let mut worst = 0.0f64;
        for s in 0..grad_seeds {
            worst = worst.max(actor_gradient_check(seed.wrapping_add(s))?.max_rel_err);
        }
        Ok((worst <= GRAD_TOL, format!("max rel {worst:.3e}, {grad_seeds} seeds")))
    }));

    out.push(timed("forward error bound", || {
        let mut max_ratio = 0.0f64;
        let mut ok = true;
        for lambda in [0.5, 0.8, 1.0] {
            let tr = measure_forward_error(lambda, err_len, ErrorMode::NaiveF32, seed, err_seeds)?;
            let rep = verify_theorem_bound(&tr, BOUND_SLACK)?;
            ok &= rep.passed;
            max_ratio = max_ratio.max(rep.max_ratio);
        }
        let naive = measure_forward_error(1.0, err_len, ErrorMode::NaiveF32, seed, err_seeds)?;
        let comp = measure_forward_error(1.0, err_len, ErrorMode::CompensatedF32, seed, err_seeds)?;
        let gain = naive.final_error() / comp.final_error();
        Ok((
            ok && gain >= 100.0,
            format!("max ratio {max_ratio:.3}, compensated gain {gain:.3e}, L {err_len}, {err_seeds} seeds"),
        ))
    }));

    out.push(timed("discretization stability", || {
        let bad = discretization_exceptions(10_000, seed)?;
        Ok((bad == 0, format!("{bad} of 10000 outside the unit disk")))
    }));

    out.push(timed("returns-to-go", || {
        let ok = (0..10).all(|s| rtg_matches_integer_oracle(1000, seed.wrapping_add(s)));
        Ok((ok, "suffix sums equal the integer oracle, L 1000".into()))
    }));
    out
}

pub fn format_table(rows: &[CheckOutcome]) -> String {
    let w = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
    let mut s = format!("{:<w$}  {:<6}  {:>8}  detail\n", "check", "result", "seconds");
    for r in rows {
        let verdict = if r.passed { "PASS" } else { "FAIL" };
        writeln!(s, "{:<w$}  {:<6}  {:>8.2}  {}", r.name, verdict, r.seconds, r.detail).expect("writing to a String");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn views_agree_on_a_few_systems() {
        assert!(view_equivalence(5, &[16, 300], 2).unwrap() <= VIEW_TOL);
    }

    #[test]
    fn primitives_and_actor_pass_one_seed() {
        for (name, r) in primitive_gradient_checks(4).unwrap() {
            assert!(r.max_rel_err <= GRAD_TOL, "{name}: {r:?}");
        }
        assert!(actor_gradient_check(4).unwrap().max_rel_err <= GRAD_TOL);
    }

    #[test]
    fn discretization_and_rtg_checks() {
        assert_eq!(discretization_exceptions(1000, 1).unwrap(), 0);
        assert!(rtg_matches_integer_oracle(1000, 3));
    }

    #[test]
    fn table_lists_every_row() {
        let rows = vec![
            CheckOutcome {
                name: "a".into(),
                passed: true,
                detail: "ok".into(),
                seconds: 0.5,
            },
            CheckOutcome {
                name: "longer name".into(),
                passed: false,
                detail: "bad".into(),
                seconds: 1.0,
            },
        ];
        let t = format_table(&rows);
        assert_eq!(t.lines().count(), 3);
        assert!(t.contains("PASS") && t.contains("FAIL"));
    }
}
