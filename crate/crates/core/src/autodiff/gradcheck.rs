//! Central finite-difference checks of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::{ParamSet, Tensor};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Pass threshold on the relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Check at most this many entries per parameter, evenly spaced.
    pub max_per_param: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_per_param: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// `name[index]` of the entry with the largest error.
    pub worst: String,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the tape gradient of the scalar built by `f` against central
/// differences for every trainable entry of `params`.
pub fn check_gradients<F>(params: &ParamSet, cfg: &GradCheckConfig, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamSet) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let grads = tape.backward(loss)?;

    let eval = |p: &ParamSet| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, p)?;
        t.item(l)
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let mut work = params.clone();
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let t = params.get(&name)?;
        if !t.requires_grad() {
            continue;
        }
        let n = t.numel();
        let analytic = grads.get(&name).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let indices: Vec<usize> = match cfg.max_per_param {
            Some(k) if k < n => (0..k).map(|j| j * n / k).collect(),
            _ => (0..n).collect(),
        };
        for i in indices {
            let orig = t.data()[i];
            work.get_mut(&name)?.data_mut()[i] = orig + cfg.h;
            let up = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig - cfg.h;
            let down = eval(&work)?;
            work.get_mut(&name)?.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * cfg.h);
            let err = relative_error(analytic[i], numeric, cfg.floor);
            report.checked += 1;
            if report.checked == 1 || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!("{name}[{i}]");
            }
        }
    }
    Ok(report)
}

/// Random linear functional `sum(v * r)` with `r` uniform in `[-1, 1]`,
/// used to reduce a tensor output to a scalar with a generic gradient.
pub fn project(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(v).to_vec();
    let n = tape.value(v).len();
    let r: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rv = tape.constant(&Tensor::new(shape, r)?);
    let prod = tape.mul(v, rv)?;
    Ok(tape.sum(prod))
}

/// Tensor of uniform values in `[lo, hi)`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}
