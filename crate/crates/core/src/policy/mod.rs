//! Return-conditioned sequence actor and feed-forward critic.

mod actor;
mod critic;

pub use actor::{ActorCarry, ActorConfig, ActorNetwork, SequenceInput};
pub use critic::{CriticConfig, CriticNetwork};

use rand::Rng;

use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::error::Result;

/// `x W + b` with parameters `{name}.w` (`[in, out]`) and `{name}.b`.
pub(crate) fn linear(tape: &mut Tape, params: &ParamSet, name: &str, x: Var) -> Result<Var> {
    let w = tape.param(&format!("{name}.w"), params.get(&format!("{name}.w"))?);
    let b = tape.param(&format!("{name}.b"), params.get(&format!("{name}.b"))?);
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

/// Uniform `+-1/sqrt(fan_in)` initialization of a linear layer.
pub(crate) fn init_linear(params: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    let b = (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    params.insert(
        format!("{name}.w"),
        Tensor::new(vec![fan_in, fan_out], w).expect("shape matches data"),
    );
    params.insert(format!("{name}.b"), Tensor::vector(b));
}

/// `dst <- (1 - tau) dst + tau src` for every parameter of `dst`.
pub fn soft_update(dst: &mut ParamSet, src: &ParamSet, tau: f64) -> Result<()> {
    for (name, t) in dst.iter_mut() {
        let s = src.get(name)?;
        if s.shape() != t.shape() {
            return Err(crate::Error::shape("soft_update", format!("`{name}` shapes differ")));
        }
        if tau == 1.0 {
            t.data_mut().copy_from_slice(s.data());
        } else if tau != 0.0 {
            for (d, v) in t.data_mut().iter_mut().zip(s.data()) {
                *d = (1.0 - tau) * *d + tau * v;
            }
        }
    }
    Ok(())
}
