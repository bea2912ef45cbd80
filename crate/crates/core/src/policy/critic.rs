use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{init_linear, linear};
use crate::autodiff::{ParamSet, Tape, Var};
use crate::data::NormStats;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct CriticConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
}

impl CriticConfig {
    pub fn new(state_dim: usize, action_dim: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            hidden: 256,
        }
    }
}

/// `Q(s, a)` from three fully-connected layers, ReLU after the first two.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticNetwork {
    pub cfg: CriticConfig,
    pub params: ParamSet,
    pub norm: NormStats,
}

impl CriticNetwork {
    pub fn new(cfg: CriticConfig, norm: NormStats, seed: u64) -> Result<Self> {
        if cfg.state_dim == 0 || cfg.action_dim == 0 || cfg.hidden == 0 {
            return Err(Error::invalid("critic dimensions must be positive"));
        }
        if norm.state_mean.len() != cfg.state_dim {
            return Err(Error::shape("CriticNetwork::new", "normalization does not match state size"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_linear(&mut params, "l1", cfg.state_dim + cfg.action_dim, cfg.hidden, &mut rng);
        init_linear(&mut params, "l2", cfg.hidden, cfg.hidden, &mut rng);
        init_linear(&mut params, "l3", cfg.hidden, 1, &mut rng);
        Ok(Self { cfg, params, norm })
    }

    /// `[batch, 1]` values for raw states `[batch * state_dim]` and an action
    /// node `[batch, action_dim]`.
    pub fn forward_tape(&self, tape: &mut Tape, states: &[f64], actions: Var) -> Result<Var> {
        let ds = self.cfg.state_dim;
        let rows = tape.shape(actions).first().copied().unwrap_or(0);
        if states.len() != rows * ds || tape.shape(actions) != [rows, self.cfg.action_dim] {
            return Err(Error::shape(
                "critic_forward",
                format!("{} state values for actions {:?}", states.len(), tape.shape(actions)),
            ));
        }
        let s: Vec<f64> = states.chunks(ds).flat_map(|s| self.norm.normalize_state(s)).collect();
        let s = tape.input(&[rows, ds], s)?;
        let x = tape.concat_cols(s, actions)?;
        let x = linear(tape, &self.params, "l1", x)?;
        let x = tape.relu(x);
        let x = linear(tape, &self.params, "l2", x)?;
        let x = tape.relu(x);
        linear(tape, &self.params, "l3", x)
    }

    pub fn forward(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let a = tape.input(&[1, action.len()], action.to_vec())?;
        let q = self.forward_tape(&mut tape, state, a)?;
        tape.item(q)
    }
}
