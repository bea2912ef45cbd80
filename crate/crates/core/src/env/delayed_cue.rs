use super::{Env, EnvSpec, Policy, Step};
use crate::error::{Error, Result};

pub const DEFAULT_HORIZON: usize = 100;

/// Memory task: a `+-1` cue is visible only in the first observation and the
/// sign of the final action is rewarded `+1` if it matches, `-1` otherwise.
///
/// Observation `[cue signal, final-step flag]`. Actions before the final step
/// have no effect and are reported as applied `0`, so a policy cannot relay
/// the cue to itself through its fed-back actions. The cue is `+1` for even
/// seeds and `-1` for odd seeds.
#[derive(Debug, Clone)]
pub struct DelayedCue {
    horizon: usize,
    cue: f64,
    t: usize,
}

impl Default for DelayedCue {
    fn default() -> Self {
        Self::new(DEFAULT_HORIZON)
    }
}

impl DelayedCue {
    pub fn new(horizon: usize) -> Self {
        Self {
            horizon: horizon.max(1),
            cue: 1.0,
            t: 0,
        }
    }

    pub fn cue(&self) -> f64 {
        self.cue
    }

    fn obs(&self) -> Vec<f64> {
        let signal = if self.t == 0 { self.cue } else { 0.0 };
        let last = if self.t + 1 == self.horizon { 1.0 } else { 0.0 };
        vec![signal, last]
    }
}

impl Env for DelayedCue {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            name: "delayedcue",
            state_dim: 2,
            action_dim: 1,
            action_bound: 1.0,
            max_episode_len: self.horizon,
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        self.cue = if seed % 2 == 0 { 1.0 } else { -1.0 };
        self.t = 0;
        self.obs()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        if action.len() != 1 || !action[0].is_finite() {
            return Err(Error::invalid(format!("delayed cue expects one finite action, got {action:?}")));
        }
        if self.t >= self.horizon {
            return Err(Error::invalid("episode is over; call reset"));
        }
        let last = self.t + 1 == self.horizon;
        let a = action[0].clamp(-1.0, 1.0);
        let (reward, applied) = if last {
            (if a * self.cue > 0.0 { 1.0 } else { -1.0 }, a)
        } else {
            (0.0, 0.0)
        };
        self.t += 1;
        Ok(Step {
            obs: if last { vec![0.0, 0.0] } else { self.obs() },
            reward,
            applied_action: vec![applied],
            done: last,
            terminal: last,
        })
    }

    fn reference_policy(&self) -> Box<dyn Policy> {
        Box::new(CuePolicy { cue: 0.0 })
    }
}

/// Remembers the cue and plays it on the final step.
#[derive(Debug, Clone)]
pub struct CuePolicy {
    cue: f64,
}

impl Policy for CuePolicy {
    fn reset(&mut self, _seed: u64) {
        self.cue = 0.0;
    }

    fn act(&mut self, obs: &[f64], _prev_action: &[f64], _rtg: f64) -> Result<Vec<f64>> {
        if obs[0] != 0.0 {
            self.cue = obs[0].signum();
        }
        Ok(vec![if obs[1] == 1.0 { self.cue } else { 0.0 }])
    }
}
