use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Env, EnvSpec, Policy, Step};
use crate::error::{Error, Result};

pub const HORIZON: usize = 200;
const DAMPING: f64 = 0.95;
const GAIN: f64 = 0.1;

/// 1-D point mass pushed toward a goal.
///
/// Observation `[p, v, goal]`; `v' = 0.95 v + 0.1 a`, `p' = p + v'`;
/// reward `-|p' - goal|`.
#[derive(Debug, Clone)]
pub struct PointMass {
    p: f64,
    v: f64,
    goal: f64,
    t: usize,
    horizon: usize,
}

impl Default for PointMass {
    fn default() -> Self {
        Self::new(HORIZON)
    }
}

impl PointMass {
    pub fn new(horizon: usize) -> Self {
        Self {
            p: 0.0,
            v: 0.0,
            goal: 0.0,
            t: 0,
            horizon: horizon.max(1),
        }
    }

    fn obs(&self) -> Vec<f64> {
        vec![self.p, self.v, self.goal]
    }
}

impl Env for PointMass {
    fn spec(&self) -> EnvSpec {
        EnvSpec {
            name: "pointmass",
            state_dim: 3,
            action_dim: 1,
            action_bound: 1.0,
            max_episode_len: self.horizon,
        }
    }

    fn reset(&mut self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.p = rng.random_range(-2.0..2.0);
        self.goal = rng.random_range(-1.0..1.0);
        self.v = 0.0;
        self.t = 0;
        self.obs()
    }

    fn step(&mut self, action: &[f64]) -> Result<Step> {
        if action.len() != 1 || !action[0].is_finite() {
            return Err(Error::invalid(format!("pointmass expects one finite action, got {action:?}")));
        }
        if self.t >= self.horizon {
            return Err(Error::invalid("episode is over; call reset"));
        }
        let a = action[0].clamp(-1.0, 1.0);
        self.v = DAMPING * self.v + GAIN * a;
        self.p += self.v;
        self.t += 1;
        Ok(Step {
            obs: self.obs(),
            reward: -(self.p - self.goal).abs(),
            applied_action: vec![a],
            done: self.t >= self.horizon,
            terminal: false,
        })
    }

    fn reference_policy(&self) -> Box<dyn Policy> {
        Box::new(LqrPolicy::new())
    }
}

/// Gain of the infinite-horizon discrete LQR for the error state
/// `[p - goal, v]` with cost `e_p^2 + 0.1 v^2 + 0.1 a^2`, by iterating the
/// Riccati recursion to a fixed point.
pub fn lqr_gain() -> [f64; 2] {
    let a = [[1.0, DAMPING], [0.0, DAMPING]];
    let b = [GAIN, GAIN];
    let q = [[1.0, 0.0], [0.0, 0.1]];
    let r = 0.1;
    let mut p = q;
    let mut k = [0.0; 2];
    for _ in 0..100_000 {
        // pb = P B, bpb = B' P B, pa = B' P A
        let pb = [p[0][0] * b[0] + p[0][1] * b[1], p[1][0] * b[0] + p[1][1] * b[1]];
        let bpb = b[0] * pb[0] + b[1] * pb[1];
        let bpa = [pb[0] * a[0][0] + pb[1] * a[1][0], pb[0] * a[0][1] + pb[1] * a[1][1]];
        let kn = [bpa[0] / (r + bpb), bpa[1] / (r + bpb)];
        let mut next = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                let mut apa = 0.0;
                for m in 0..2 {
                    for n in 0..2 {
                        apa += a[m][i] * p[m][n] * a[n][j];
                    }
                }
                next[i][j] = q[i][j] + apa - bpa[i] * kn[j];
            }
        }
        let diff = (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).map(|(i, j)| (next[i][j] - p[i][j]).abs()).fold(0.0, f64::max);
        p = next;
        k = kn;
        if diff < 1e-14 {
            break;
        }
    }
    k
}

/// Clipped LQR controller acting on `[p, v, goal]` observations.
#[derive(Debug, Clone)]
pub struct LqrPolicy {
    k: [f64; 2],
}

impl LqrPolicy {
    pub fn new() -> Self {
        Self { k: lqr_gain() }
    }
}

impl Default for LqrPolicy {
    fn default() -> Self {
        Self::new()
    }
}

impl Policy for LqrPolicy {
    fn reset(&mut self, _seed: u64) {}

    fn act(&mut self, obs: &[f64], _prev_action: &[f64], _rtg: f64) -> Result<Vec<f64>> {
        let e = obs[0] - obs[2];
        Ok(vec![(-(self.k[0] * e + self.k[1] * obs[1])).clamp(-1.0, 1.0)])
    }
}
