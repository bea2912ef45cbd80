//! Seeded toy environments, reference controllers, dataset tiers and policy
//! evaluation.

mod delayed_cue;
mod pointmass;

pub use delayed_cue::{CuePolicy, DelayedCue};
pub use pointmass::{lqr_gain, LqrPolicy, PointMass};

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;

use crate::data::Trajectory;
use crate::error::{Error, Result};
use crate::policy::{ActorCarry, ActorNetwork};
use crate::ssm::SumMode;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvSpec {
    pub name: &'static str,
    pub state_dim: usize,
    pub action_dim: usize,
    /// Actions are clipped to `[-action_bound, action_bound]`.
    pub action_bound: f64,
    pub max_episode_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub obs: Vec<f64>,
    pub reward: f64,
    /// Action as it acted on the environment after clipping or masking.
    pub applied_action: Vec<f64>,
    /// The episode is over (terminal or time limit).
    pub done: bool,
    /// The episode ended in a true terminal state.
    pub terminal: bool,
}

pub trait Env {
    fn spec(&self) -> EnvSpec;
    fn reset(&mut self, seed: u64) -> Vec<f64>;
    fn step(&mut self, action: &[f64]) -> Result<Step>;
    /// Scripted controller that defines the expert tier.
    fn reference_policy(&self) -> Box<dyn Policy>;
}

/// Observation-driven controller.
pub trait Policy {
    fn reset(&mut self, seed: u64);
    /// `prev_action` is the previously applied action (zeros at the first
    /// step) and `rtg` the return still to be collected.
    fn act(&mut self, obs: &[f64], prev_action: &[f64], rtg: f64) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnvKind {
    PointMass,
    DelayedCue { horizon: usize },
}

impl EnvKind {
    pub fn make(self) -> Box<dyn Env> {
        match self {
            EnvKind::PointMass => Box::new(PointMass::default()),
            EnvKind::DelayedCue { horizon } => Box::new(DelayedCue::new(horizon)),
        }
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pointmass" => Ok(EnvKind::PointMass),
            "delayedcue" | "delayed-cue" => Ok(EnvKind::DelayedCue {
                horizon: delayed_cue::DEFAULT_HORIZON,
            }),
            other => Err(Error::invalid(format!(
                "unknown environment `{other}` (expected pointmass or delayedcue)"
            ))),
        }
    }
}

/// Seed of episode `i` in a run seeded with `seed`; consecutive episodes get
/// consecutive seeds.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

/// Runs one episode and records observations, applied actions and rewards.
pub fn rollout(env: &mut dyn Env, policy: &mut dyn Policy, initial_rtg: f64, seed: u64) -> Result<Trajectory> {
    let spec = env.spec();
    policy.reset(seed);
    let mut obs = env.reset(seed);
    let mut prev = vec![0.0; spec.action_dim];
    let mut rtg = initial_rtg;
    let (mut states, mut actions, mut rewards) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..spec.max_episode_len {
        let a = policy.act(&obs, &prev, rtg)?;
        if a.len() != spec.action_dim {
            return Err(Error::shape(
                "rollout",
                format!("policy produced {} actions, env expects {}", a.len(), spec.action_dim),
            ));
        }
        let step = env.step(&a)?;
        states.push(std::mem::replace(&mut obs, step.obs));
        actions.push(step.applied_action.clone());
        rewards.push(step.reward);
        rtg -= step.reward;
        prev = step.applied_action;
        if step.done {
            break;
        }
    }
    Trajectory::new(states, actions, rewards)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalStats {
    pub mean: f64,
    pub std: f64,
    pub returns: Vec<f64>,
}

impl EvalStats {
    pub fn from_returns(returns: Vec<f64>) -> Self {
        let n = returns.len().max(1) as f64;
        let mean = returns.iter().sum::<f64>() / n;
        let var = returns.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
            returns,
        }
    }
}

/// Mean and spread of episode returns over `n_episodes` seeded episodes.
pub fn evaluate_policy(
    env: &mut dyn Env,
    policy: &mut dyn Policy,
    initial_rtg: f64,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalStats> {
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be >= 1"));
    }
    let returns = (0..n_episodes)
        .map(|i| rollout(env, policy, initial_rtg, episode_seed(seed, i)).map(|t| t.total_return()))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalStats::from_returns(returns))
}

/// Recurrent-view actor policy.
pub struct ActorPolicy<'a> {
    actor: &'a ActorNetwork,
    carry: ActorCarry,
    mode: SumMode,
}

impl<'a> ActorPolicy<'a> {
    pub fn new(actor: &'a ActorNetwork, mode: SumMode) -> Self {
        Self {
            actor,
            carry: actor.zero_carry(),
            mode,
        }
    }

    pub fn carry(&self) -> &ActorCarry {
        &self.carry
    }
}

impl Policy for ActorPolicy<'_> {
    fn reset(&mut self, _seed: u64) {
        self.carry.reset();
    }

    fn act(&mut self, obs: &[f64], prev_action: &[f64], rtg: f64) -> Result<Vec<f64>> {
        let (a, c) = self.actor.forward_step(&self.carry, obs, prev_action, rtg, self.mode)?;
        self.carry = c;
        Ok(a)
    }
}

/// Convolution-view actor policy that re-evaluates the whole episode so far
/// at every step. Used for actors with truncated kernels, whose recurrent
/// view does not exist.
pub struct SequencePolicy<'a> {
    actor: &'a ActorNetwork,
    states: Vec<Vec<f64>>,
    prev_actions: Vec<Vec<f64>>,
    rtg: Vec<f64>,
}

impl<'a> SequencePolicy<'a> {
    pub fn new(actor: &'a ActorNetwork) -> Self {
        Self {
            actor,
            states: Vec::new(),
            prev_actions: Vec::new(),
            rtg: Vec::new(),
        }
    }
}

impl Policy for SequencePolicy<'_> {
    fn reset(&mut self, _seed: u64) {
        self.states.clear();
        self.prev_actions.clear();
        self.rtg.clear();
    }

    fn act(&mut self, obs: &[f64], prev_action: &[f64], rtg: f64) -> Result<Vec<f64>> {
        self.states.push(obs.to_vec());
        self.prev_actions.push(prev_action.to_vec());
        self.rtg.push(rtg);
        let out = self.actor.forward_sequence(&self.states, &self.prev_actions, &self.rtg)?;
        Ok(out.last().cloned().expect("non-empty history"))
    }
}

/// Evaluates an actor at normalized target `target`.
pub fn evaluate_actor(
    env: &mut dyn Env,
    actor: &ActorNetwork,
    target: f64,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalStats> {
    let spec = env.spec();
    if spec.state_dim != actor.cfg.state_dim || spec.action_dim != actor.cfg.action_dim {
        return Err(Error::shape(
            "evaluate_policy",
            format!(
                "env {} has dims ({}, {}), actor has ({}, {})",
                spec.name, spec.state_dim, spec.action_dim, actor.cfg.state_dim, actor.cfg.action_dim
            ),
        ));
    }
    let rtg = actor.norm.target_return(target);
    if actor.cfg.kernel_taps.is_some() {
        evaluate_policy(env, &mut SequencePolicy::new(actor), rtg, n_episodes, seed)
    } else {
        evaluate_policy(env, &mut ActorPolicy::new(actor, SumMode::Compensated), rtg, n_episodes, seed)
    }
}

/// Uniform random actions.
pub struct RandomPolicy {
    dim: usize,
    bound: f64,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(spec: &EnvSpec) -> Self {
        Self {
            dim: spec.action_dim,
            bound: spec.action_bound,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl Policy for RandomPolicy {
    fn reset(&mut self, seed: u64) {
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0001);
    }

    fn act(&mut self, _obs: &[f64], _prev: &[f64], _rtg: f64) -> Result<Vec<f64>> {
        Ok((0..self.dim).map(|_| self.rng.random_range(-self.bound..=self.bound)).collect())
    }
}

/// Base policy with Gaussian action noise and a share of uniformly random
/// steps.
pub struct NoisyPolicy {
    base: Box<dyn Policy>,
    sigma: f64,
    random_share: f64,
    bound: f64,
    rng: ChaCha8Rng,
}

impl NoisyPolicy {
    pub fn new(base: Box<dyn Policy>, spec: &EnvSpec, sigma: f64, random_share: f64) -> Self {
        Self {
            base,
            sigma,
            random_share,
            bound: spec.action_bound,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }
}

impl Policy for NoisyPolicy {
    fn reset(&mut self, seed: u64) {
        self.base.reset(seed);
        self.rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0002);
    }

    fn act(&mut self, obs: &[f64], prev: &[f64], rtg: f64) -> Result<Vec<f64>> {
        let a = self.base.act(obs, prev, rtg)?;
        let normal = Normal::new(0.0, self.sigma).map_err(|e| Error::invalid(e.to_string()))?;
        if self.rng.random_bool(self.random_share) {
            Ok(a.iter().map(|_| self.rng.random_range(-self.bound..=self.bound)).collect())
        } else {
            Ok(a.iter()
                .map(|v| (v + self.rng.sample(normal)).clamp(-self.bound, self.bound))
                .collect())
        }
    }
}

/// Clipped affine policy `a = clip(W obs + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearPolicy {
    /// `[action_dim][state_dim + 1]`, bias last.
    pub weights: Vec<Vec<f64>>,
    pub bound: f64,
}

impl LinearPolicy {
    pub fn zeros(spec: &EnvSpec) -> Self {
        Self {
            weights: vec![vec![0.0; spec.state_dim + 1]; spec.action_dim],
            bound: spec.action_bound,
        }
    }

    fn raw(&self, obs: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|w| w[..obs.len()].iter().zip(obs).map(|(a, b)| a * b).sum::<f64>() + w[obs.len()])
            .collect()
    }

    /// One full-batch gradient step on the squared error to `actions`.
    pub fn fit_step(&mut self, states: &[Vec<f64>], actions: &[Vec<f64>], lr: f64) {
        let n = states.len().max(1) as f64;
        let mut grad = vec![vec![0.0; self.weights[0].len()]; self.weights.len()];
        for (s, a) in states.iter().zip(actions) {
            let p = self.raw(s);
            for (j, g) in grad.iter_mut().enumerate() {
                let e = 2.0 * (p[j] - a[j]) / n;
                for (gi, x) in g.iter_mut().zip(s.iter().chain(std::iter::once(&1.0))) {
                    *gi += e * x;
                }
            }
        }
        for (w, g) in self.weights.iter_mut().zip(&grad) {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= lr * gi;
            }
        }
    }
}

impl Policy for LinearPolicy {
    fn reset(&mut self, _seed: u64) {}

    fn act(&mut self, obs: &[f64], _prev: &[f64], _rtg: f64) -> Result<Vec<f64>> {
        Ok(self.raw(obs).into_iter().map(|v| v.clamp(-self.bound, self.bound)).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tier {
    Expert,
    Medium,
    Replay,
    Random,
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "expert" => Ok(Tier::Expert),
            "medium" => Ok(Tier::Medium),
            "replay" | "medium-replay" => Ok(Tier::Replay),
            "random" => Ok(Tier::Random),
            other => Err(Error::invalid(format!(
                "unknown tier `{other}` (expected expert, medium, replay or random)"
            ))),
        }
    }
}

pub const MEDIUM_SIGMA: f64 = 0.4;
pub const MEDIUM_RANDOM_SHARE: f64 = 0.5;
/// Gradient steps at which behavior-cloning snapshots are taken for the
/// replay tier, in order of increasing quality.
const REPLAY_SNAPSHOTS: [usize; 4] = [0, 5, 30, 400];

fn replay_snapshots(env: &mut dyn Env, seed: u64) -> Result<Vec<LinearPolicy>> {
    let spec = env.spec();
    let mut expert = env.reference_policy();
    let mut states = Vec::new();
    let mut actions = Vec::new();
    for i in 0..20 {
        let t = rollout(env, expert.as_mut(), 0.0, episode_seed(seed ^ 0xB0C5, i))?;
        states.extend(t.states);
        actions.extend(t.actions);
    }
    let mut lin = LinearPolicy::zeros(&spec);
    let mut snaps = Vec::new();
    let mut done = 0;
    for &target in &REPLAY_SNAPSHOTS {
        while done < target {
            lin.fit_step(&states, &actions, 0.05);
            done += 1;
        }
        snaps.push(lin.clone());
    }
    Ok(snaps)
}

/// Rolls out `n_episodes` episodes of the given tier.
///
/// `expert` follows the reference controller. `medium` adds N(0, 0.4) action
/// noise and replaces half of the steps by uniform random actions. `replay`
/// mixes uniform random episodes with behavior-cloning snapshots of
/// increasing quality, in that order. `random` acts uniformly at random.
pub fn generate_dataset(env: &mut dyn Env, tier: Tier, n_episodes: usize, seed: u64) -> Result<Vec<Trajectory>> {
    if n_episodes == 0 {
        return Err(Error::invalid("n_episodes must be >= 1"));
    }
    let spec = env.spec();
    let mut out = Vec::with_capacity(n_episodes);
    match tier {
        Tier::Expert | Tier::Medium | Tier::Random => {
            let mut policy: Box<dyn Policy> = match tier {
                Tier::Expert => env.reference_policy(),
                Tier::Medium => Box::new(NoisyPolicy::new(env.reference_policy(), &spec, MEDIUM_SIGMA, MEDIUM_RANDOM_SHARE)),
                _ => Box::new(RandomPolicy::new(&spec)),
            };
            for i in 0..n_episodes {
                out.push(rollout(env, policy.as_mut(), 0.0, episode_seed(seed, i))?);
            }
        }
        Tier::Replay => {
            let snaps = replay_snapshots(env, seed)?;
            let groups = snaps.len() + 1;
            for i in 0..n_episodes {
                let g = i * groups / n_episodes;
                let mut policy: Box<dyn Policy> = if g == 0 {
                    Box::new(RandomPolicy::new(&spec))
                } else {
                    Box::new(snaps[g - 1].clone())
                };
                out.push(rollout(env, policy.as_mut(), 0.0, episode_seed(seed, i))?);
            }
        }
    }
    Ok(out)
}
