//! Actor-critic fine-tuning of an offline-trained actor through its recurrent
//! view, with a frozen SSM kernel.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{adam_step, AdamConfig, AdamState, ParamSet, Tape};
use crate::config::{parse_value, Configurable};
use crate::env::{episode_seed, evaluate_actor, Env};
use crate::error::{Error, Result};
use crate::policy::{soft_update, ActorCarry, ActorNetwork, CriticConfig, CriticNetwork};
use crate::ssm::SumMode;

/// Relative margin of the return-to-go target above the best return seen.
pub const TARGET_MARGIN: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    /// Number of exploration episodes `M`.
    pub episodes: usize,
    /// Initial exploration noise; `None` means 0.2 times the action range.
    pub sigma: Option<f64>,
    pub critic_lr: f64,
    pub actor_lr: f64,
    /// Environment steps between training rounds.
    pub k1: u64,
    /// Environment steps between target-network updates.
    pub k2: u64,
    pub tau: f64,
    pub gamma: f64,
    pub critic_warmstart_steps: u64,
    /// Episodes collected by the frozen actor before the critic warm-start.
    pub warmstart_episodes: usize,
    pub actor_every: u64,
    pub batch_size: usize,
    pub capacity: usize,
    /// Critic updates per training round.
    pub updates_per_round: u64,
    pub critic_hidden: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Evaluate every this many episodes (0 = only after the last one).
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub mode: SumMode,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            episodes: 300,
            sigma: None,
            critic_lr: 1e-3,
            actor_lr: 1e-5,
            k1: 200,
            k2: 300,
            tau: 0.1,
            gamma: 0.99,
            critic_warmstart_steps: 35_000,
            warmstart_episodes: 10,
            actor_every: 3,
            batch_size: 96,
            capacity: 1_000_000,
            updates_per_round: 200,
            critic_hidden: 256,
            weight_decay: 0.0,
            seed: 1,
            eval_every: 10,
            eval_episodes: 5,
            eval_seed: 54_321,
            mode: SumMode::Compensated,
        }
    }
}

impl Configurable for FinetuneConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "episodes" => self.episodes = parse_value(key, value)?,
            "sigma" => self.sigma = Some(parse_value(key, value)?),
            "critic_lr" => self.critic_lr = parse_value(key, value)?,
            "actor_lr" => self.actor_lr = parse_value(key, value)?,
            "k1" => self.k1 = parse_value(key, value)?,
            "k2" => self.k2 = parse_value(key, value)?,
            "tau" => self.tau = parse_value(key, value)?,
            "gamma" => self.gamma = parse_value(key, value)?,
            "critic_warmstart_steps" => self.critic_warmstart_steps = parse_value(key, value)?,
            "warmstart_episodes" => self.warmstart_episodes = parse_value(key, value)?,
            "actor_every" => self.actor_every = parse_value(key, value)?,
            "batch_size" | "batch" => self.batch_size = parse_value(key, value)?,
            "capacity" => self.capacity = parse_value(key, value)?,
            "updates_per_round" => self.updates_per_round = parse_value(key, value)?,
            "critic_hidden" => self.critic_hidden = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            "eval_episodes" => self.eval_episodes = parse_value(key, value)?,
            "eval_seed" => self.eval_seed = parse_value(key, value)?,
            "mode" => self.mode = value.parse()?,
            other => return Err(Error::invalid(format!("unknown fine-tuning key `{other}`"))),
        }
        Ok(())
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("episodes", self.episodes as u64),
            ("k1", self.k1),
            ("k2", self.k2),
            ("actor_every", self.actor_every),
            ("batch_size", self.batch_size as u64),
            ("capacity", self.capacity as u64),
            ("updates_per_round", self.updates_per_round),
            ("critic_hidden", self.critic_hidden as u64),
            ("eval_episodes", self.eval_episodes as u64),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("{k} must be >= 1")));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::invalid(format!("tau must lie in (0, 1], got {}", self.tau)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::invalid(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if let Some(s) = self.sigma {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::invalid(format!("sigma must be finite and >= 0, got {s}")));
            }
        }
        self.critic_adam().validate()?;
        self.actor_adam().validate()
    }

    pub fn critic_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.critic_lr,
            weight_decay: self.weight_decay,
            warmup: 0,
            ..AdamConfig::default()
        }
    }

    pub fn actor_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.actor_lr,
            weight_decay: self.weight_decay,
            warmup: 0,
            ..AdamConfig::default()
        }
    }

    /// Initial noise scale for an action space of half-width `bound`.
    pub fn initial_sigma(&self, bound: f64) -> f64 {
        self.sigma.unwrap_or(0.2 * 2.0 * bound)
    }
}

/// Noise scale of episode `episode` out of `total`, decaying linearly to 0.
pub fn noise_sigma(sigma: f64, episode: usize, total: usize) -> f64 {
    if total == 0 || episode >= total {
        return 0.0;
    }
    (total - episode) as f64 / total as f64 * sigma
}

/// One stored transition with the recurrent context before and after it.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayItem {
    pub state: Vec<f64>,
    pub prev_action: Vec<f64>,
    pub prev_rtg: f64,
    pub carry: Arc<ActorCarry>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub action: Vec<f64>,
    pub rtg: f64,
    pub next_carry: Arc<ActorCarry>,
    pub terminal: bool,
}

/// FIFO transition store with uniform sampling.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: VecDeque<ReplayItem>,
    capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::invalid("replay capacity must be >= 1"));
        }
        Ok(Self {
            items: VecDeque::new(),
            capacity,
        })
    }

    pub fn push(&mut self, item: ReplayItem) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(item);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn get(&self, i: usize) -> Option<&ReplayItem> {
        self.items.get(i)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ReplayItem> {
        self.items.iter()
    }

    /// `n` indices drawn uniformly with replacement.
    pub fn sample_indices(&self, rng: &mut impl Rng, n: usize) -> Result<Vec<usize>> {
        if self.items.is_empty() {
            return Err(Error::invalid("cannot sample from an empty replay buffer"));
        }
        Ok((0..n).map(|_| rng.random_range(0..self.items.len())).collect())
    }
}

/// `b + 0.1 |b|`.
pub fn raise_target(best: f64) -> f64 {
    best + TARGET_MARGIN * best.abs()
}

/// Running maximum of normalized returns and the return-to-go target it
/// implies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RtgTarget {
    best: f64,
}

impl RtgTarget {
    pub fn new(best: f64) -> Self {
        Self { best }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Normalized target handed to the actor.
    pub fn target(&self) -> f64 {
        raise_target(self.best)
    }

    /// Records a normalized return; true when it is a new best.
    pub fn observe(&mut self, normalized: f64) -> bool {
        if normalized > self.best {
            self.best = normalized;
            true
        } else {
            false
        }
    }
}

/// Estimates the best return by evaluating at normalized target 1.0.
pub fn set_rtg_target(actor: &ActorNetwork, env: &mut dyn Env, episodes: usize, seed: u64) -> Result<RtgTarget> {
    let stats = evaluate_actor(env, actor, 1.0, episodes, seed)?;
    Ok(RtgTarget::new(actor.norm.normalized_return(stats.mean)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneRow {
    pub episode: usize,
    pub eval_return: Option<f64>,
    pub critic_loss: Option<f64>,
    pub actor_obj: Option<f64>,
    pub sigma: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub actor: ActorNetwork,
    /// Actor with the best validation return, initial actor included.
    pub best_actor: ActorNetwork,
    /// Normalized target the best actor was evaluated with.
    pub best_target: f64,
    pub best_eval: f64,
    pub target: RtgTarget,
    pub target_history: Vec<f64>,
    pub metrics: Vec<FinetuneRow>,
    pub buffer: ReplayBuffer,
    /// Actor parameters were bit-identical before and after the critic
    /// warm-start.
    pub warmstart_gate: bool,
    pub critic_warmstart_losses: Vec<f64>,
    pub diverged_episodes: usize,
}

pub fn finetune_csv(rows: &[FinetuneRow]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut s = String::from("episode,eval_return,critic_loss,actor_obj,sigma\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{}",
            r.episode,
            opt(r.eval_return),
            opt(r.critic_loss),
            opt(r.actor_obj),
            r.sigma
        )
        .expect("writing to a String");
    }
    s
}

struct Learner {
    cfg: FinetuneConfig,
    actor: ActorNetwork,
    actor_target: ActorNetwork,
    critic: CriticNetwork,
    critic_target: CriticNetwork,
    actor_adam: AdamState,
    critic_adam: AdamState,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    critic_updates: u64,
    env_steps: u64,
}

fn frozen(params: &ParamSet) -> ParamSet {
    let mut p = params.clone();
    p.set_trainable(|_| true, false);
    p
}

impl Learner {
    /// Runs one exploration episode; returns false when the carry diverged.
    fn explore(&mut self, env: &mut dyn Env, rtg0: f64, sigma: f64, seed: u64, train: bool) -> Result<(bool, Vec<(f64, f64)>)> {
        let spec = env.spec();
        let bound = spec.action_bound;
        let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::invalid(e.to_string()))?;
        let mut obs = env.reset(seed);
        let mut prev = vec![0.0; spec.action_dim];
        let mut rtg = rtg0;
        let mut carry = Arc::new(self.actor.zero_carry());
        let mut losses = Vec::new();
        for _ in 0..spec.max_episode_len {
            let (out, next) = match self.actor.forward_step(&carry, &obs, &prev, rtg, self.cfg.mode) {
                Ok(v) => v,
                Err(Error::Divergence(_)) => return Ok((false, losses)),
                Err(e) => return Err(e),
            };
            let a: Vec<f64> = out
                .iter()
                .map(|&x| (x + noise.sample(&mut self.rng)).clamp(-bound, bound))
                .collect();
            let step = env.step(&a)?;
            let next_rtg = rtg - step.reward;
            let next = Arc::new(next);
            self.buffer.push(ReplayItem {
                state: obs,
                prev_action: prev,
                prev_rtg: rtg,
                carry,
                reward: step.reward,
                next_state: step.obs.clone(),
                action: step.applied_action.clone(),
                rtg: next_rtg,
                next_carry: Arc::clone(&next),
                terminal: step.terminal,
            });
            obs = step.obs;
            prev = step.applied_action;
            rtg = next_rtg;
            carry = next;
            if train {
                self.env_steps += 1;
                if self.env_steps % self.cfg.k1 == 0 {
                    for _ in 0..self.cfg.updates_per_round {
                        losses.push(self.update(true)?);
                    }
                }
                if self.env_steps % self.cfg.k2 == 0 {
                    soft_update(&mut self.actor_target.params, &self.actor.params, self.cfg.tau)?;
                    soft_update(&mut self.critic_target.params, &self.critic.params, self.cfg.tau)?;
                }
            }
            if step.done {
                break;
            }
        }
        Ok((true, losses))
    }

    /// One critic update and, every `actor_every` updates when allowed, one
    /// actor update. Returns the critic loss and actor objective.
    fn update(&mut self, actor_allowed: bool) -> Result<(f64, f64)> {
        let idx = self.buffer.sample_indices(&mut self.rng, self.cfg.batch_size)?;
        let items: Vec<&ReplayItem> = idx.iter().map(|&i| self.buffer.get(i).expect("sampled in range")).collect();
        let da = self.actor.cfg.action_dim;
        let n = items.len();
        let cat = |f: &dyn Fn(&ReplayItem) -> &[f64]| items.iter().flat_map(|it| f(it).to_vec()).collect::<Vec<f64>>();
        let next_states = cat(&|it| &it.next_state);
        let actions = cat(&|it| &it.action);

        let y = {
            let mut tape = Tape::new();
            let carries: Vec<&ActorCarry> = items.iter().map(|it| it.next_carry.as_ref()).collect();
            let rtg: Vec<f64> = items.iter().map(|it| it.rtg).collect();
            let (a_next, _) =
                self.actor_target
                    .step_tape(&mut tape, &carries, &next_states, &actions, &rtg, self.cfg.mode, false, 0)?;
            let q = self.critic_target.forward_tape(&mut tape, &next_states, a_next)?;
            let q = tape.value(q).to_vec();
            items
                .iter()
                .zip(q)
                .map(|(it, q)| it.reward + if it.terminal { 0.0 } else { self.cfg.gamma * q })
                .collect::<Vec<f64>>()
        };

        let states = cat(&|it| &it.state);
        let mut tape = Tape::new();
        let a = tape.input(&[n, da], actions)?;
        let q = self.critic.forward_tape(&mut tape, &states, a)?;
        let target = tape.input(&[n, 1], y)?;
        let loss = tape.mse_loss(q, target)?;
        let critic_loss = tape.item(loss)?;
        if !critic_loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "critic loss is {critic_loss} at critic update {}, replay indices {idx:?}",
                self.critic_updates + 1
            )));
        }
        let grads = tape.backward(loss)?;
        adam_step(&mut self.critic.params, &grads, &mut self.critic_adam, &self.cfg.critic_adam())?;
        self.critic_updates += 1;

        let mut actor_obj = f64::NAN;
        if actor_allowed && self.critic_updates % self.cfg.actor_every == 0 {
            let critic = CriticNetwork {
                params: frozen(&self.critic.params),
                ..self.critic.clone()
            };
            let carries: Vec<&ActorCarry> = items.iter().map(|it| it.carry.as_ref()).collect();
            let prev = cat(&|it| &it.prev_action);
            let rtg: Vec<f64> = items.iter().map(|it| it.prev_rtg).collect();
            let mut tape = Tape::new();
            let (act, _) = self.actor.step_tape(&mut tape, &carries, &states, &prev, &rtg, self.cfg.mode, false, 0)?;
            let q = critic.forward_tape(&mut tape, &states, act)?;
            let obj = tape.mean(q);
            let neg = tape.scale(obj, -1.0);
            actor_obj = tape.item(obj)?;
            if !actor_obj.is_finite() {
                return Err(Error::NonFinite(format!(
                    "actor objective is {actor_obj} at critic update {}, replay indices {idx:?}",
                    self.critic_updates
                )));
            }
            let grads = tape.backward(neg)?;
            adam_step(&mut self.actor.params, &grads, &mut self.actor_adam, &self.cfg.actor_adam())?;
        }
        Ok((critic_loss, actor_obj))
    }
}

fn mean_finite(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.filter(|x| x.is_finite()).fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Fine-tunes `initial` on `env`.
pub fn finetune(cfg: &FinetuneConfig, initial: &ActorNetwork, env: &mut dyn Env) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    let spec = env.spec();
    if spec.state_dim != initial.cfg.state_dim || spec.action_dim != initial.cfg.action_dim {
        return Err(Error::shape(
            "finetune",
            format!(
                "env {} has dims ({}, {}), actor has ({}, {})",
                spec.name, spec.state_dim, spec.action_dim, initial.cfg.state_dim, initial.cfg.action_dim
            ),
        ));
    }
    if initial.cfg.kernel_taps.is_some() {
        return Err(Error::invalid("fine-tuning needs the recurrent view; the actor has a truncated kernel"));
    }
    let sigma0 = cfg.initial_sigma(spec.action_bound);

    let mut actor = initial.clone();
    actor.set_ssm_kernel_trainable(false);
    let critic = CriticNetwork::new(
        CriticConfig {
            hidden: cfg.critic_hidden,
            ..CriticConfig::new(spec.state_dim, spec.action_dim)
        },
        initial.norm.clone(),
        cfg.seed ^ 0xC417,
    )?;
    let mut learner = Learner {
        cfg: cfg.clone(),
        actor_target: actor.clone(),
        actor,
        critic_target: critic.clone(),
        critic,
        actor_adam: AdamState::new(),
        critic_adam: AdamState::new(),
        buffer: ReplayBuffer::new(cfg.capacity)?,
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        critic_updates: 0,
        env_steps: 0,
    };

    let mut target = set_rtg_target(initial, env, cfg.eval_episodes, cfg.eval_seed)?;
    let mut target_history = vec![target.target()];
    let mut best = (target.best(), 1.0, initial.clone());
    let mut diverged = 0;

    let before = learner.actor.params.clone();
    let rtg0 = initial.norm.target_return(target.target());
    for i in 0..cfg.warmstart_episodes {
        let (ok, _) = learner.explore(env, rtg0, sigma0, episode_seed(cfg.seed, i), false)?;
        diverged += usize::from(!ok);
    }
    let mut critic_warmstart_losses = Vec::with_capacity(cfg.critic_warmstart_steps as usize);
    if !learner.buffer.is_empty() {
        for _ in 0..cfg.critic_warmstart_steps {
            critic_warmstart_losses.push(learner.update(false)?.0);
        }
    }
    let warmstart_gate = learner.actor.params == before;

    let mut metrics = Vec::with_capacity(cfg.episodes);
    for e in 0..cfg.episodes {
        let sigma = noise_sigma(sigma0, e, cfg.episodes);
        let rtg0 = initial.norm.target_return(target.target());
        let seed = episode_seed(cfg.seed, cfg.warmstart_episodes + e);
        let (ok, losses) = learner.explore(env, rtg0, sigma, seed, true)?;
        diverged += usize::from(!ok);
        let due = e + 1 == cfg.episodes || (cfg.eval_every > 0 && (e + 1) % cfg.eval_every == 0);
        let mut eval_return = None;
        if due {
            let t = target.target();
            let stats = evaluate_actor(env, &learner.actor, t, cfg.eval_episodes, cfg.eval_seed)?;
            eval_return = Some(stats.mean);
            if target.observe(initial.norm.normalized_return(stats.mean)) {
                best = (target.best(), t, learner.actor.clone());
            }
            target_history.push(target.target());
        }
        metrics.push(FinetuneRow {
            episode: e + 1,
            eval_return,
            critic_loss: mean_finite(losses.iter().map(|l| l.0)),
            actor_obj: mean_finite(losses.iter().map(|l| l.1)),
            sigma,
        });
    }

    let (best_norm, best_target, best_actor) = best;
    Ok(FinetuneOutcome {
        actor: learner.actor,
        best_actor,
        best_target,
        best_eval: initial.norm.target_return(best_norm),
        target,
        target_history,
        metrics,
        buffer: learner.buffer,
        warmstart_gate,
        critic_warmstart_losses,
        diverged_episodes: diverged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::data::NormStats;
    use crate::env::PointMass;
    use crate::policy::ActorConfig;

    fn item(r: f64) -> ReplayItem {
        let c = Arc::new(ActorCarry::zeros(1, 1, 1, 1));
        ReplayItem {
            state: vec![r],
            prev_action: vec![0.0],
            prev_rtg: 0.0,
            carry: Arc::clone(&c),
            reward: r,
            next_state: vec![r],
            action: vec![0.0],
            rtg: -r,
            next_carry: c,
            terminal: false,
        }
    }

    #[test]
    fn soft_update_endpoints_and_algebra() {
        let mut dst = ParamSet::new();
        dst.insert("w", Tensor::vector(vec![1.0, -2.0, 0.3]));
        let mut src = ParamSet::new();
        src.insert("w", Tensor::vector(vec![0.7, 5.0, -0.1]));
        let mut keep = dst.clone();
        soft_update(&mut keep, &src, 0.0).unwrap();
        assert_eq!(keep, dst);
        let mut copy = dst.clone();
        soft_update(&mut copy, &src, 1.0).unwrap();
        assert_eq!(copy.get("w").unwrap().data(), src.get("w").unwrap().data());
        let mut mix = dst.clone();
        soft_update(&mut mix, &src, 0.1).unwrap();
        for ((m, d), s) in mix
            .get("w")
            .unwrap()
            .data()
            .iter()
            .zip(dst.get("w").unwrap().data())
            .zip(src.get("w").unwrap().data())
        {
            assert_eq!(*m, 0.9 * d + 0.1 * s);
        }
    }

    #[test]
    fn sigma_schedule_endpoints() {
        assert_eq!(noise_sigma(0.4, 0, 300), 0.4);
        assert_eq!(noise_sigma(0.4, 300, 300), 0.0);
        assert_eq!(noise_sigma(0.4, 150, 300), 0.2);
        assert_eq!(FinetuneConfig::default().initial_sigma(1.0), 0.4);
    }

    #[test]
    fn target_is_ten_percent_above_best_and_monotone() {
        assert!((raise_target(0.8) - 0.88).abs() < 1e-15);
        assert!((raise_target(-0.5) + 0.45).abs() < 1e-15);
        let mut t = RtgTarget::new(0.8);
        let mut last = t.target();
        for r in [0.5, 0.9, 0.85, 1.2, -3.0] {
            t.observe(r);
            assert!(t.target() >= last);
            last = t.target();
        }
        assert_eq!(t.best(), 1.2);
    }

    #[test]
    fn buffer_is_fifo_at_capacity() {
        let mut b = ReplayBuffer::new(3).unwrap();
        for r in 0..5 {
            b.push(item(r as f64));
        }
        assert_eq!(b.len(), 3);
        let kept: Vec<f64> = b.iter().map(|i| i.reward).collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
        assert!(ReplayBuffer::new(0).is_err());
        assert!(ReplayBuffer::new(2).unwrap().sample_indices(&mut ChaCha8Rng::seed_from_u64(0), 1).is_err());
    }

    #[test]
    fn sampling_is_uniform() {
        let mut b = ReplayBuffer::new(100).unwrap();
        for r in 0..100 {
            b.push(item(r as f64));
        }
        let idx = b.sample_indices(&mut ChaCha8Rng::seed_from_u64(7), 10_000).unwrap();
        let mut counts = [0usize; 100];
        for i in idx {
            counts[i] += 1;
        }
        let expected = 100.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99th percentile of chi-square with 99 degrees of freedom.
        assert!(chi2 < 134.641_616_855_789, "chi2 = {chi2}");
    }

    #[test]
    fn config_parsing_and_validation() {
        let mut c = FinetuneConfig::default();
        assert_eq!((c.critic_lr, c.actor_lr, c.k1, c.k2), (1e-3, 1e-5, 200, 300));
        assert_eq!((c.tau, c.gamma, c.critic_warmstart_steps, c.actor_every, c.batch_size), (0.1, 0.99, 35_000, 3, 96));
        assert_eq!(c.capacity, 1_000_000);
        c.set("tau", "1.0").unwrap();
        c.set("mode", "naive").unwrap();
        c.validate().unwrap();
        c.set("tau", "0").unwrap();
        assert!(c.validate().is_err());
        assert!(c.set("bogus", "1").is_err());
        let c = FinetuneConfig {
            batch_size: 0,
            ..FinetuneConfig::default()
        };
        assert!(c.validate().is_err());
    }

    fn small_actor() -> ActorNetwork {
        let cfg = ActorConfig {
            hidden: 8,
            state_size: 4,
            blocks: 1,
            dropout: 0.0,
            ..ActorConfig::new(3, 1)
        };
        ActorNetwork::new(cfg, NormStats::identity(3), 3).unwrap()
    }

    fn short_run() -> FinetuneConfig {
        FinetuneConfig {
            episodes: 3,
            critic_warmstart_steps: 20,
            warmstart_episodes: 1,
            batch_size: 8,
            k1: 25,
            k2: 40,
            updates_per_round: 6,
            critic_hidden: 16,
            actor_lr: 1e-3,
            eval_every: 1,
            eval_episodes: 1,
            ..FinetuneConfig::default()
        }
    }

    #[test]
    fn short_run_keeps_kernel_bookkeeping_and_gate() {
        let actor = small_actor();
        let mut env = PointMass::new(50);
        let out = finetune(&short_run(), &actor, &mut env).unwrap();
        assert!(out.warmstart_gate);
        assert_eq!(out.critic_warmstart_losses.len(), 20);
        assert_eq!(out.metrics.len(), 3);
        assert_eq!(out.buffer.len(), 4 * 50);
        for it in out.buffer.iter() {
            assert_eq!(it.rtg, it.prev_rtg - it.reward);
        }
        assert_eq!(actor.kernels(64).unwrap(), out.actor.kernels(64).unwrap());
        assert_ne!(actor.params, out.actor.params);
        for w in out.target_history.windows(2) {
            assert!(w[1] >= w[0]);
        }
        assert_eq!(out.metrics[0].sigma, 0.4);
        let csv = finetune_csv(&out.metrics);
        assert!(csv.starts_with("episode,eval_return,critic_loss,actor_obj,sigma\n"));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn runs_are_reproducible() {
        let actor = small_actor();
        let a = finetune(&short_run(), &actor, &mut PointMass::new(50)).unwrap();
        let b = finetune(&short_run(), &actor, &mut PointMass::new(50)).unwrap();
        assert_eq!(a.actor.params, b.actor.params);
        assert_eq!(a.metrics, b.metrics);
        let t1 = set_rtg_target(&actor, &mut PointMass::new(50), 2, 9).unwrap();
        let t2 = set_rtg_target(&actor, &mut PointMass::new(50), 2, 9).unwrap();
        assert_eq!(t1, t2);
    }

    #[test]
    fn rejects_mismatched_env() {
        let cfg = ActorConfig {
            hidden: 4,
            state_size: 2,
            blocks: 1,
            ..ActorConfig::new(2, 1)
        };
        let actor = ActorNetwork::new(cfg, NormStats::identity(2), 0).unwrap();
        assert!(finetune(&short_run(), &actor, &mut PointMass::new(10)).is_err());
    }
}
