//! Return-conditioned behavior cloning on whole trajectories through the
//! convolution view.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{adam_step, load_adam, save_adam, AdamConfig, AdamState, Tape};
use crate::config::{parse_value, Configurable};
use crate::data::{Batch, BatchSampler, Dataset, DEFAULT_BATCH_SIZE};
use crate::env::{evaluate_actor, Env};
use crate::error::{Error, Result};
use crate::policy::{ActorConfig, ActorNetwork, SequenceInput};

#[derive(Debug, Clone, PartialEq)]
pub struct OfflineConfig {
    pub lr: f64,
    pub warmup: u64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    /// Normalized return-to-go target used for evaluation.
    pub target: f64,
    /// Evaluate every this many steps (0 = only at the end).
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub hidden: usize,
    pub state_size: usize,
    pub blocks: usize,
    pub dropout: f64,
    pub kernel_taps: Option<usize>,
}

impl Default for OfflineConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            warmup: 10_000,
            weight_decay: 1e-4,
            batch_size: DEFAULT_BATCH_SIZE,
            steps: 50_000,
            seed: 1,
            target: 1.0,
            eval_every: 5_000,
            eval_episodes: 10,
            eval_seed: 12_345,
            hidden: 64,
            state_size: 64,
            blocks: 3,
            dropout: 0.1,
            kernel_taps: None,
        }
    }
}

/// Applies `n=64,h=64,blocks=3` style overrides.
pub fn apply_arch(spec: &str, hidden: &mut usize, state_size: &mut usize, blocks: &mut usize) -> Result<()> {
    for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("arch entry `{part}` is not `key=value`")))?;
        let v: usize = parse_value(k, v.trim())?;
        match k.trim() {
            "n" | "state_size" => *state_size = v,
            "h" | "hidden" => *hidden = v,
            "blocks" => *blocks = v,
            other => return Err(Error::invalid(format!("unknown arch key `{other}`"))),
        }
    }
    Ok(())
}

impl Configurable for OfflineConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "lr" => self.lr = parse_value(key, value)?,
            "warmup" => self.warmup = parse_value(key, value)?,
            "weight_decay" => self.weight_decay = parse_value(key, value)?,
            "batch_size" | "batch" => self.batch_size = parse_value(key, value)?,
            "steps" => self.steps = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "target" => self.target = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            "eval_episodes" => self.eval_episodes = parse_value(key, value)?,
            "eval_seed" => self.eval_seed = parse_value(key, value)?,
            "hidden" | "h" => self.hidden = parse_value(key, value)?,
            "state_size" | "n" => self.state_size = parse_value(key, value)?,
            "blocks" => self.blocks = parse_value(key, value)?,
            "dropout" => self.dropout = parse_value(key, value)?,
            "kernel_taps" => {
                let k: usize = parse_value(key, value)?;
                self.kernel_taps = (k > 0).then_some(k);
            }
            "arch" => apply_arch(value, &mut self.hidden, &mut self.state_size, &mut self.blocks)?,
            other => return Err(Error::invalid(format!("unknown offline training key `{other}`"))),
        }
        Ok(())
    }
}

impl OfflineConfig {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            warmup: self.warmup,
            ..AdamConfig::default()
        }
    }

    pub fn actor_config(&self, state_dim: usize, action_dim: usize) -> ActorConfig {
        ActorConfig {
            state_dim,
            action_dim,
            hidden: self.hidden,
            state_size: self.state_size,
            blocks: self.blocks,
            dropout: self.dropout,
            action_bound: 1.0,
            kernel_taps: self.kernel_taps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.adam().validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if self.eval_episodes == 0 {
            return Err(Error::invalid("eval_episodes must be >= 1"));
        }
        Ok(())
    }
}

/// Seed of the randomness used at optimizer step `step`, so a restored run
/// draws the same batches and dropout masks as an uninterrupted one.
pub(crate) fn step_seed(seed: u64, step: u64) -> u64 {
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Masked squared-error loss of the actor on one batch, recorded on `tape`.
pub fn batch_loss(
    tape: &mut Tape,
    actor: &ActorNetwork,
    batch: &Batch,
    train: bool,
    dropout_seed: u64,
) -> Result<crate::autodiff::Var> {
    let pred = actor.forward_sequence_tape(tape, SequenceInput::from(batch), train, dropout_seed)?;
    let rows = batch.batch * batch.max_len;
    let target = tape.input(&[rows, batch.action_dim], batch.actions.clone())?;
    tape.weighted_sq_error(pred, target, batch.loss_weights())
}

/// Offline training state: network, optimizer moments and step counter.
#[derive(Debug, Clone)]
pub struct OfflineTrainer {
    pub cfg: OfflineConfig,
    pub actor: ActorNetwork,
    pub adam: AdamState,
}

pub fn optimizer_path(ckpt: &Path) -> PathBuf {
    let mut s = ckpt.as_os_str().to_owned();
    s.push(".opt");
    PathBuf::from(s)
}

impl OfflineTrainer {
    pub fn new(cfg: OfflineConfig, dataset: &Dataset) -> Result<Self> {
        cfg.validate()?;
        let acfg = cfg.actor_config(dataset.state_dim(), dataset.action_dim());
        let actor = ActorNetwork::new(acfg, dataset.stats.clone(), cfg.seed)?;
        Ok(Self {
            cfg,
            actor,
            adam: AdamState::new(),
        })
    }

    pub fn step(&self) -> u64 {
        self.adam.step
    }

    /// Samples a batch, takes one optimizer step and returns the loss.
    pub fn train_step(&mut self, dataset: &Dataset) -> Result<f64> {
        let step = self.adam.step + 1;
        let seed = step_seed(self.cfg.seed, step);
        let mut sampler = BatchSampler::new(dataset, self.cfg.batch_size, ChaCha8Rng::seed_from_u64(seed))?;
        let indices = sampler.sample_indices();
        let picked: Vec<_> = indices.iter().map(|&i| &dataset.trajectories[i]).collect();
        let batch = Batch::from_trajectories(&picked, dataset.state_dim(), dataset.action_dim())?;
        let mut tape = Tape::new();
        let loss = batch_loss(&mut tape, &self.actor, &batch, true, seed)?;
        let value = tape.item(loss)?;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss is {value} at step {step}, batch trajectories {indices:?}"
            )));
        }
        let grads = tape.backward(loss)?;
        adam_step(&mut self.actor.params, &grads, &mut self.adam, &self.cfg.adam())?;
        Ok(value)
    }

    /// Writes the actor to `path` and the optimizer state next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.actor.save(path)?;
        save_adam(&optimizer_path(path), &self.adam)
    }

    pub fn restore(cfg: OfflineConfig, path: &Path) -> Result<Self> {
        cfg.validate()?;
        let actor = ActorNetwork::load(path)?;
        let adam = load_adam(&optimizer_path(path))?;
        Ok(Self { cfg, actor, adam })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub loss: f64,
    pub eval_return: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct OfflineOutcome {
    pub actor: ActorNetwork,
    /// Actor with the best evaluation return, or the final actor when no
    /// environment was given.
    pub best_actor: ActorNetwork,
    pub best_eval: Option<f64>,
    pub metrics: Vec<MetricRow>,
    /// Optimizer state after the last step.
    pub adam: AdamState,
}

impl OfflineOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.metrics.iter().map(|m| m.loss).collect()
    }
}

/// Runs the configured number of steps, evaluating periodically on `env`
/// when given and keeping the best actor.
pub fn train_offline(cfg: &OfflineConfig, dataset: &Dataset, env: Option<&mut dyn Env>) -> Result<OfflineOutcome> {
    let trainer = OfflineTrainer::new(cfg.clone(), dataset)?;
    continue_training(trainer, dataset, env)
}

/// Trains an existing trainer up to `cfg.steps` total steps.
pub fn continue_training(
    mut trainer: OfflineTrainer,
    dataset: &Dataset,
    mut env: Option<&mut dyn Env>,
) -> Result<OfflineOutcome> {
    let cfg = trainer.cfg.clone();
    let mut metrics = Vec::new();
    let mut best: Option<(f64, ActorNetwork)> = None;
    while trainer.step() < cfg.steps {
        let loss = trainer.train_step(dataset)?;
        let step = trainer.step();
        let due = step == cfg.steps || (cfg.eval_every > 0 && step % cfg.eval_every == 0);
        let mut eval_return = None;
        if let (true, Some(e)) = (due, env.as_deref_mut()) {
            let stats = evaluate_actor(e, &trainer.actor, cfg.target, cfg.eval_episodes, cfg.eval_seed)?;
            eval_return = Some(stats.mean);
            if best.as_ref().is_none_or(|(b, _)| stats.mean > *b) {
                best = Some((stats.mean, trainer.actor.clone()));
            }
        }
        metrics.push(MetricRow { step, loss, eval_return });
    }
    let (best_eval, best_actor) = match best {
        Some((r, a)) => (Some(r), a),
        None => (None, trainer.actor.clone()),
    };
    Ok(OfflineOutcome {
        actor: trainer.actor,
        best_actor,
        best_eval,
        metrics,
        adam: trainer.adam,
    })
}

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from("step,loss,eval_return\n");
    for r in rows {
        let e = r.eval_return.map(|v| v.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{}", r.step, r.loss, e).expect("writing to a String");
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub fraction: f64,
    pub taps: usize,
    pub seed: u64,
    pub eval_return: f64,
}

/// Kernel taps kept for context fraction `f` of a longest episode `lmax`.
pub fn taps_for_fraction(f: f64, lmax: usize) -> usize {
    ((f * lmax as f64).ceil() as usize).clamp(1, lmax.max(1))
}

/// Trains one actor per (fraction, seed) with convolution kernels truncated
/// to `ceil(f * Lmax)` taps and reports the final evaluation return.
pub fn context_ablation(
    cfg: &OfflineConfig,
    dataset: &Dataset,
    fractions: &[f64],
    seeds: &[u64],
    env: &mut dyn Env,
) -> Result<Vec<AblationRow>> {
    if fractions.is_empty() {
        return Err(Error::invalid("context ablation needs at least one fraction"));
    }
    if let Some(f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::invalid(format!("fraction {f} is outside (0, 1]")));
    }
    if seeds.is_empty() {
        return Err(Error::invalid("context ablation needs at least one seed"));
    }
    let lmax = dataset.max_len();
    let mut rows = Vec::new();
    for &f in fractions {
        let taps = taps_for_fraction(f, lmax);
        for &seed in seeds {
            let run = OfflineConfig {
                seed,
                kernel_taps: (taps < lmax).then_some(taps),
                eval_every: 0,
                ..cfg.clone()
            };
            let out = train_offline(&run, dataset, None)?;
            let stats = evaluate_actor(env, &out.actor, cfg.target, cfg.eval_episodes, cfg.eval_seed)?;
            rows.push(AblationRow {
                fraction: f,
                taps,
                seed,
                eval_return: stats.mean,
            });
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("fraction,taps,seed,eval_return\n");
    for r in rows {
        writeln!(s, "{},{},{},{}", r.fraction, r.taps, r.seed, r.eval_return).expect("writing to a String");
    }
    s
}
