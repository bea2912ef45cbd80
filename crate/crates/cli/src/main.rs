use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ssm_rl::config::Configurable;
use ssm_rl::data::{load_dataset, save_dataset};
use ssm_rl::env::{evaluate_actor, generate_dataset, EnvKind, Tier};
use ssm_rl::finetune::{finetune, finetune_csv, FinetuneConfig};
use ssm_rl::offline::{
    ablation_csv, context_ablation, continue_training, metrics_csv, OfflineConfig, OfflineTrainer,
};
use ssm_rl::policy::ActorNetwork;
use ssm_rl::stability::{eigen_csv, kernel_csv, measure_forward_error, verify_theorem_bound, ErrorMode, BOUND_SLACK};
use ssm_rl::verify::{format_table, run_suite};
use ssm_rl::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "ssm-rl", version, about = "Diagonal state-space actors for return-conditioned RL")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Roll out a tier of episodes and write them as JSON lines.
    GenData(GenData),
    /// Train an actor on a trajectory dataset through the convolution view.
    TrainOffline(TrainOffline),
    /// Train with truncated kernels and report the return per context fraction.
    ContextAblation(ContextAblation),
    /// Actor-critic fine-tuning of a checkpoint through the recurrent view.
    Finetune(Finetune),
    /// Evaluate a checkpoint at a normalized return target.
    Eval(Eval),
    /// Measure the forward error of the scalar recurrence.
    Stability(Stability),
    /// Write the discretized convolution kernels of a checkpoint.
    KernelDump(KernelDump),
    /// Write the continuous and discrete eigenvalues of a checkpoint.
    EigenDump(EigenDump),
    /// Run the property suite and print a pass/fail table.
    Verify(Verify),
}

#[derive(Args, Debug)]
struct EnvArgs {
    /// pointmass or delayedcue.
    #[arg(long)]
    env: String,
    /// Episode length of delayedcue.
    #[arg(long)]
    horizon: Option<usize>,
}

fn make_env(name: &str, horizon: Option<usize>) -> Result<Box<dyn ssm_rl::env::Env>> {
    let mut kind: EnvKind = name.parse()?;
    if let (EnvKind::DelayedCue { horizon: h }, Some(v)) = (&mut kind, horizon) {
        if v == 0 {
            return Err(Error::Invalid("horizon must be >= 1".into()));
        }
        *h = v;
    }
    Ok(kind.make())
}

#[derive(Args, Debug)]
struct GenData {
    #[command(flatten)]
    env: EnvArgs,
    /// expert, medium, replay or random.
    #[arg(long)]
    tier: String,
    #[arg(long, default_value_t = 1000)]
    episodes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainingOverrides {
    /// `key = value` file applied before flags.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture as `n=64,h=64,blocks=3`.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Any configuration key as `key=value`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn apply_overrides<C: Configurable>(cfg: &mut C, o: &TrainingOverrides) -> Result<()> {
    if let Some(p) = &o.config {
        cfg.apply_file(p)?;
    }
    let flags = [
        ("arch", o.arch.clone()),
        ("seed", o.seed.map(|v| v.to_string())),
        ("steps", o.steps.map(|v| v.to_string())),
        ("lr", o.lr.map(|v| v.to_string())),
        ("batch_size", o.batch.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    apply_sets(cfg, &o.set)
}

fn apply_sets<C: Configurable>(cfg: &mut C, sets: &[String]) -> Result<()> {
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Invalid(format!("--set expects key=value, got `{kv}`")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    Ok(())
}

#[derive(Args, Debug)]
struct TrainOffline {
    /// Trajectory dataset (JSON lines).
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write; the optimizer state goes to `<out>.opt`.
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint and its `.opt` file.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Environment for periodic evaluation.
    #[arg(long)]
    env: Option<String>,
    #[arg(long)]
    horizon: Option<usize>,
    /// Where to write the best evaluated actor.
    #[arg(long)]
    best: Option<PathBuf>,
    /// Metrics CSV (step, loss, eval_return).
    #[arg(long)]
    metrics: Option<PathBuf>,
    #[command(flatten)]
    overrides: TrainingOverrides,
}

#[derive(Args, Debug)]
struct ContextAblation {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    env: EnvArgs,
    /// Comma-separated context fractions.
    #[arg(long, default_value = "1.0,0.5,0.25,0.1", value_delimiter = ',')]
    fractions: Vec<f64>,
    /// Number of training seeds, counted up from `--seed`.
    #[arg(long, default_value_t = 3)]
    seeds: u64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    overrides: TrainingOverrides,
}

#[derive(Args, Debug)]
struct Finetune {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    env: EnvArgs,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Where to write the best fine-tuned actor.
    #[arg(long)]
    out: PathBuf,
    /// Metrics CSV (episode, eval_return, critic_loss, actor_obj, sigma).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct Eval {
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    env: EnvArgs,
    /// Normalized return target.
    #[arg(long, default_value_t = 1.0)]
    target: f64,
    #[arg(long, default_value_t = 10)]
    episodes: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args, Debug)]
struct Stability {
    #[arg(long)]
    lambda: f64,
    #[arg(long, default_value_t = 100_000)]
    len: usize,
    /// naive-f32, naive-f64 or compensated-f32.
    #[arg(long, default_value = "naive-f32")]
    mode: String,
    #[arg(long, default_value_t = 100)]
    seeds: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct KernelDump {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 1000)]
    len: usize,
    /// Only the first this many channels per block.
    #[arg(long)]
    channels: Option<usize>,
    /// Accepted for uniformity; the dump is deterministic.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EigenDump {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    channels: Option<usize>,
    /// Accepted for uniformity; the dump is deterministic.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct Verify {
    /// Smaller counts and lengths.
    #[arg(long)]
    quick: bool,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

fn write(path: &Path, body: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, body)?;
    Ok(())
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::GenData(a) => {
            let mut env = make_env(&a.env.env, a.env.horizon)?;
            let tier: Tier = a.tier.parse()?;
            let trajs = generate_dataset(env.as_mut(), tier, a.episodes, a.seed)?;
            if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            save_dataset(&a.out, &trajs)?;
            let mean = trajs.iter().map(|t| t.total_return()).sum::<f64>() / trajs.len() as f64;
            println!("wrote {} episodes to {} (mean return {mean})", trajs.len(), a.out.display());
        }
        Command::TrainOffline(a) => {
            let mut cfg = OfflineConfig::default();
            apply_overrides(&mut cfg, &a.overrides)?;
            cfg.validate()?;
            let ds = load_dataset(&a.data)?;
            let trainer = match &a.resume {
                Some(p) => OfflineTrainer::restore(cfg.clone(), p)?,
                None => OfflineTrainer::new(cfg.clone(), &ds)?,
            };
            let mut env = a.env.as_deref().map(|e| make_env(e, a.horizon)).transpose()?;
            let env_ref: Option<&mut dyn ssm_rl::env::Env> = match env.as_mut() {
                Some(e) => Some(e.as_mut()),
                None => None,
            };
            let out = continue_training(trainer, &ds, env_ref)?;
            let final_trainer = OfflineTrainer {
                cfg,
                actor: out.actor.clone(),
                adam: out.adam.clone(),
            };
            final_trainer.save(&a.out)?;
            if let (Some(p), Some(_)) = (&a.best, out.best_eval) {
                out.best_actor.save(p)?;
            }
            if let Some(p) = &a.metrics {
                write(p, &metrics_csv(&out.metrics))?;
            }
            let last_loss = out.metrics.last().map(|m| m.loss);
            println!(
                "trained to step {} (final loss {}, best eval {})",
                final_trainer.step(),
                last_loss.map_or("n/a".into(), |l| l.to_string()),
                out.best_eval.map_or("n/a".into(), |r| r.to_string())
            );
        }
        Command::ContextAblation(a) => {
            let mut cfg = OfflineConfig::default();
            apply_overrides(&mut cfg, &a.overrides)?;
            cfg.validate()?;
            let ds = load_dataset(&a.data)?;
            let mut env = make_env(&a.env.env, a.env.horizon)?;
            let seeds: Vec<u64> = (0..a.seeds).map(|i| cfg.seed + i).collect();
            let rows = context_ablation(&cfg, &ds, &a.fractions, &seeds, env.as_mut())?;
            let csv = ablation_csv(&rows);
            write(&a.out, &csv)?;
            print!("{csv}");
        }
        Command::Finetune(a) => {
            let mut cfg = FinetuneConfig::default();
            if let Some(p) = &a.config {
                cfg.apply_file(p)?;
            }
            if let Some(e) = a.episodes {
                cfg.episodes = e;
            }
            if let Some(s) = a.seed {
                cfg.seed = s;
            }
            apply_sets(&mut cfg, &a.set)?;
            cfg.validate()?;
            let actor = ActorNetwork::load(&a.ckpt)?;
            let mut env = make_env(&a.env.env, a.env.horizon)?;
            let out = finetune(&cfg, &actor, env.as_mut())?;
            out.best_actor.save(&a.out)?;
            if let Some(p) = &a.metrics {
                write(p, &finetune_csv(&out.metrics))?;
            }
            println!(
                "best validation return {} at normalized target {}; warm-start gate {}; {} diverged episodes",
                out.best_eval,
                out.best_target,
                if out.warmstart_gate { "held" } else { "violated" },
                out.diverged_episodes
            );
        }
        Command::Eval(a) => {
            let actor = ActorNetwork::load(&a.ckpt)?;
            let mut env = make_env(&a.env.env, a.env.horizon)?;
            let stats = evaluate_actor(env.as_mut(), &actor, a.target, a.episodes, a.seed)?;
            println!("mean {} std {} episodes {}", stats.mean, stats.std, a.episodes);
        }
        Command::Stability(a) => {
            let mode: ErrorMode = a.mode.parse()?;
            let trace = measure_forward_error(a.lambda, a.len, mode, a.seed, a.seeds)?;
            write(&a.out, &trace.to_csv())?;
            if let Some(t) = trace.overflow_at {
                println!("overflow at step {t}; bound not checked");
            } else if mode.is_naive() {
                let rep = verify_theorem_bound(&trace, BOUND_SLACK)?;
                println!(
                    "bound {} (max ratio {}, first violation {:?}); final error {:e}",
                    if rep.passed { "holds" } else { "violated" },
                    rep.max_ratio,
                    rep.first_violation,
                    trace.final_error()
                );
                return Ok(rep.passed);
            } else {
                println!(
                    "final error {:e} (relative {:e})",
                    trace.final_error(),
                    trace.final_relative_error()
                );
            }
        }
        Command::KernelDump(a) => {
            let actor = ActorNetwork::load(&a.ckpt)?;
            write(&a.out, &kernel_csv(&actor, a.len, a.channels)?)?;
        }
        Command::EigenDump(a) => {
            let actor = ActorNetwork::load(&a.ckpt)?;
            write(&a.out, &eigen_csv(&actor, a.channels)?)?;
        }
        Command::Verify(a) => {
            let rows = run_suite(a.quick, a.seed);
            print!("{}", format_table(&rows));
            return Ok(rows.iter().all(|r| r.passed));
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
