use ssm_rl::data::Dataset;
use ssm_rl::env::{evaluate_actor, generate_dataset, DelayedCue, Env, PointMass, Tier};
use ssm_rl::finetune::{finetune, FinetuneConfig};
use ssm_rl::offline::{train_offline, OfflineConfig, OfflineTrainer};
use ssm_rl::stability::{eigen_csv, kernel_csv};

fn tiny(steps: u64) -> OfflineConfig {
    OfflineConfig {
        lr: 1e-2,
        warmup: 10,
        hidden: 8,
        state_size: 4,
        blocks: 1,
        steps,
        batch_size: 4,
        dropout: 0.0,
        eval_every: 0,
        ..OfflineConfig::default()
    }
}

#[test]
fn overfits_one_pointmass_episode() {
    let mut env = PointMass::new(50);
    let ds = Dataset::new(generate_dataset(&mut env, Tier::Expert, 1, 3).unwrap()).unwrap();
    assert_eq!(ds.max_len(), 50);
    let cfg = OfflineConfig {
        batch_size: 1,
        ..tiny(5000)
    };
    let out = train_offline(&cfg, &ds, None).unwrap();
    let losses = out.losses();
    let hit = losses.iter().position(|l| *l <= 1e-4);
    assert!(hit.is_some(), "best loss {}", losses.iter().copied().fold(f64::INFINITY, f64::min));
}

#[test]
fn loss_decreases_on_expert_data() {
    let mut env = PointMass::default();
    let ds = Dataset::new(generate_dataset(&mut env, Tier::Expert, 40, 2).unwrap()).unwrap();
    let out = train_offline(&tiny(150), &ds, None).unwrap();
    let losses = out.losses();
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[losses.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.5 * head, "mean loss {head} -> {tail}");
    assert!(losses.iter().all(|l| l.is_finite()));
}

#[test]
fn resumed_training_is_bit_identical() {
    let mut env = DelayedCue::new(12);
    let ds = Dataset::new(generate_dataset(&mut env, Tier::Medium, 10, 4).unwrap()).unwrap();
    let cfg = tiny(20);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");

    let mut straight = OfflineTrainer::new(cfg.clone(), &ds).unwrap();
    let mut split = OfflineTrainer::new(cfg.clone(), &ds).unwrap();
    for _ in 0..10 {
        straight.train_step(&ds).unwrap();
        split.train_step(&ds).unwrap();
    }
    split.save(&path).unwrap();
    let mut resumed = OfflineTrainer::restore(cfg, &path).unwrap();
    for _ in 0..10 {
        let a = straight.train_step(&ds).unwrap();
        let b = resumed.train_step(&ds).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(straight.actor.params, resumed.actor.params);
}

#[test]
fn finetuning_keeps_kernels_and_bookkeeping() {
    let mut env = PointMass::new(40);
    let ds = Dataset::new(generate_dataset(&mut env, Tier::Medium, 10, 5).unwrap()).unwrap();
    let actor = train_offline(&tiny(30), &ds, None).unwrap().actor;
    let cfg = FinetuneConfig {
        episodes: 3,
        critic_warmstart_steps: 10,
        warmstart_episodes: 1,
        k1: 20,
        k2: 30,
        updates_per_round: 5,
        batch_size: 16,
        critic_hidden: 16,
        eval_every: 1,
        eval_episodes: 2,
        ..FinetuneConfig::default()
    };
    let out = finetune(&cfg, &actor, &mut env).unwrap();

    assert!(out.warmstart_gate);
    assert_eq!(kernel_csv(&actor, 64, None).unwrap(), kernel_csv(&out.actor, 64, None).unwrap());
    assert_eq!(eigen_csv(&actor, None).unwrap(), eigen_csv(&out.actor, None).unwrap());
    assert_ne!(actor.params, out.actor.params);
    assert!(!out.buffer.is_empty());
    for it in out.buffer.iter() {
        assert_eq!(it.rtg, it.prev_rtg - it.reward);
        assert!(!it.terminal);
    }
    assert!(out.target_history.windows(2).all(|w| w[1] >= w[0]));
    assert_eq!(out.metrics.len(), 3);

    let before = evaluate_actor(&mut env, &actor, 1.0, 3, 9).unwrap();
    let best = evaluate_actor(&mut env, &out.best_actor, out.best_target, 3, 9).unwrap();
    assert!(before.mean.is_finite() && best.mean.is_finite());
}

#[test]
fn finetuning_rejects_truncated_kernels() {
    let mut env = PointMass::new(20);
    let ds = Dataset::new(generate_dataset(&mut env, Tier::Medium, 4, 5).unwrap()).unwrap();
    let cfg = OfflineConfig {
        kernel_taps: Some(3),
        ..tiny(2)
    };
    let actor = train_offline(&cfg, &ds, None).unwrap().actor;
    assert!(finetune(&FinetuneConfig::default(), &actor, &mut env).is_err());
}

#[test]
fn delayed_cue_expert_is_perfect() {
    let mut env = DelayedCue::new(30);
    let ds = Dataset::new(generate_dataset(&mut env, Tier::Expert, 20, 1).unwrap()).unwrap();
    assert_eq!(ds.mean_return(), 1.0);
    assert_eq!(env.spec().max_episode_len, 30);
}
