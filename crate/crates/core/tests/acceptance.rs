//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. `ACCEPTANCE_ONLY=5,6` runs a subset.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_bigint::BigInt;
use num_rational::BigRational;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssm_rl::data::{compute_returns_to_go, Dataset, NormStats};
use ssm_rl::env::{
    evaluate_actor, evaluate_policy, generate_dataset, DelayedCue, Env, PointMass, RandomPolicy, Tier,
};
use ssm_rl::finetune::{finetune, FinetuneConfig, FinetuneOutcome, ReplayBuffer};
use ssm_rl::offline::{context_ablation, train_offline, OfflineConfig};
use ssm_rl::policy::{ActorConfig, ActorNetwork};
use ssm_rl::ssm::SumMode;
use ssm_rl::stability::{
    eigen_csv, kernel_csv, measure_forward_error, verify_theorem_bound, ErrorMode, BOUND_SLACK,
};
use ssm_rl::verify::{
    actor_gradient_check, discretization_exceptions, primitive_gradient_checks, rtg_matches_integer_oracle,
    view_equivalence, GRAD_TOL, VIEW_TOL,
};

type Outcome = ssm_rl::Result<(bool, String)>;

struct Criterion {
    id: u32,
    name: &'static str,
    budget: Option<Duration>,
    run: fn() -> Outcome,
}

fn minutes(m: u64) -> Option<Duration> {
    Some(Duration::from_secs(60 * m))
}

fn view_equivalence_check() -> Outcome {
    let worst = view_equivalence(100, &[16, 256, 4096], 1)?;
    Ok((worst <= VIEW_TOL, format!("max abs {worst:.3e} (tol {VIEW_TOL:.0e}), 100 systems")))
}

fn gradient_fidelity() -> Outcome {
    let mut worst = (0.0f64, String::new());
    for seed in 0..20 {
        for (name, r) in primitive_gradient_checks(seed)? {
            if r.max_rel_err >= worst.0 {
                worst = (r.max_rel_err, format!("{name} {}", r.worst));
            }
        }
        let r = actor_gradient_check(seed)?;
        if r.max_rel_err >= worst.0 {
            worst = (r.max_rel_err, format!("actor {}", r.worst));
        }
    }
    Ok((
        worst.0 <= GRAD_TOL,
        format!("max rel {:.3e} at {} (tol {GRAD_TOL:.0e}), 20 seeds", worst.0, worst.1),
    ))
}

fn forward_error_bound() -> Outcome {
    let (len, seeds) = (100_000, 100);
    let mut ok = true;
    let mut ratios = Vec::new();
    for lambda in [0.5, 0.8, 1.0] {
        let tr = measure_forward_error(lambda, len, ErrorMode::NaiveF32, 1, seeds)?;
        let rep = verify_theorem_bound(&tr, BOUND_SLACK)?;
        ok &= rep.passed;
        ratios.push(format!("{lambda}: {:.3}", rep.max_ratio));
    }
    let naive = measure_forward_error(1.0, len, ErrorMode::NaiveF32, 1, seeds)?;
    let comp = measure_forward_error(1.0, len, ErrorMode::CompensatedF32, 1, seeds)?;
    let gain = naive.final_error() / comp.final_error();
    Ok((
        ok && gain >= 100.0,
        format!("max measured/bound {{{}}}, compensated gain {gain:.3e}", ratios.join(", ")),
    ))
}

fn discretization_stability() -> Outcome {
    let bad = discretization_exceptions(10_000, 1)?;
    Ok((bad == 0, format!("{bad} exceptions in 10000 pairs")))
}

fn offline_pointmass() -> Outcome {
    let mut env = PointMass::default();
    let ds = Dataset::new(generate_dataset(&mut env, Tier::Expert, 1000, 7)?)?;
    let eval_seed = 999;
    let mut random_policy = RandomPolicy::new(&env.spec());
    let random = evaluate_policy(&mut env, &mut random_policy, 0.0, 10, eval_seed)?.mean;
    let expert = ds.mean_return();
    let mut scores = Vec::new();
    for seed in 1..=3 {
        let cfg = OfflineConfig {
            lr: 1e-3,
            warmup: 100,
            hidden: 32,
            state_size: 16,
            steps: 2000,
            batch_size: 8,
            dropout: 0.0,
            eval_every: 0,
            eval_seed,
            seed,
            ..OfflineConfig::default()
        };
        let out = train_offline(&cfg, &ds, None)?;
        let ret = evaluate_actor(&mut env, &out.actor, 1.0, 10, eval_seed)?.mean;
        scores.push((ret - random) / (expert - random));
    }
    let passed = scores.iter().all(|s| *s >= 0.9);
    Ok((
        passed,
        format!("normalized scores {scores:.3?} (expert {expert:.3}, random {random:.3}), need >= 0.9"),
    ))
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|a, b| xs[*a].total_cmp(&xs[*b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in &idx[i..=j] {
            ranks[*k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

fn long_range_ablation() -> Outcome {
    let mut env = DelayedCue::default();
    let ds = Dataset::new(generate_dataset(&mut env, Tier::Expert, 200, 7)?)?;
    let cfg = OfflineConfig {
        lr: 3e-3,
        warmup: 50,
        hidden: 16,
        state_size: 16,
        steps: 1000,
        batch_size: 8,
        dropout: 0.0,
        eval_seed: 999,
        ..OfflineConfig::default()
    };
    let fractions = [1.0, 0.5, 0.25, 0.1];
    let rows = context_ablation(&cfg, &ds, &fractions, &[1, 2, 3], &mut env)?;
    let mean = |f: f64| {
        let rs: Vec<f64> = rows.iter().filter(|r| r.fraction == f).map(|r| r.eval_return).collect();
        rs.iter().sum::<f64>() / rs.len() as f64
    };
    let means: Vec<f64> = fractions.iter().map(|f| mean(*f)).collect();
    let monotone = means.windows(2).all(|w| w[0] >= w[1]);
    let xs: Vec<f64> = rows.iter().map(|r| r.fraction).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.eval_return).collect();
    let rho = spearman(&xs, &ys);
    let passed = means[0] > 0.9 && means[3] < 0.2 && monotone && rho >= 0.8;
    Ok((
        passed,
        format!("mean return by f {fractions:?} = {means:.3?}, spearman {rho:.3}, horizon {}", ds.max_len()),
    ))
}

fn pointmass_medium_actor() -> ssm_rl::Result<ActorNetwork> {
    let mut env = PointMass::default();
    let ds = Dataset::new(generate_dataset(&mut env, Tier::Medium, 300, 7)?)?;
    let cfg = OfflineConfig {
        lr: 1e-3,
        warmup: 100,
        hidden: 32,
        state_size: 16,
        steps: 1500,
        batch_size: 8,
        dropout: 0.0,
        eval_every: 0,
        ..OfflineConfig::default()
    };
    Ok(train_offline(&cfg, &ds, None)?.actor)
}

fn finetune_pointmass() -> Outcome {
    let initial = pointmass_medium_actor()?;
    let mut env = PointMass::default();
    let test_seed = 777;
    let before = evaluate_actor(&mut env, &initial, 1.0, 10, test_seed)?.mean;
    let kernels_before = kernel_csv(&initial, 256, None)?;
    let eigen_before = eigen_csv(&initial, None)?;
    let mut deltas = Vec::new();
    let mut frozen = true;
    let mut gates = true;
    for seed in 1..=5 {
        let cfg = FinetuneConfig {
            episodes: 5,
            critic_warmstart_steps: 500,
            warmstart_episodes: 5,
            eval_every: 1,
            eval_episodes: 5,
            seed,
            ..FinetuneConfig::default()
        };
        let out = finetune(&cfg, &initial, &mut env)?;
        let after = evaluate_actor(&mut env, &out.best_actor, out.best_target, 10, test_seed)?.mean;
        deltas.push(after - before);
        gates &= out.warmstart_gate;
        for a in [&out.actor, &out.best_actor] {
            frozen &= kernel_csv(a, 256, None)? == kernels_before && eigen_csv(a, None)? == eigen_before;
        }
    }
    let mean_delta = deltas.iter().sum::<f64>() / deltas.len() as f64;
    Ok((
        mean_delta >= 0.0 && frozen && gates,
        format!(
            "before {before:.3}, paired deltas {deltas:.3?}, mean {mean_delta:.3}, kernels frozen {frozen}, warm-start gate {gates}"
        ),
    ))
}

fn least_squares_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

fn step_latency() -> Outcome {
    let len = 1000;
    let repeats = 5;
    let mut cfg = ActorConfig::new(2, 1);
    cfg.dropout = 0.0;
    let actor = ActorNetwork::new(cfg, NormStats::identity(2), 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let states: Vec<Vec<f64>> = (0..len).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
    let mut samples = vec![Vec::with_capacity(repeats); len];
    for _ in 0..=repeats {
        let mut carry = actor.zero_carry();
        let mut prev = vec![0.0];
        let mut rtg = 1.0;
        let mut times = Vec::with_capacity(len);
        for s in &states {
            let t0 = Instant::now();
            let (a, c) = actor.forward_step(&carry, s, &prev, rtg, SumMode::Compensated)?;
            times.push(t0.elapsed().as_secs_f64());
            carry = c;
            prev = a;
            rtg -= 1e-3;
        }
        for (acc, t) in samples.iter_mut().zip(times) {
            acc.push(t);
        }
    }
    let medians: Vec<f64> = samples
        .into_iter()
        .map(|mut v| {
            // the first pass warms caches
            v.remove(0);
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect();
    let mean = medians.iter().sum::<f64>() / len as f64;
    let slope = least_squares_slope(&medians);
    Ok((
        slope <= 0.01 * mean,
        format!(
            "mean step {:.1} us, slope {:.3e} us/step ({:.4}% of mean), drift over episode {:.2}%",
            mean * 1e6,
            slope * 1e6,
            100.0 * slope / mean,
            100.0 * slope * len as f64 / mean
        ),
    ))
}

fn rational_suffix_oracle(len: usize, seed: u64) -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rewards: Vec<f64> = (0..len).map(|_| rng.random_range(-(1i64 << 20)..(1i64 << 20)) as f64 / 1024.0).collect();
    let got = compute_returns_to_go(&rewards);
    let mut acc = BigRational::from_integer(BigInt::from(0));
    for i in (0..len).rev() {
        acc += BigRational::from_float(rewards[i]).expect("finite reward");
        if BigRational::from_float(got[i]).expect("finite suffix") != acc {
            return false;
        }
    }
    true
}

fn buffer_bookkeeping(buffer: &ReplayBuffer) -> (usize, usize) {
    let bad = buffer.iter().filter(|it| it.rtg != it.prev_rtg - it.reward).count();
    (buffer.len(), bad)
}

fn short_finetune() -> ssm_rl::Result<FinetuneOutcome> {
    let mut env = PointMass::default();
    let ds = Dataset::new(generate_dataset(&mut env, Tier::Medium, 20, 11)?)?;
    let spec = env.spec();
    let mut cfg = ActorConfig::new(spec.state_dim, spec.action_dim);
    cfg.hidden = 16;
    cfg.state_size = 8;
    let actor = ActorNetwork::new(cfg, NormStats::from_trajectories(&ds.trajectories)?, 5)?;
    let fc = FinetuneConfig {
        episodes: 4,
        critic_warmstart_steps: 50,
        warmstart_episodes: 2,
        updates_per_round: 50,
        eval_every: 2,
        eval_episodes: 2,
        seed: 3,
        ..FinetuneConfig::default()
    };
    finetune(&fc, &actor, &mut env)
}

fn returns_to_go_bookkeeping() -> Outcome {
    let oracle = (0..10).all(|s| rational_suffix_oracle(1000, s) && rtg_matches_integer_oracle(1000, s));
    let out = short_finetune()?;
    let (items, bad) = buffer_bookkeeping(&out.buffer);
    Ok((
        oracle && bad == 0 && items > 0,
        format!("suffix-sum oracle (L 1000, 10 seeds) {oracle}, buffer items {items}, mismatches {bad}"),
    ))
}

fn selected() -> Option<Vec<u32>> {
    let raw = std::env::var("ACCEPTANCE_ONLY").ok()?;
    Some(raw.split(',').filter_map(|s| s.trim().parse().ok()).collect())
}

fn main() -> ExitCode {
    let criteria = [
        Criterion { id: 1, name: "view equivalence", budget: minutes(1), run: view_equivalence_check },
        Criterion { id: 2, name: "gradient fidelity", budget: minutes(2), run: gradient_fidelity },
        Criterion { id: 3, name: "forward error bound", budget: minutes(5), run: forward_error_bound },
        Criterion { id: 4, name: "discretization stability", budget: None, run: discretization_stability },
        Criterion { id: 5, name: "offline training", budget: minutes(30), run: offline_pointmass },
        Criterion { id: 6, name: "long-range context", budget: minutes(45), run: long_range_ablation },
        Criterion { id: 7, name: "fine-tuning", budget: minutes(60), run: finetune_pointmass },
        Criterion { id: 8, name: "step latency flatness", budget: None, run: step_latency },
        Criterion { id: 9, name: "returns-to-go bookkeeping", budget: None, run: returns_to_go_bookkeeping },
    ];
    let only = selected();
    let mut failed = 0;
    for c in criteria.iter().filter(|c| only.as_ref().is_none_or(|o| o.contains(&c.id))) {
        let t0 = Instant::now();
        let (ok, detail) = (c.run)().unwrap_or_else(|e| (false, format!("error: {e}")));
        let elapsed = t0.elapsed();
        let in_budget = c.budget.is_none_or(|b| elapsed <= b);
        let passed = ok && in_budget;
        if !passed {
            failed += 1;
        }
        let budget = c.budget.map(|b| format!(" / {}s", b.as_secs())).unwrap_or_default();
        println!(
            "criterion {}: {} {} [{:.1}s{budget}] {detail}",
            c.id,
            if passed { "PASS" } else { "FAIL" },
            c.name,
            elapsed.as_secs_f64()
        );
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
