//! Trajectories, returns-to-go, dataset files, normalization and batching.
//!
//! Dataset files are JSON Lines with one episode per line:
//! `{"states": [[..], ..], "actions": [[..], ..], "rewards": [..]}`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const STD_FLOOR: f64 = 1e-6;

/// Suffix sums `R_i = sum_{t >= i} r_t`, accumulated right to left.
pub fn compute_returns_to_go(rewards: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for (o, r) in out.iter_mut().zip(rewards).rev() {
        acc += r;
        *o = acc;
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub returns_to_go: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Episode {
    states: Vec<Vec<f64>>,
    actions: Vec<Vec<f64>>,
    rewards: Vec<f64>,
}

impl Trajectory {
    pub fn new(states: Vec<Vec<f64>>, actions: Vec<Vec<f64>>, rewards: Vec<f64>) -> Result<Self> {
        let l = rewards.len();
        if states.len() != l || actions.len() != l {
            return Err(Error::shape(
                "Trajectory::new",
                format!("{} states, {} actions, {l} rewards", states.len(), actions.len()),
            ));
        }
        for (what, rows) in [("state", &states), ("action", &actions)] {
            if let Some(first) = rows.first() {
                if rows.iter().any(|r| r.len() != first.len()) {
                    return Err(Error::shape("Trajectory::new", format!("ragged {what} rows")));
                }
            }
        }
        let finite = states
            .iter()
            .chain(&actions)
            .flatten()
            .chain(&rewards)
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("trajectory contains non-finite values"));
        }
        let returns_to_go = compute_returns_to_go(&rewards);
        Ok(Self {
            states,
            actions,
            rewards,
            returns_to_go,
        })
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn total_return(&self) -> f64 {
        self.returns_to_go.first().copied().unwrap_or(0.0)
    }

    pub fn state_dim(&self) -> Option<usize> {
        self.states.first().map(Vec::len)
    }

    pub fn action_dim(&self) -> Option<usize> {
        self.actions.first().map(Vec::len)
    }
}

/// State standardization and return scaling derived from a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub state_mean: Vec<f64>,
    pub state_std: Vec<f64>,
    /// Divisor applied to returns-to-go before they enter the policy.
    pub return_scale: f64,
    /// Lowest and highest episode return in the dataset.
    pub return_min: f64,
    pub return_best: f64,
}

impl NormStats {
    /// Identity normalization for `state_dim` features.
    pub fn identity(state_dim: usize) -> Self {
        Self {
            state_mean: vec![0.0; state_dim],
            state_std: vec![1.0; state_dim],
            return_scale: 1.0,
            return_min: 0.0,
            return_best: 1.0,
        }
    }

    pub fn from_trajectories(trajs: &[Trajectory]) -> Result<Self> {
        let dim = trajs
            .iter()
            .find_map(Trajectory::state_dim)
            .ok_or_else(|| Error::invalid("dataset has no states"))?;
        let count: usize = trajs.iter().map(Trajectory::len).sum();
        let mut mean = vec![0.0; dim];
        for s in trajs.iter().flat_map(|t| &t.states) {
            for (m, v) in mean.iter_mut().zip(s) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let mut var = vec![0.0; dim];
        for s in trajs.iter().flat_map(|t| &t.states) {
            for ((acc, v), m) in var.iter_mut().zip(s).zip(&mean) {
                *acc += (v - m) * (v - m);
            }
        }
        let std = var
            .iter()
            .map(|v| (v / count as f64).sqrt().max(STD_FLOOR))
            .collect();
        let returns: Vec<f64> = trajs.iter().filter(|t| !t.is_empty()).map(Trajectory::total_return).collect();
        let best = returns.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let min = returns.iter().copied().fold(f64::INFINITY, f64::min);
        let scale = trajs
            .iter()
            .flat_map(|t| &t.returns_to_go)
            .fold(0.0f64, |a, r| a.max(r.abs()));
        Ok(Self {
            state_mean: mean,
            state_std: std,
            return_scale: if scale > 0.0 { scale } else { 1.0 },
            return_min: min,
            return_best: best,
        })
    }

    pub fn normalize_state(&self, s: &[f64]) -> Vec<f64> {
        s.iter()
            .zip(&self.state_mean)
            .zip(&self.state_std)
            .map(|((v, m), sd)| (v - m) / sd)
            .collect()
    }

    pub fn normalize_rtg(&self, r: f64) -> f64 {
        r / self.return_scale
    }

    /// Return corresponding to a normalized target, where 0 is the worst and
    /// 1 the best dataset episode.
    pub fn target_return(&self, target: f64) -> f64 {
        let span = self.return_best - self.return_min;
        if span.abs() > 1e-12 {
            self.return_min + target * span
        } else {
            target * self.return_best
        }
    }

    /// Inverse of [`NormStats::target_return`].
    pub fn normalized_return(&self, ret: f64) -> f64 {
        let span = self.return_best - self.return_min;
        if span.abs() > 1e-12 {
            (ret - self.return_min) / span
        } else if self.return_best != 0.0 {
            ret / self.return_best
        } else {
            ret
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    pub stats: NormStats,
}

impl Dataset {
    pub fn new(trajectories: Vec<Trajectory>) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::invalid("dataset is empty"));
        }
        let sd = trajectories.iter().find_map(Trajectory::state_dim);
        let ad = trajectories.iter().find_map(Trajectory::action_dim);
        for (i, t) in trajectories.iter().enumerate() {
            if t.state_dim().is_some_and(|d| Some(d) != sd) || t.action_dim().is_some_and(|d| Some(d) != ad) {
                return Err(Error::shape("Dataset::new", format!("episode {i} has different dimensions")));
            }
        }
        let stats = NormStats::from_trajectories(&trajectories)?;
        Ok(Self { trajectories, stats })
    }

    pub fn state_dim(&self) -> usize {
        self.stats.state_mean.len()
    }

    pub fn action_dim(&self) -> usize {
        self.trajectories.iter().find_map(Trajectory::action_dim).unwrap_or(0)
    }

    pub fn max_len(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).max().unwrap_or(0)
    }

    pub fn mean_return(&self) -> f64 {
        let n = self.trajectories.len() as f64;
        self.trajectories.iter().map(Trajectory::total_return).sum::<f64>() / n
    }
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    let mut trajs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let ep: Episode = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let t = Trajectory::new(ep.states, ep.actions, ep.rewards).map_err(|e| parse_err(e.to_string()))?;
        trajs.push(t);
    }
    if trajs.is_empty() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: "dataset is empty".into(),
        });
    }
    Dataset::new(trajs)
}

pub fn save_dataset(path: &Path, trajs: &[Trajectory]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for t in trajs {
        let ep = Episode {
            states: t.states.clone(),
            actions: t.actions.clone(),
            rewards: t.rewards.clone(),
        };
        serde_json::to_writer(&mut w, &ep).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Tail-padded batch of raw (unnormalized) trajectory slices.
///
/// Row `b`, position `i` holds `s_i`, the previous action `a_{i-1}` (zero at
/// `i = 0`), the return still to be collected from step `i` on, and the
/// target action `a_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub max_len: usize,
    pub state_dim: usize,
    pub action_dim: usize,
    /// `[batch * max_len * state_dim]`
    pub states: Vec<f64>,
    /// `[batch * max_len * action_dim]`
    pub prev_actions: Vec<f64>,
    /// `[batch * max_len]`
    pub rtg: Vec<f64>,
    /// `[batch * max_len * action_dim]`
    pub actions: Vec<f64>,
    /// `[batch * max_len]`, true on real positions.
    pub mask: Vec<bool>,
    pub lengths: Vec<usize>,
}

impl Batch {
    pub fn from_trajectories(trajs: &[&Trajectory], state_dim: usize, action_dim: usize) -> Result<Self> {
        let b = trajs.len();
        let lmax = trajs.iter().map(|t| t.len()).max().unwrap_or(0);
        let mut out = Self {
            batch: b,
            max_len: lmax,
            state_dim,
            action_dim,
            states: vec![0.0; b * lmax * state_dim],
            prev_actions: vec![0.0; b * lmax * action_dim],
            rtg: vec![0.0; b * lmax],
            actions: vec![0.0; b * lmax * action_dim],
            mask: vec![false; b * lmax],
            lengths: trajs.iter().map(|t| t.len()).collect(),
        };
        for (r, t) in trajs.iter().enumerate() {
            if t.state_dim().is_some_and(|d| d != state_dim) || t.action_dim().is_some_and(|d| d != action_dim) {
                return Err(Error::shape("Batch", "trajectory dimensions do not match"));
            }
            for i in 0..t.len() {
                let row = r * lmax + i;
                out.states[row * state_dim..(row + 1) * state_dim].copy_from_slice(&t.states[i]);
                out.actions[row * action_dim..(row + 1) * action_dim].copy_from_slice(&t.actions[i]);
                if i > 0 {
                    out.prev_actions[row * action_dim..(row + 1) * action_dim].copy_from_slice(&t.actions[i - 1]);
                }
                out.rtg[row] = t.returns_to_go[i];
                out.mask[row] = true;
            }
        }
        Ok(out)
    }

    /// Per-position loss weights: each non-empty trajectory contributes the
    /// mean over its real positions, and trajectories are averaged.
    pub fn loss_weights(&self) -> Vec<f64> {
        let nonempty = self.lengths.iter().filter(|&&l| l > 0).count();
        let mut w = vec![0.0; self.batch * self.max_len];
        for (r, &l) in self.lengths.iter().enumerate() {
            for i in 0..l {
                w[r * self.max_len + i] = 1.0 / (nonempty as f64 * l as f64);
            }
        }
        w
    }
}

/// Uniform sampling of trajectory batches with replacement.
pub struct BatchSampler<'a, R> {
    trajs: &'a [Trajectory],
    batch_size: usize,
    state_dim: usize,
    action_dim: usize,
    rng: R,
}

impl<'a, R: Rng> BatchSampler<'a, R> {
    pub fn new(dataset: &'a Dataset, batch_size: usize, rng: R) -> Result<Self> {
        if batch_size == 0 {
            return Err(Error::invalid("batch size must be >= 1"));
        }
        Ok(Self {
            trajs: &dataset.trajectories,
            batch_size,
            state_dim: dataset.state_dim(),
            action_dim: dataset.action_dim(),
            rng,
        })
    }

    pub fn rng_mut(&mut self) -> &mut R {
        &mut self.rng
    }

    pub fn sample_indices(&mut self) -> Vec<usize> {
        (0..self.batch_size)
            .map(|_| self.rng.random_range(0..self.trajs.len()))
            .collect()
    }

    pub fn next_batch(&mut self) -> Batch {
        let idx = self.sample_indices();
        let picked: Vec<&Trajectory> = idx.iter().map(|&i| &self.trajs[i]).collect();
        Batch::from_trajectories(&picked, self.state_dim, self.action_dim).expect("dataset dimensions are validated")
    }
}

impl<R: Rng> Iterator for BatchSampler<'_, R> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        Some(self.next_batch())
    }
}

/// Endless iterator of uniformly sampled batches.
pub fn make_batches<R: Rng>(dataset: &Dataset, batch_size: usize, rng: R) -> Result<BatchSampler<'_, R>> {
    BatchSampler::new(dataset, batch_size, rng)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn traj(l: usize, off: f64) -> Trajectory {
        Trajectory::new(
            (0..l).map(|i| vec![i as f64 + off, 1.0]).collect(),
            (0..l).map(|i| vec![0.1 * i as f64]).collect(),
            (0..l).map(|i| i as f64 - off).collect(),
        )
        .unwrap()
    }

    #[test]
    fn returns_to_go_examples() {
        assert_eq!(compute_returns_to_go(&[1.0, 2.0, 3.0]), vec![6.0, 5.0, 3.0]);
        assert_eq!(compute_returns_to_go(&[0.0; 4]), vec![0.0; 4]);
        assert!(compute_returns_to_go(&[]).is_empty());
    }

    #[test]
    fn trajectory_validation() {
        assert!(Trajectory::new(vec![vec![0.0]], vec![], vec![1.0]).is_err());
        assert!(Trajectory::new(vec![vec![f64::NAN]], vec![vec![0.0]], vec![1.0]).is_err());
        let t = traj(1, 0.0);
        assert_eq!(t.len(), 1);
        assert_eq!(t.returns_to_go, t.rewards);
    }

    #[test]
    fn standardized_states_have_unit_moments() {
        let ds = Dataset::new(vec![traj(5, 0.0), traj(9, 3.0)]).unwrap();
        let normed: Vec<Vec<f64>> = ds
            .trajectories
            .iter()
            .flat_map(|t| &t.states)
            .map(|s| ds.stats.normalize_state(s))
            .collect();
        let n = normed.len() as f64;
        let mean0: f64 = normed.iter().map(|s| s[0]).sum::<f64>() / n;
        let var0: f64 = normed.iter().map(|s| (s[0] - mean0).powi(2)).sum::<f64>() / n;
        assert!(mean0.abs() <= 1e-9);
        assert!((var0.sqrt() - 1.0).abs() <= 1e-6);
        // Constant feature hits the floor rather than dividing by zero.
        assert_eq!(ds.stats.state_std[1], STD_FLOOR);
    }

    #[test]
    fn target_mapping() {
        let mut s = NormStats::identity(1);
        s.return_min = -100.0;
        s.return_best = -20.0;
        assert_eq!(s.target_return(1.0), -20.0);
        assert_eq!(s.target_return(0.0), -100.0);
        assert_eq!(s.target_return(0.5), -60.0);
        assert_eq!(s.normalized_return(-60.0), 0.5);
        s.return_min = 1.0;
        s.return_best = 1.0;
        assert_eq!(s.target_return(0.5), 0.5);
    }

    #[test]
    fn equal_lengths_give_full_mask_and_tail_padding_otherwise() {
        let ds = Dataset::new(vec![traj(4, 0.0), traj(4, 1.0)]).unwrap();
        let mut it = make_batches(&ds, 3, ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = it.next().unwrap();
        assert!(b.mask.iter().all(|&m| m));

        let (a, c) = (traj(2, 0.0), traj(4, 1.0));
        let b = Batch::from_trajectories(&[&a, &c], 2, 1).unwrap();
        assert_eq!(b.max_len, 4);
        assert_eq!(b.mask, vec![true, true, false, false, true, true, true, true]);
        assert_eq!(b.prev_actions[0], 0.0);
        assert_eq!(b.prev_actions[5], c.actions[0][0]);
        assert_eq!(b.rtg[4], c.returns_to_go[0]);
        let w = b.loss_weights();
        assert_eq!(w[..4], [0.25, 0.25, 0.0, 0.0]);
        assert_eq!(w[4..], [0.125; 4]);
    }

    #[test]
    fn default_batch_size() {
        assert_eq!(DEFAULT_BATCH_SIZE, 32);
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let trajs = vec![traj(3, 0.5), traj(1, 0.0)];
        save_dataset(&p, &trajs).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(back.trajectories, trajs);

        std::fs::write(&p, "{\"states\":[[1]],\"actions\":[[0]],\"rewards\":[1]}\nnot json\n").unwrap();
        match load_dataset(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "").unwrap();
        assert!(load_dataset(&p).is_err());
    }
}
