use std::collections::HashSet;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;

use crate::actor::{ActionMode, ActionSample, Policy, UserState};
use crate::cpo::{Rollout, RolloutStep};
use crate::error::{Error, Result};
use crate::ingest::{GroupAssignment, SplitDataset};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Start from the first train items; rewards come from the rest of train.
    Train,
    /// Start from the last train items; rewards come from the test items.
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub k: usize,
    pub t: usize,
    pub positives_source: Phase,
    pub rating_threshold: Option<f64>,
    pub mask_repeats: bool,
    pub dynamic_groups: bool,
    pub regroup_every: usize,
}

impl EnvConfig {
    pub fn new(k: usize, t: usize, phase: Phase) -> Self {
        EnvConfig {
            k,
            t,
            positives_source: phase,
            rating_threshold: None,
            mask_repeats: true,
            dynamic_groups: false,
            regroup_every: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.t == 0 || self.regroup_every == 0 {
            return Err(Error::InvalidArgument("K, T and regroup_every must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: UserState,
    pub action: ActionSample,
    pub reward: u32,
    pub cost: u32,
    pub next_state: UserState,
    pub done: bool,
    pub log_density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub user: usize,
    pub transitions: Vec<Transition>,
}

impl Trajectory {
    pub fn total_reward(&self) -> u32 {
        self.transitions.iter().map(|x| x.reward).sum()
    }

    pub fn discounted_cost(&self, gamma: f64) -> f64 {
        self.transitions.iter().rev().fold(0.0, |acc, x| x.cost as f64 + gamma * acc)
    }
}

/// Bounded FIFO of complete trajectories.
#[derive(Debug, Clone, Default)]
pub struct ReplayBuffer {
    pub trajectories: Vec<Trajectory>,
    pub capacity: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { trajectories: Vec::new(), capacity }
    }

    pub fn push(&mut self, t: Trajectory) {
        if self.capacity > 0 && self.trajectories.len() == self.capacity {
            self.trajectories.remove(0);
        }
        self.trajectories.push(t);
    }

    pub fn clear(&mut self) {
        self.trajectories.clear();
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// One user's running episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub state: UserState,
    pub t: usize,
    /// Ground-truth positives not yet consumed.
    pub remaining: HashSet<usize>,
    /// Items that may not be recommended.
    pub excluded: Vec<bool>,
}

/// Log-replay environment over a chronological split.
#[derive(Debug, Clone)]
pub struct RecEnv {
    split: Arc<SplitDataset>,
    history_len: usize,
}

impl RecEnv {
    pub fn new(split: Arc<SplitDataset>, history_len: usize) -> Self {
        RecEnv { split, history_len }
    }

    pub fn split(&self) -> &SplitDataset {
        &self.split
    }

    pub fn n_items(&self) -> usize {
        self.split.n_items
    }

    /// Users with enough train events to fill the history queue.
    pub fn users(&self) -> Vec<usize> {
        self.split.retained_users().filter(|&u| self.split.train[u].len() >= self.history_len).collect()
    }

    pub fn initial_history(&self, user: usize, phase: Phase) -> Result<Vec<usize>> {
        let train = self.split.train.get(user).ok_or(Error::UnknownUser(user))?;
        let n = self.history_len;
        if train.len() < n {
            return Err(Error::UnknownUser(user));
        }
        let slice = match phase {
            Phase::Train => &train[..n],
            Phase::Test => &train[train.len() - n..],
        };
        Ok(slice.iter().map(|x| x.item_id).collect())
    }

    pub fn positives(&self, user: usize, source: Phase, threshold: Option<f64>) -> Result<HashSet<usize>> {
        let events = match source {
            Phase::Train => self.split.train.get(user).map(|v| v.get(self.history_len..).unwrap_or(&[])),
            Phase::Test => self.split.test.get(user).map(|v| v.as_slice()),
        }
        .ok_or(Error::UnknownUser(user))?;
        Ok(events
            .iter()
            .filter(|x| threshold.is_none_or(|th| x.rating >= th))
            .map(|x| x.item_id)
            .collect())
    }

    /// Items never offered: the starting history when training, and all
    /// train and validation items when testing.
    pub fn base_exclusions(&self, user: usize, phase: Phase) -> Result<Vec<bool>> {
        let mut mask = vec![false; self.split.n_items];
        let items = match phase {
            Phase::Train => self.initial_history(user, phase)?,
            Phase::Test => self.split.seen_items(user),
        };
        for i in items {
            mask[i] = true;
        }
        Ok(mask)
    }

    pub fn reset(&self, policy: &Policy, params: &[f64], user: usize, phase: Phase, cfg: &EnvConfig) -> Result<Episode> {
        let history = self.initial_history(user, phase)?;
        Ok(Episode {
            state: policy.encode_state(params, user, &history)?,
            t: 0,
            remaining: self.positives(user, cfg.positives_source, cfg.rating_threshold)?,
            excluded: self.base_exclusions(user, phase)?,
        })
    }
}

/// Applies `action` to `episode`: counts hits and popular items, consumes
/// matched positives, pushes each hit into the history in list order.
pub fn step(
    policy: &Policy,
    params: &[f64],
    episode: &mut Episode,
    action: ActionSample,
    groups: &GroupAssignment,
    cfg: &EnvConfig,
) -> Result<Transition> {
    let state = episode.state.clone();
    let mut next = episode.state.clone();
    let mut reward = 0;
    let mut cost = 0;
    for &item in &action.items {
        if item >= groups.n_items() {
            return Err(Error::OutOfRange { what: "item", index: item, len: groups.n_items() });
        }
        if groups.is_popular(item) {
            cost += 1;
        }
        if episode.remaining.remove(&item) {
            reward += 1;
            next = policy.update_history(params, &next, item, 1.0)?;
        }
        if cfg.mask_repeats {
            episode.excluded[item] = true;
        }
    }
    episode.t += 1;
    episode.state = next.clone();
    Ok(Transition {
        log_density: action.log_density,
        state,
        action,
        reward,
        cost,
        next_state: next,
        done: episode.t >= cfg.t,
    })
}

/// Labels from base impressions plus exposures gathered since.
pub fn regroup(initial: &GroupAssignment, accumulated: &[u64]) -> GroupAssignment {
    let counts = initial.exposure_count.iter().zip(accumulated).map(|(a, b)| a + b).collect();
    GroupAssignment::from_exposure(counts, initial.quantile)
}

/// Rolls out one episode per entry of `users` (repeats allowed) with frozen
/// parameters and groups. Episodes run in parallel, each on its own random
/// stream keyed by `(round, slot, user)`.
#[allow(clippy::too_many_arguments)]
pub fn generate_trajectories(
    env: &RecEnv,
    policy: &Policy,
    params: &[f64],
    users: &[usize],
    groups: &GroupAssignment,
    cfg: &EnvConfig,
    phase: Phase,
    mode: ActionMode,
    seed: u64,
    round: u64,
) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    users
        .par_iter()
        .enumerate()
        .map(|(slot, &user)| {
            let mut r = rng::substream(seed, "rollout", &[round, slot as u64, user as u64]);
            let mut ep = env.reset(policy, params, user, phase, cfg)?;
            let mut transitions = Vec::with_capacity(cfg.t);
            for _ in 0..cfg.t {
                let action = policy.sample_action(params, &ep.state, cfg.k, mode, &ep.excluded, &mut r)?;
                transitions.push(step(policy, params, &mut ep, action, groups, cfg)?);
            }
            Ok(Trajectory { user, transitions })
        })
        .collect()
}

/// Per-item recommendation counts, merged in the given order.
pub fn exposure_from(trajectories: &[Trajectory], n_items: usize) -> Vec<u64> {
    let mut counts = vec![0u64; n_items];
    for t in trajectories {
        for x in &t.transitions {
            for &i in &x.action.items {
                counts[i] += 1;
            }
        }
    }
    counts
}

/// Optimizer view of a trajectory.
pub fn to_rollout(traj: &Trajectory) -> Rollout<UserState> {
    let steps = traj
        .transitions
        .iter()
        .map(|x| RolloutStep {
            features: x.state.encoded.clone(),
            input: x.state.clone(),
            action: x.action.proposal.clone(),
            log_density: x.log_density,
            reward: x.reward as f64,
            cost: x.cost as f64,
        })
        .collect();
    let bootstrap = match traj.transitions.last() {
        Some(x) if !x.done => Some(x.next_state.encoded.clone()),
        _ => None,
    };
    Rollout { steps, bootstrap }
}

/// One line per transition: `user,t,items|...,reward,cost`.
pub fn write_trajectories(w: &mut impl Write, trajectories: &[Trajectory]) -> std::io::Result<()> {
    for traj in trajectories {
        for (t, x) in traj.transitions.iter().enumerate() {
            let items: Vec<String> = x.action.items.iter().map(usize::to_string).collect();
            writeln!(w, "{},{t},{},{},{}", traj.user, items.join("|"), x.reward, x.cost)?;
        }
    }
    Ok(())
}
