//! Experiment orchestration: the training loop, evaluation protocols,
//! baselines and the file-level commands built on them.

pub mod checkpoint;
pub mod config;

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::index;
use rayon::prelude::*;

pub use checkpoint::Checkpoint;
pub use config::ExperimentConfig;

use crate::actor::{ActionMode, Policy};
use crate::baselines::{baseline_list, mf_foe_longterm, BaselineMethod, LongTermRun};
use crate::cpo::{cpo_iteration, write_log_row, IterationReport, TRAINING_LOG_HEADER};
use crate::critic::CriticNet;
use crate::env::{generate_trajectories, regroup, step, to_rollout, EnvConfig, Phase, RecEnv, Trajectory, Transition};
use crate::error::{Error, Result};
use crate::ingest::{chronological_split, initial_groups, load_movielens, GroupAssignment, InteractionLog, SplitDataset};
use crate::metrics::{evaluate_lists, ndcg_at_k, write_metric_rows, write_series, CumulativeTracker, MetricRow, SeriesPoint};
use crate::nn::ParamVector;
use crate::pmf::{load_embeddings, save_embeddings, train_pmf, EmbeddingTable};
use crate::rng;

/// Chronological split plus the group labels derived from its train part.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub split: Arc<SplitDataset>,
    pub groups: GroupAssignment,
}

pub fn prepare(log: &InteractionLog, cfg: &ExperimentConfig) -> Result<Prepared> {
    let split = chronological_split(log, cfg.split_ratio, cfg.min_interactions)?;
    let groups = initial_groups(&split, cfg.quantile)?;
    Ok(Prepared { split: Arc::new(split), groups })
}

/// Policy, its parameters and both critics.
#[derive(Debug, Clone)]
pub struct Agent {
    pub policy: Policy,
    pub params: Vec<f64>,
    pub value: CriticNet,
    pub cost: CriticNet,
}

impl Agent {
    pub fn new(cfg: &ExperimentConfig, embeddings: Arc<EmbeddingTable>) -> Result<Self> {
        let policy = Policy::new(cfg.policy(), embeddings)?;
        let params = policy.init_params(cfg.seed);
        let m = policy.state_size();
        Ok(Agent {
            value: CriticNet::new(m, &cfg.critic_hidden, cfg.seed, "value-init"),
            cost: CriticNet::new(m, &cfg.critic_hidden, cfg.seed, "cost-init"),
            policy,
            params,
        })
    }

    pub fn checkpoint(&self, cfg: &ExperimentConfig, groups: &GroupAssignment, next_round: u64) -> Checkpoint {
        Checkpoint {
            config: cfg.clone(),
            policy: ParamVector { values: self.params.clone(), layout: self.policy.layout().clone() },
            value: ParamVector { values: self.value.params.clone(), layout: self.value.layout.clone() },
            cost: ParamVector { values: self.cost.params.clone(), layout: self.cost.layout.clone() },
            groups: groups.clone(),
            seed: cfg.seed,
            next_round,
        }
    }

    /// Rebuilds the agent described by `ck` on top of `embeddings`.
    pub fn from_checkpoint(ck: &Checkpoint, embeddings: Arc<EmbeddingTable>) -> Result<Self> {
        let mut agent = Agent::new(&ck.config, embeddings)?;
        let restore = |what: &str, target: &mut Vec<f64>, expected: &crate::nn::Layout, stored: &ParamVector| {
            if expected != &stored.layout {
                return Err(Error::Checkpoint(format!("{what} layout does not match the configured architecture")));
            }
            target.clone_from(&stored.values);
            Ok(())
        };
        let layout = agent.policy.layout().clone();
        restore("policy", &mut agent.params, &layout, &ck.policy)?;
        restore("value critic", &mut agent.value.params, &agent.value.layout.clone(), &ck.value)?;
        restore("cost critic", &mut agent.cost.params, &agent.cost.layout.clone(), &ck.cost)?;
        Ok(agent)
    }
}

/// Everything measured in one training round.
#[derive(Debug, Clone)]
pub struct RoundStats {
    pub round: usize,
    pub iteration: IterationReport,
    pub cost_limit: f64,
    /// Mean hits per trajectory.
    pub reward: f64,
    /// Share of recommended slots that went to popular items.
    pub pop_rate: f64,
    /// Mean NDCG of each trajectory's concatenated lists.
    pub ndcg: f64,
}

/// `size` trajectory slots. Small populations are cycled whole and the
/// remainder drawn without replacement.
fn minibatch(users: &[usize], size: usize, seed: u64, round: usize) -> Vec<usize> {
    let n = users.len();
    let mut picked: Vec<usize> = users.iter().copied().cycle().take(size / n * n).collect();
    let mut r = rng::substream(seed, "minibatch", &[round as u64]);
    picked.extend(index::sample(&mut r, n, size % n).into_iter().map(|i| users[i]));
    picked.sort_unstable();
    picked
}

fn env_config(cfg: &ExperimentConfig, k: usize, t: usize, phase: Phase) -> EnvConfig {
    EnvConfig { rating_threshold: cfg.rating_threshold, ..EnvConfig::new(k, t, phase) }
}

fn rollout_stats(env: &RecEnv, trajs: &[Trajectory], groups: &GroupAssignment, threshold: Option<f64>) -> Result<(f64, f64, f64)> {
    let n = trajs.len().max(1) as f64;
    let (mut reward, mut slots, mut popular, mut ndcg) = (0.0, 0usize, 0usize, 0.0);
    for tr in trajs {
        reward += tr.total_reward() as f64;
        let list: Vec<usize> = tr.transitions.iter().flat_map(|x| x.action.items.iter().copied()).collect();
        slots += list.len();
        popular += list.iter().filter(|&&i| groups.is_popular(i)).count();
        let relevant = env.positives(tr.user, Phase::Train, threshold)?;
        ndcg += ndcg_at_k(&list, &relevant, list.len());
    }
    Ok((reward / n, popular as f64 / slots.max(1) as f64, ndcg / n))
}

/// Runs CPO rounds `rounds` on train-phase rollouts with frozen groups.
/// `on_round` sees every round's statistics and the updated agent.
pub fn train(
    cfg: &ExperimentConfig,
    env: &RecEnv,
    groups: &GroupAssignment,
    agent: &mut Agent,
    rounds: Range<usize>,
    mut on_round: impl FnMut(&RoundStats, &Agent) -> Result<()>,
) -> Result<Vec<RoundStats>> {
    cfg.validate()?;
    let spec = cfg.fairness(cfg.k, cfg.t)?;
    let cpo = cfg.cpo(spec.cost_limit());
    let env_cfg = env_config(cfg, cfg.k, cfg.t, Phase::Train);
    let policy = agent.policy.with_active_rows(cfg.k)?;
    let users = env.users();
    if users.is_empty() {
        return Err(Error::EmptyBatch("no user has enough train events to fill the history"));
    }
    let mut stats = Vec::with_capacity(rounds.len());
    for round in rounds {
        let mut run = || -> Result<RoundStats> {
            let batch = minibatch(&users, cfg.batch_users, cfg.seed, round);
            let trajs = generate_trajectories(
                env,
                &policy,
                &agent.params,
                &batch,
                groups,
                &env_cfg,
                Phase::Train,
                ActionMode::Stochastic,
                cfg.seed,
                round as u64,
            )?;
            let (reward, pop_rate, ndcg) = rollout_stats(env, &trajs, groups, cfg.rating_threshold)?;
            let rollouts: Vec<_> = trajs.iter().map(to_rollout).collect();
            let iteration = cpo_iteration(&rollouts, &policy, &mut agent.params, &mut agent.value, &mut agent.cost, &cpo)?;
            Ok(RoundStats { round, iteration, cost_limit: cpo.cost_limit, reward, pop_rate, ndcg })
        };
        let s = run().map_err(|e| Error::Round { round, source: Box::new(e) })?;
        log::info!(
            "round {round}: J_C {:.4} (d {:.4}) reward {:.3} pop {:.3} {}",
            s.iteration.j_c,
            s.cost_limit,
            s.reward,
            s.pop_rate,
            s.iteration.update.step_type
        );
        on_round(&s, agent)?;
        stats.push(s);
    }
    Ok(stats)
}

fn test_relevant(env: &RecEnv, users: &[usize], threshold: Option<f64>) -> Result<Vec<HashSet<usize>>> {
    users.iter().map(|&u| env.positives(u, Phase::Test, threshold)).collect()
}

/// Greedy lists of the largest evaluation length on the test phase with
/// frozen parameters and labels; shorter lengths use prefixes.
pub fn eval_short(cfg: &ExperimentConfig, env: &RecEnv, groups: &GroupAssignment, agent: &Agent) -> Result<Vec<MetricRow>> {
    let kmax = *cfg.eval_k.iter().max().ok_or_else(|| Error::Config("eval_k is empty".into()))?;
    let policy = agent.policy.with_active_rows(kmax)?;
    let users = env.users();
    let env_cfg = env_config(cfg, kmax, 1, Phase::Test);
    let trajs = generate_trajectories(
        env,
        &policy,
        &agent.params,
        &users,
        groups,
        &env_cfg,
        Phase::Test,
        ActionMode::Greedy,
        cfg.seed,
        0,
    )?;
    let lists: Vec<Vec<usize>> = trajs.iter().map(|t| t.transitions[0].action.items.clone()).collect();
    let relevant = test_relevant(env, &users, cfg.rating_threshold)?;
    cfg.eval_k.iter().map(|&k| evaluate_lists(&lists, &relevant, k, groups)).collect()
}

#[derive(Debug, Clone)]
pub struct OnlineRun {
    pub series: Vec<SeriesPoint>,
    pub accumulated_exposure: Vec<u64>,
    pub updates: Vec<IterationReport>,
    /// Per-user recommendation sequence.
    pub lists: Vec<Vec<usize>>,
}

/// Online test-phase loop: one item per user per step, labels recomputed
/// from accumulated exposure every `regroup_every` steps, a CPO update on
/// the latest window every `update_every` steps.
pub fn eval_long(cfg: &ExperimentConfig, env: &RecEnv, initial: &GroupAssignment, agent: &mut Agent) -> Result<OnlineRun> {
    cfg.validate()?;
    let steps = cfg.long_steps;
    let policy = agent.policy.with_active_rows(1)?;
    let env_cfg = EnvConfig {
        dynamic_groups: true,
        regroup_every: cfg.regroup_every,
        ..env_config(cfg, 1, steps.max(1), Phase::Test)
    };
    let spec = cfg.fairness(1, cfg.update_every)?;
    let cpo = cfg.cpo(spec.cost_limit());
    let users = env.users();
    let mut episodes = users
        .iter()
        .map(|&u| env.reset(&policy, &agent.params, u, Phase::Test, &env_cfg))
        .collect::<Result<Vec<_>>>()?;
    let relevant: Vec<HashSet<usize>> = episodes.iter().map(|e| e.remaining.clone()).collect();
    let mut tracker = CumulativeTracker::new(relevant, env.n_items());
    let mut accumulated = vec![0u64; env.n_items()];
    let mut groups = initial.clone();
    let mut window: Vec<Vec<Transition>> = vec![Vec::new(); users.len()];
    let mut run = OnlineRun {
        series: Vec::with_capacity(steps),
        accumulated_exposure: Vec::new(),
        updates: Vec::new(),
        lists: vec![Vec::new(); users.len()],
    };
    for s in 0..steps {
        let params = &agent.params;
        let transitions = users
            .par_iter()
            .zip(episodes.par_iter_mut())
            .map(|(&u, ep)| {
                let mut r = rng::substream(cfg.seed, "online", &[s as u64, u as u64]);
                let action = policy.sample_action(params, &ep.state, 1, cfg.long_mode, &ep.excluded, &mut r)?;
                step(&policy, params, ep, action, &groups, &env_cfg)
            })
            .collect::<Result<Vec<_>>>()
            .map_err(|e| Error::Round { round: s, source: Box::new(e) })?;
        let items: Vec<usize> = transitions.iter().map(|x| x.action.items[0]).collect();
        run.series.push(tracker.record(&items, &groups)?);
        for (u, (x, &i)) in transitions.into_iter().zip(&items).enumerate() {
            accumulated[i] += 1;
            run.lists[u].push(i);
            window[u].push(x);
        }
        if (s + 1) % cfg.regroup_every == 0 {
            groups = regroup(initial, &accumulated);
        }
        if (s + 1) % cfg.update_every == 0 {
            let rollouts: Vec<_> = users
                .iter()
                .zip(window.iter_mut())
                .map(|(&user, w)| to_rollout(&Trajectory { user, transitions: std::mem::take(w) }))
                .collect();
            let report = cpo_iteration(&rollouts, &policy, &mut agent.params, &mut agent.value, &mut agent.cost, &cpo)
                .map_err(|e| Error::Round { round: s, source: Box::new(e) })?;
            run.updates.push(report);
        }
    }
    run.accumulated_exposure = accumulated;
    Ok(run)
}

fn candidates(cfg: &ExperimentConfig, k: usize) -> usize {
    if cfg.candidates == 0 {
        2 * k
    } else {
        cfg.candidates
    }
}

/// Static baseline lists of the largest evaluation length, scored like
/// [`eval_short`].
pub fn baseline_short(
    cfg: &ExperimentConfig,
    env: &RecEnv,
    groups: &GroupAssignment,
    embeddings: &EmbeddingTable,
    method: BaselineMethod,
) -> Result<Vec<MetricRow>> {
    let kmax = *cfg.eval_k.iter().max().ok_or_else(|| Error::Config("eval_k is empty".into()))?;
    let alpha_prime = match method {
        BaselineMethod::Quota => cfg.fairness(kmax, 1)?.alpha_prime,
        _ => 1.0,
    };
    let users = env.users();
    let lists = users
        .par_iter()
        .map(|&u| {
            let exclude = env.base_exclusions(u, Phase::Test)?;
            baseline_list(method, u, embeddings, groups, &exclude, kmax, candidates(cfg, kmax), alpha_prime)
        })
        .collect::<Result<Vec<_>>>()?;
    let relevant = test_relevant(env, &users, cfg.rating_threshold)?;
    cfg.eval_k.iter().map(|&k| evaluate_lists(&lists, &relevant, k, groups)).collect()
}

pub fn baseline_long(cfg: &ExperimentConfig, env: &RecEnv, initial: &GroupAssignment, embeddings: &EmbeddingTable) -> Result<LongTermRun> {
    mf_foe_longterm(env.split(), embeddings, initial, &env.users(), cfg.baseline_rounds, cfg.baseline_k)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn ensure_out(cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out).map_err(|e| Error::io(&cfg.out, e))
}

fn load_log(cfg: &ExperimentConfig) -> Result<InteractionLog> {
    load_movielens(&cfg.data, cfg.format)
}

fn load_table(path: &Path) -> Result<Arc<EmbeddingTable>> {
    if !path.exists() {
        return Err(Error::Config(format!(
            "embeddings not found at {}; run `pretrain` first",
            path.display()
        )));
    }
    Ok(Arc::new(load_embeddings(path)?))
}

fn check_table(table: &EmbeddingTable, split: &SplitDataset) -> Result<()> {
    if (table.n_users, table.n_items) != (split.n_users, split.n_items) {
        return Err(Error::Config(format!(
            "embeddings cover {} users and {} items but the data has {} and {}; re-run `pretrain`",
            table.n_users, table.n_items, split.n_users, split.n_items
        )));
    }
    Ok(())
}

fn write_metric_files(out: &Path, rows: &[MetricRow]) -> Result<Vec<PathBuf>> {
    rows.iter()
        .map(|row| {
            let path = out.join(format!("metrics_K{}.csv", row.k));
            write_with(&path, |w| write_metric_rows(w, std::slice::from_ref(row)))?;
            Ok(path)
        })
        .collect()
}

/// Loads and splits the log, writes its statistics and id maps.
pub fn cmd_ingest(cfg: &ExperimentConfig) -> Result<BTreeMap<&'static str, f64>> {
    ensure_out(cfg)?;
    let log = load_log(cfg)?;
    let prepared = prepare(&log, cfg)?;
    crate::ingest::write_summary(&log, &cfg.out.join("summary.txt"))?;
    log.users.write_csv(&cfg.out.join("users.csv"))?;
    log.items.write_csv(&cfg.out.join("items.csv"))?;
    let (pop, tail) = prepared.groups.group_sizes();
    log::info!(
        "{} users retained, {} dropped; {pop} popular / {tail} long-tail items",
        log.n_users() - prepared.split.dropped.len(),
        prepared.split.dropped.len()
    );
    Ok(crate::ingest::summary(&log))
}

/// Fits the embedding table on the train split.
pub fn cmd_pretrain(cfg: &ExperimentConfig) -> Result<PathBuf> {
    ensure_out(cfg)?;
    let log = load_log(cfg)?;
    let prepared = prepare(&log, cfg)?;
    let fit = train_pmf(&prepared.split, &cfg.pmf(), cfg.seed)?;
    let path = cfg.embeddings_path();
    save_embeddings(&fit.table, &path)?;
    write_with(&cfg.out.join("pmf_loss.csv"), |w| {
        writeln!(w, "epoch,loss")?;
        for (e, l) in fit.epoch_losses.iter().enumerate() {
            writeln!(w, "{e},{l:.9}")?;
        }
        Ok(())
    })?;
    Ok(path)
}

/// Trains from scratch, writing `training_log.csv`, periodic
/// `round_{r}.fcpo` checkpoints and the final `policy.fcpo`.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf> {
    cfg.validate()?;
    cfg.fairness(cfg.k, cfg.t)?;
    ensure_out(cfg)?;
    let embeddings = load_table(&cfg.embeddings_path())?;
    let log = load_log(cfg)?;
    let prepared = prepare(&log, cfg)?;
    check_table(&embeddings, &prepared.split)?;
    let env = RecEnv::new(prepared.split.clone(), cfg.history_len);
    let mut agent = Agent::new(cfg, embeddings)?;
    std::fs::write(cfg.out.join("config.txt"), cfg.to_text()).map_err(|e| Error::io(cfg.out.join("config.txt"), e))?;
    let log_path = cfg.out.join("training_log.csv");
    let mut log_file = create(&log_path)?;
    writeln!(log_file, "{TRAINING_LOG_HEADER}").map_err(|e| Error::io(&log_path, e))?;
    train(cfg, &env, &prepared.groups, &mut agent, 0..cfg.rounds, |s, agent| {
        write_log_row(&mut log_file, s.round, &s.iteration.update, s.cost_limit).map_err(|e| Error::io(&log_path, e))?;
        if cfg.checkpoint_every > 0 && (s.round + 1) % cfg.checkpoint_every == 0 {
            let path = cfg.out.join(format!("round_{}.fcpo", s.round + 1));
            agent.checkpoint(cfg, &prepared.groups, s.round as u64 + 1).save(&path)?;
        }
        Ok(())
    })?;
    log_file.flush().map_err(|e| Error::io(&log_path, e))?;
    let path = cfg.out.join("policy.fcpo");
    agent.checkpoint(cfg, &prepared.groups, cfg.rounds as u64).save(&path)?;
    Ok(path)
}

/// Model, data and labels come from the checkpoint; evaluation keys, the
/// seed and the output directory from `cfg`.
struct Restored {
    cfg: ExperimentConfig,
    env: RecEnv,
    groups: GroupAssignment,
    agent: Agent,
}

fn restore(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Restored> {
    let ck = Checkpoint::load(checkpoint)?;
    let embeddings = load_table(&ck.config.embeddings_path())?;
    let agent = Agent::from_checkpoint(&ck, embeddings)?;
    let mut merged = ck.config.clone();
    merged.eval_k.clone_from(&cfg.eval_k);
    merged.long_steps = cfg.long_steps;
    merged.update_every = cfg.update_every;
    merged.long_mode = cfg.long_mode;
    merged.regroup_every = cfg.regroup_every;
    merged.seed = cfg.seed;
    merged.out.clone_from(&cfg.out);
    let log = load_log(&merged)?;
    let prepared = prepare(&log, &merged)?;
    check_table(agent.policy.embeddings(), &prepared.split)?;
    let env = RecEnv::new(prepared.split, merged.history_len);
    Ok(Restored { cfg: merged, env, groups: ck.groups, agent })
}

pub fn cmd_eval_short(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<Vec<PathBuf>> {
    ensure_out(cfg)?;
    let r = restore(cfg, checkpoint)?;
    let rows = eval_short(&r.cfg, &r.env, &r.groups, &r.agent)?;
    write_metric_files(&r.cfg.out, &rows)
}

pub fn cmd_eval_long(cfg: &ExperimentConfig, checkpoint: &Path) -> Result<PathBuf> {
    ensure_out(cfg)?;
    let mut r = restore(cfg, checkpoint)?;
    let run = eval_long(&r.cfg, &r.env, &r.groups, &mut r.agent)?;
    let path = r.cfg.out.join("longterm_series.csv");
    write_with(&path, |w| write_series(w, &run.series))?;
    Ok(path)
}

/// Short-term metric files, or with `long_term` the MF-FOE series.
pub fn cmd_baseline(cfg: &ExperimentConfig, method: BaselineMethod, long_term: bool) -> Result<Vec<PathBuf>> {
    ensure_out(cfg)?;
    let embeddings = load_table(&cfg.embeddings_path())?;
    let log = load_log(cfg)?;
    let prepared = prepare(&log, cfg)?;
    check_table(&embeddings, &prepared.split)?;
    let env = RecEnv::new(prepared.split.clone(), cfg.history_len);
    if long_term {
        if method != BaselineMethod::MfFoe {
            return Err(Error::Config("the long-term protocol is defined for mf-foe only".into()));
        }
        let run = baseline_long(cfg, &env, &prepared.groups, &embeddings)?;
        let path = cfg.out.join("longterm_series.csv");
        write_with(&path, |w| write_series(w, &run.series))?;
        return Ok(vec![path]);
    }
    let rows = baseline_short(cfg, &env, &prepared.groups, &embeddings, method)?;
    write_metric_files(&cfg.out, &rows)
}
