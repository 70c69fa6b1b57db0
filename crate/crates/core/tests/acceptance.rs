//! End-to-end acceptance checks, one test per criterion.

mod common;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use common::{central_difference, check_solve_step, rel_err, synth_experiment};
use fcpo::actor::{Policy, PolicyConfig, UserState};
use fcpo::baselines::{foe_rerank, foe_solve, position_weights, BaselineMethod, RerankProblem};
use fcpo::cpo::{Advantages, Batch, DualCase, Rollout, RolloutStep, StepType, Surrogate};
use fcpo::env::RecEnv;
use fcpo::ingest::{load_movielens, GroupAssignment, LogFormat};
use fcpo::metrics::{
    exact_k_satisfied, gini_index, ndcg_at_k, popularity_rate, recall_at_k, f1_at_k, FairnessSpec, MetricRow,
};
use fcpo::nn::gaussian::log_density;
use fcpo::nn::{GaussianPolicyModel, Gru, Layout, Mlp, Objective};
use fcpo::pmf::EmbeddingTable;
use fcpo::rng;
use fcpo::runner::{self, baseline_long, eval_long, eval_short, prepare, train, Agent, Checkpoint, ExperimentConfig};
use fcpo::synth::{self, SynthConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::seq::SliceRandom;
use rand::Rng;

fn movielens_100k() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/ml-100k/u.data")
}

#[test]
fn criterion_1_movielens_100k_statistics() {
    let path = movielens_100k();
    assert!(path.exists(), "MovieLens-100K is required at {}", path.display());
    let start = Instant::now();
    let log = load_movielens(&path, LogFormat::Tsv100k).unwrap();
    let elapsed = start.elapsed();
    let density = 100.0 * log.density();
    println!(
        "criterion 1: {} users, {} items, {} interactions, density {density:.4}% in {elapsed:?}",
        log.n_users(),
        log.n_items(),
        log.interactions.len()
    );
    assert_eq!((log.n_users(), log.n_items(), log.interactions.len()), (943, 1682, 100_000));
    assert!((density - 6.305).abs() <= 0.001, "density {density}");
    assert!(elapsed.as_secs_f64() < 5.0, "ingest took {elapsed:?}");
}

fn random_table(n_users: usize, n_items: usize, d: usize, r: &mut impl Rng) -> Arc<EmbeddingTable> {
    let mut draw = |n: usize| (0..n * d).map(|_| r.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let users = draw(n_users);
    let items = draw(n_items);
    Arc::new(EmbeddingTable::new(n_users, n_items, d, users, items).unwrap())
}

fn small_policy(r: &mut impl Rng) -> (Policy, Vec<f64>) {
    let cfg = PolicyConfig {
        k: r.random_range(1..=3),
        history_len: 3,
        gru_hidden: r.random_range(2..=4),
        gru_layers: r.random_range(1..=2),
        mlp_hidden: vec![r.random_range(3..=6)],
        log_std_init: -0.3,
    };
    let policy = Policy::new(cfg, random_table(3, 8, 2, r)).unwrap();
    let params = (0..policy.n_params()).map(|_| r.random_range(-0.7..0.7)).collect();
    (policy, params)
}

fn random_state(policy: &Policy, params: &[f64], r: &mut impl Rng) -> UserState {
    let mut items: Vec<usize> = (0..8).collect();
    items.shuffle(r);
    policy.encode_state(params, r.random_range(0..3), &items[..3]).unwrap()
}

fn gradient_errors(seed: u64) -> [f64; 4] {
    let mut r = rng::stream(seed, "gradient-suite");
    let eps = 1e-5;

    let mut layout = Layout::new();
    let sizes = [r.random_range(2..=5), r.random_range(2..=8), r.random_range(2..=8), r.random_range(1..=4)];
    let mlp = Mlp::new(&mut layout, "m", &sizes);
    assert!(layout.len() <= 500);
    let params: Vec<f64> = (0..layout.len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..sizes[0]).map(|_| r.random_range(-1.0..1.0)).collect();
    let w: Vec<f64> = (0..sizes[3]).map(|_| r.random_range(-1.0..1.0)).collect();
    let f = |p: &[f64]| mlp.forward(p, &x).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    let mut grad = vec![0.0; params.len()];
    mlp.backward(&params, &mlp.forward_cached(&params, &x).unwrap(), &w, &mut grad);
    let e_mlp = rel_err(&grad, &central_difference(&f, &params, eps));

    let mut layout = Layout::new();
    let (input, hidden) = (r.random_range(1..=4), r.random_range(2..=5));
    let gru = Gru::new(&mut layout, "g", input, hidden, r.random_range(1..=2));
    assert!(layout.len() <= 500);
    let params: Vec<f64> = (0..layout.len()).map(|_| r.random_range(-1.0..1.0)).collect();
    let seq: Vec<Vec<f64>> =
        (0..r.random_range(1..=4)).map(|_| (0..input).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let w: Vec<f64> = (0..hidden).map(|_| r.random_range(-1.0..1.0)).collect();
    let f = |p: &[f64]| gru.forward(p, &seq).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
    let mut grad = vec![0.0; params.len()];
    gru.backward(&params, &gru.forward_cached(&params, &seq).unwrap(), &w, &mut grad);
    let e_gru = rel_err(&grad, &central_difference(&f, &params, eps));

    let (policy, params) = small_policy(&mut r);
    assert!(policy.n_params() <= 500, "{} params", policy.n_params());
    let state = random_state(&policy, &params, &mut r);
    let action = policy.head(&params, &state).sample(&mut r);
    let (_, grad) = policy.log_density_gradient(&params, &state, &action);
    let f = |p: &[f64]| policy.action_log_density(p, &state, &action).unwrap();
    let e_density = rel_err(&grad, &central_difference(&f, &params, eps));

    let steps: Vec<RolloutStep<UserState>> = (0..3)
        .map(|_| {
            let state = random_state(&policy, &params, &mut r);
            let head = policy.head(&params, &state);
            let action = head.sample(&mut r);
            RolloutStep {
                log_density: log_density(&head, &action),
                features: state.encoded.clone(),
                input: state,
                action,
                reward: 0.0,
                cost: 0.0,
            }
        })
        .collect();
    let rollouts = vec![Rollout { steps, bootstrap: None }];
    let weights: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
    let adv = Advantages {
        advantages: weights.clone(),
        raw_advantages: weights.clone(),
        cost_advantages: weights.clone(),
        returns: vec![],
        cost_returns: vec![],
        value_targets: vec![],
        cost_targets: vec![],
        j_c: 0.0,
        horizon_scale: 1.0,
    };
    let batch = Batch::new(&rollouts, &adv);
    let surrogate = Surrogate { model: &policy, batch: &batch, weights: &weights };
    // Away from the behavior parameters, so the ratio is not identically one.
    let moved: Vec<f64> = params.iter().map(|p| p + r.random_range(-0.05..0.05)).collect();
    let (_, grad) = surrogate.value_and_gradient(&moved);
    let e_surrogate = rel_err(&grad, &central_difference(&|p: &[f64]| surrogate.value(p), &moved, eps));

    [e_mlp, e_gru, e_density, e_surrogate]
}

#[test]
fn criterion_2_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut worst = [0.0f64; 4];
    for seed in 0..100 {
        let errs = gradient_errors(seed);
        for (w, e) in worst.iter_mut().zip(errs) {
            assert!(e < 1e-4, "seed {seed}: relative errors {errs:?}");
            *w = w.max(e);
        }
    }
    println!(
        "criterion 2: worst relative error mlp {:.2e} gru {:.2e} log-density {:.2e} surrogate {:.2e} in {:?}",
        worst[0],
        worst[1],
        worst[2],
        worst[3],
        start.elapsed()
    );
}

#[test]
fn criterion_3_trust_region_matches_oracle() {
    let start = Instant::now();
    let cases: Vec<DualCase> = (0..60).map(|seed| check_solve_step(1000 + seed, (seed % 3) as usize)).collect();
    let count = |c: DualCase| cases.iter().filter(|&&x| x == c).count();
    println!(
        "criterion 3: {} instances, slack {} active {} recovery {} in {:?}",
        cases.len(),
        count(DualCase::Slack),
        count(DualCase::Active),
        count(DualCase::Recovery),
        start.elapsed()
    );
    for c in [DualCase::Slack, DualCase::Active, DualCase::Recovery] {
        assert!(count(c) > 0, "no {c:?} instance");
    }
}

/// Trailing-window summary of one synthetic training run.
#[derive(Debug)]
struct SynthRun {
    alpha_prime: f64,
    pop_rate: f64,
    ndcg: f64,
    j_c: f64,
    cost_limit: f64,
    delta: f64,
    accepted: usize,
    max_accepted_kl: f64,
}

const LEVELS: [f64; 3] = [1.0, 0.8, 0.4];
static RUNS: [OnceLock<SynthRun>; 3] = [const { OnceLock::new() }; 3];

fn synth_run(alpha_prime: f64) -> SynthRun {
    let cfg = ExperimentConfig { rounds: 300, ..synth_experiment(alpha_prime, 0) };
    let data = synth::generate(&SynthConfig::default(), 0).unwrap();
    let prepared = prepare(&data.log, &cfg).unwrap();
    let env = RecEnv::new(prepared.split.clone(), cfg.history_len);
    let mut agent = Agent::new(&cfg, Arc::new(data.embeddings)).unwrap();
    let stats = train(&cfg, &env, &prepared.groups, &mut agent, 0..cfg.rounds, |_, _| Ok(())).unwrap();
    let accepted: Vec<f64> = stats
        .iter()
        .filter(|s| s.iteration.update.step_type != StepType::Rejected)
        .map(|s| s.iteration.update.kl_after)
        .collect();
    let tail = &stats[stats.len() - 50..];
    let mean = |f: fn(&runner::RoundStats) -> f64| tail.iter().map(f).sum::<f64>() / tail.len() as f64;
    SynthRun {
        alpha_prime,
        pop_rate: mean(|s| s.pop_rate),
        ndcg: mean(|s| s.ndcg),
        j_c: mean(|s| s.iteration.j_c),
        cost_limit: tail[0].cost_limit,
        delta: cfg.delta,
        accepted: accepted.len(),
        max_accepted_kl: accepted.iter().copied().fold(0.0, f64::max),
    }
}

fn level(i: usize) -> &'static SynthRun {
    RUNS[i].get_or_init(|| synth_run(LEVELS[i]))
}

#[test]
fn criterion_4_discounted_cost_stays_within_limit() {
    let start = Instant::now();
    let run = level(2);
    println!(
        "criterion 4: alpha' {} trailing J_C {:.4} vs 1.05 d = {:.4}; {} accepted steps, max KL {:.5} (delta {}) in {:?}",
        run.alpha_prime,
        run.j_c,
        1.05 * run.cost_limit,
        run.accepted,
        run.max_accepted_kl,
        run.delta,
        start.elapsed()
    );
    assert!(run.j_c <= 1.05 * run.cost_limit, "{run:?}");
    assert!(run.accepted > 0);
    assert!(run.max_accepted_kl <= run.delta, "{run:?}");
}

#[test]
fn criterion_5_fairness_level_orders_popularity_and_ndcg() {
    let start = Instant::now();
    let runs: Vec<&SynthRun> = (0..LEVELS.len()).map(level).collect();
    for r in &runs {
        println!("criterion 5: alpha' {:.1} pop rate {:.4} ndcg {:.4}", r.alpha_prime, r.pop_rate, r.ndcg);
    }
    println!("criterion 5: {:?}", start.elapsed());
    for w in runs.windows(2) {
        assert!(w[1].pop_rate < w[0].pop_rate, "pop rate not decreasing: {:?} -> {:?}", w[0], w[1]);
        assert!(w[1].ndcg <= w[0].ndcg, "ndcg increased: {:?} -> {:?}", w[0], w[1]);
    }
}

fn set(items: &[usize]) -> HashSet<usize> {
    items.iter().copied().collect()
}

#[test]
fn criterion_6_metric_properties() {
    let start = Instant::now();
    let mut runner = TestRunner::new(PropConfig { cases: 512, failure_persistence: None, ..PropConfig::default() });
    let gini_input = (prop::collection::vec(0.0..100.0f64, 2..40), 0.01..100.0f64, any::<u64>());
    runner
        .run(&gini_input, |(g, scale, seed)| {
            prop_assume!(g.iter().sum::<f64>() > 0.0);
            let n = g.len() as f64;
            let base = gini_index(&g).unwrap();
            prop_assert!((-1e-12..=(n - 1.0) / n + 1e-12).contains(&base));
            let scaled: Vec<f64> = g.iter().map(|x| x * scale).collect();
            prop_assert!((gini_index(&scaled).unwrap() - base).abs() < 1e-9);
            let mut shuffled = g.clone();
            shuffled.shuffle(&mut rng::stream(seed, "shuffle"));
            prop_assert!((gini_index(&shuffled).unwrap() - base).abs() < 1e-12);
            Ok(())
        })
        .unwrap();
    for n in 1..50 {
        assert!(gini_index(&vec![3.5; n]).unwrap().abs() < 1e-12);
        let mut one_hot = vec![0.0; n];
        one_hot[n / 2] = 7.0;
        let want = (n as f64 - 1.0) / n as f64;
        assert!((gini_index(&one_hot).unwrap() - want).abs() < 1e-12);
    }
    assert!((gini_index(&[1.0, 2.0, 3.0]).unwrap() - 8.0 / 36.0).abs() < 1e-12);
    assert!(gini_index(&[0.0, 0.0]).is_err());

    // Ratio form against budget form on every integer split of every list length.
    let mut checked = 0;
    for k in 1..=10usize {
        for num in 1..=12u32 {
            for den in 1..=12u32 {
                let alpha = num as f64 / den as f64;
                let spec = FairnessSpec::from_alpha(alpha, k, 1, 1.0).unwrap();
                for popular in 0..=k {
                    let ratio_ok = popular == 0 || (k > popular && popular as f64 / (k - popular) as f64 <= alpha + 1e-12);
                    let budget_ok = popular as f64 <= spec.step_budget() + 1e-9;
                    assert_eq!(exact_k_satisfied(popular, k, alpha), budget_ok, "K {k} alpha {alpha} popular {popular}");
                    assert_eq!(ratio_ok, budget_ok, "K {k} alpha {alpha} popular {popular}");
                    checked += 1;
                }
            }
        }
    }

    let rel = set(&[1, 2, 3, 4, 5]);
    let all = [1, 2, 3, 4, 5];
    assert_eq!((recall_at_k(&all, &rel, 5), f1_at_k(&all, &rel, 5)), (1.0, 1.0));
    assert!((ndcg_at_k(&all, &rel, 5) - 1.0).abs() < 1e-12);
    let ndcg = ndcg_at_k(&[9, 4, 8, 7, 6], &set(&[4]), 5);
    assert!((ndcg - 1.0 / 3f64.log2()).abs() < 1e-12);
    let miss = [6, 7, 8];
    assert_eq!(
        (recall_at_k(&miss, &rel, 3), f1_at_k(&miss, &rel, 3), ndcg_at_k(&miss, &rel, 3)),
        (0.0, 0.0, 0.0)
    );
    assert_eq!(recall_at_k(&all, &HashSet::new(), 5), 0.0);

    let ranking_input = (prop::collection::vec(0usize..30, 1..20), prop::collection::hash_set(0usize..30, 1..10));
    runner
        .run(&ranking_input, |(mut rec, relevant)| {
            let mut seen = HashSet::new();
            rec.retain(|i| seen.insert(*i));
            let mut previous = 0.0;
            for k in 1..=rec.len() {
                let ndcg = ndcg_at_k(&rec, &relevant, k);
                prop_assert!((-1e-12..=1.0 + 1e-12).contains(&ndcg));
                let recall = recall_at_k(&rec, &relevant, k);
                prop_assert!(recall >= previous);
                previous = recall;
            }
            Ok(())
        })
        .unwrap();

    let groups = GroupAssignment::from_exposure(vec![10, 9, 8, 1, 1, 1, 1, 1, 1, 1], 0.3);
    assert!((popularity_rate(&[vec![0, 1, 2, 3, 4]], &groups) - 0.6).abs() < 1e-12);
    assert_eq!(popularity_rate(&[vec![3, 4]], &groups), 0.0);
    assert_eq!(popularity_rate(&[vec![0, 2]], &groups), 1.0);
    println!("criterion 6: gini, exact-K ({checked} splits), ranking and popularity checks in {:?}", start.elapsed());
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

/// Best utility over mixtures of at most two rankings with equal group
/// exposure. With one equality on top of the Birkhoff polytope every vertex
/// of the feasible set lies on a segment between two permutation matrices,
/// so this enumeration is exact.
fn foe_oracle(p: &RerankProblem) -> f64 {
    let n = p.len();
    let n0 = p.popular.iter().filter(|&&x| x).count() as f64;
    let n1 = n as f64 - n0;
    let a: Vec<f64> = p.popular.iter().map(|&x| if x { 1.0 / n0 } else { -1.0 / n1 }).collect();
    let w = &p.position_weights;
    let scored: Vec<(f64, f64)> = permutations(n)
        .iter()
        .map(|order| {
            let u = order.iter().zip(w).map(|(&i, wj)| p.utilities[i] * wj).sum();
            let r = order.iter().zip(w).map(|(&i, wj)| a[i] * wj).sum();
            (u, r)
        })
        .collect();
    let mut best = f64::NEG_INFINITY;
    for &(u, r) in &scored {
        if r.abs() < 1e-12 {
            best = best.max(u);
        }
    }
    for &(u1, r1) in scored.iter().filter(|x| x.1 > 0.0) {
        for &(u2, r2) in scored.iter().filter(|x| x.1 < 0.0) {
            let theta = -r2 / (r1 - r2);
            best = best.max(theta * u1 + (1.0 - theta) * u2);
        }
    }
    best
}

#[test]
fn criterion_7_foe_matches_exhaustive_oracle() {
    let start = Instant::now();
    let mut worst = (0.0f64, 0.0f64);
    for seed in 0..20 {
        let mut r = rng::stream(seed, "foe-oracle");
        let n = r.random_range(2..=6);
        let mut popular: Vec<bool> = (0..n).map(|_| r.random_bool(0.4)).collect();
        popular[r.random_range(0..n)] = true;
        let tail = (0..n).find(|&i| !popular[i]).unwrap_or_else(|| {
            popular[0] = false;
            0
        });
        assert!(!popular[tail] && popular.iter().any(|&x| x));
        let problem = RerankProblem {
            candidates: (0..n).map(|i| 100 + i).collect(),
            utilities: (0..n).map(|_| r.random_range(0.0..5.0)).collect(),
            popular,
            position_weights: position_weights(n),
        };
        let sol = foe_solve(&problem).unwrap();
        let oracle = foe_oracle(&problem);
        let gap = (sol.objective - oracle).abs();
        assert!(gap <= 1e-4, "seed {seed}: {} vs oracle {oracle}", sol.objective);

        let mean = |want: bool| {
            let xs: Vec<f64> = (0..n).filter(|&i| problem.popular[i] == want).map(|i| sol.expected_exposure[i]).collect();
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        let parity = (mean(true) - mean(false)).abs();
        assert!(parity <= 1e-6, "seed {seed}: parity gap {parity}");

        let mut sorted = problem.utilities.clone();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let unconstrained: f64 = sorted.iter().zip(&problem.position_weights).map(|(u, w)| u * w).sum();
        assert!(sol.objective <= unconstrained + 1e-12);
        assert_eq!(foe_rerank(&problem, n).unwrap(), sol.ranking);
        worst = (worst.0.max(gap), worst.1.max(parity));
    }
    println!(
        "criterion 7: 20 instances, worst objective gap {:.2e}, worst parity gap {:.2e} in {:?}",
        worst.0,
        worst.1,
        start.elapsed()
    );
}

#[test]
fn criterion_8_long_term_fcpo_beats_static_foe() {
    let start = Instant::now();
    let cfg = ExperimentConfig { rounds: 100, ..synth_experiment(0.1, 0) };
    let data = synth::generate(&SynthConfig::large(600), 0).unwrap();
    let prepared = prepare(&data.log, &cfg).unwrap();
    let env = RecEnv::new(prepared.split.clone(), cfg.history_len);
    let mut agent = Agent::new(&cfg, Arc::new(data.embeddings.clone())).unwrap();
    train(&cfg, &env, &prepared.groups, &mut agent, 0..cfg.rounds, |_, _| Ok(())).unwrap();
    let fcpo = eval_long(&cfg, &env, &prepared.groups, &mut agent).unwrap();
    let foe = baseline_long(&cfg, &env, &prepared.groups, &data.embeddings).unwrap();
    let (f, b) = (fcpo.series.last().unwrap(), foe.series.last().unwrap());
    println!(
        "criterion 8: {} steps; FCPO gini {:.4} pop {:.4} ndcg {:.4}; MF-FOE gini {:.4} pop {:.4} ndcg {:.4} in {:?}",
        fcpo.series.len(),
        f.gini,
        f.pop_rate,
        f.ndcg,
        b.gini,
        b.pop_rate,
        b.ndcg,
        start.elapsed()
    );
    assert_eq!(fcpo.series.len(), cfg.long_steps);
    assert_eq!(foe.series.len(), cfg.long_steps);
    assert!(f.pop_rate <= b.pop_rate);
    assert!(f.gini <= b.gini);
}

fn bits(rows: &[MetricRow]) -> Vec<(usize, [u64; 5])> {
    rows.iter()
        .map(|r| (r.k, [r.recall, r.f1, r.ndcg, r.gini, r.pop_rate].map(f64::to_bits)))
        .collect()
}

/// Every CSV below `dir`, keyed by path relative to it.
fn csv_files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    for sub in ["run", "baseline", "baseline-long"] {
        for entry in std::fs::read_dir(dir.join(sub)).unwrap() {
            let path = entry.unwrap().path();
            if path.extension().is_some_and(|e| e == "csv") {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn pipeline(data: &Path, dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut cfg = synth_experiment(0.4, 11);
    cfg.data = data.to_path_buf();
    cfg.out = dir.join("run");
    cfg.pmf_epochs = 30;
    cfg.rounds = 6;
    cfg.checkpoint_every = 3;
    cfg.eval_k = vec![1, 2];
    cfg.long_steps = 25;
    cfg.update_every = 10;
    cfg.baseline_rounds = 2;
    cfg.baseline_k = 3;
    runner::cmd_ingest(&cfg).unwrap();
    let embeddings = runner::cmd_pretrain(&cfg).unwrap();
    let checkpoint = runner::cmd_train(&cfg).unwrap();
    runner::cmd_eval_short(&cfg, &checkpoint).unwrap();
    runner::cmd_eval_long(&cfg, &checkpoint).unwrap();
    let base = ExperimentConfig { embeddings, out: dir.join("baseline"), ..cfg.clone() };
    runner::cmd_baseline(&base, BaselineMethod::MfFoe, false).unwrap();
    let long = ExperimentConfig { out: dir.join("baseline-long"), ..base };
    runner::cmd_baseline(&long, BaselineMethod::MfFoe, true).unwrap();
    csv_files(dir)
}

#[test]
fn criterion_9_determinism_and_checkpoint_reload() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let data = synth::generate(&SynthConfig::default(), 5).unwrap();
    let log_path = tmp.path().join("u.data");
    synth::write_udata(&data.log, &log_path).unwrap();
    let first = pipeline(&log_path, &tmp.path().join("a"));
    let second = pipeline(&log_path, &tmp.path().join("b"));
    let names: Vec<_> = first.keys().collect();
    assert!(names.len() >= 6, "{names:?}");
    assert_eq!(first, second);

    let cfg = ExperimentConfig { rounds: 5, ..synth_experiment(0.4, 3) };
    let prepared = prepare(&data.log, &cfg).unwrap();
    let env = RecEnv::new(prepared.split.clone(), cfg.history_len);
    let table = Arc::new(data.embeddings.clone());
    let mut agent = Agent::new(&cfg, table.clone()).unwrap();
    train(&cfg, &env, &prepared.groups, &mut agent, 0..cfg.rounds, |_, _| Ok(())).unwrap();
    let before = eval_short(&cfg, &env, &prepared.groups, &agent).unwrap();
    let path = tmp.path().join("policy.fcpo");
    agent.checkpoint(&cfg, &prepared.groups, cfg.rounds as u64).save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let restored = Agent::from_checkpoint(&loaded, table).unwrap();
    let after = eval_short(&loaded.config, &env, &loaded.groups, &restored).unwrap();
    assert_eq!(bits(&before), bits(&after));
    println!(
        "criterion 9: {} CSVs byte-identical across runs; reloaded greedy eval bit-exact in {:?}",
        names.len(),
        start.elapsed()
    );
}
