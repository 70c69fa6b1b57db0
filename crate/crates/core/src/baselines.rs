use std::cmp::Ordering;
use std::collections::HashSet;

use rayon::prelude::*;

use crate::env::regroup;
use crate::error::{Error, Result};
use crate::ingest::{GroupAssignment, SplitDataset};
use crate::metrics::{CumulativeTracker, SeriesPoint};
use crate::pmf::EmbeddingTable;

fn by_score_desc(scores: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Top `k` items by inner-product score, skipping `exclude`d items; ties
/// go to the lower id.
pub fn mf_topk(user: usize, embeddings: &EmbeddingTable, k: usize, exclude: &[bool]) -> Result<Vec<usize>> {
    if user >= embeddings.n_users {
        return Err(Error::OutOfRange { what: "user", index: user, len: embeddings.n_users });
    }
    Ok(topk_by_scores(&embeddings.user_scores(user), k, exclude)?.0)
}

/// Returns the chosen ids and their scores.
pub fn topk_by_scores(scores: &[f64], k: usize, exclude: &[bool]) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut ids: Vec<usize> = (0..scores.len()).filter(|&i| !exclude.get(i).copied().unwrap_or(false)).collect();
    if k > ids.len() {
        return Err(Error::InvalidArgument(format!("asked for {k} items but only {} are available", ids.len())));
    }
    ids.sort_by(by_score_desc(scores));
    ids.truncate(k);
    let s = ids.iter().map(|&i| scores[i]).collect();
    Ok((ids, s))
}

/// `1 / log2(j + 1)` for positions `j = 1..=n`.
pub fn position_weights(n: usize) -> Vec<f64> {
    (1..=n).map(|j| 1.0 / ((j + 1) as f64).log2()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RerankProblem {
    pub candidates: Vec<usize>,
    pub utilities: Vec<f64>,
    pub popular: Vec<bool>,
    pub position_weights: Vec<f64>,
}

impl RerankProblem {
    pub fn new(candidates: Vec<usize>, utilities: Vec<f64>, groups: &GroupAssignment) -> Self {
        let popular = candidates.iter().map(|&i| groups.is_popular(i)).collect();
        let position_weights = position_weights(candidates.len());
        RerankProblem { candidates, utilities, popular, position_weights }
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.utilities.len() != n || self.popular.len() != n || self.position_weights.len() != n {
            return Err(Error::InvalidArgument("rerank problem fields differ in length".into()));
        }
        if self.position_weights.windows(2).any(|w| !(w[0] > w[1])) || self.position_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidArgument("position weights must be positive and strictly decreasing".into()));
        }
        Ok(())
    }

    /// Signed group weights: `1/|G0|` on popular, `-1/|G1|` on long-tail.
    fn parity_weights(&self) -> Option<Vec<f64>> {
        let n0 = self.popular.iter().filter(|&&p| p).count();
        let n1 = self.len() - n0;
        if n0 == 0 || n1 == 0 {
            return None;
        }
        Some(self.popular.iter().map(|&p| if p { 1.0 / n0 as f64 } else { -1.0 / n1 as f64 }).collect())
    }
}

/// Solution of the exposure-constrained ranking program.
#[derive(Debug, Clone, PartialEq)]
pub struct FoeSolution {
    /// Row-major `N x N`: `p[i * n + j]` is the chance candidate `i` sits at position `j`.
    pub matrix: Vec<f64>,
    pub expected_exposure: Vec<f64>,
    pub objective: f64,
    /// Item ids ordered by expected exposure.
    pub ranking: Vec<usize>,
}

impl FoeSolution {
    pub fn top(&self, k: usize) -> Vec<usize> {
        self.ranking.iter().take(k).copied().collect()
    }
}

/// Candidate order (best first) for the Lagrangian key `u + lambda a`.
fn lagrangian_order(p: &RerankProblem, a: &[f64], lambda: f64) -> Vec<usize> {
    let key: Vec<f64> = p.utilities.iter().zip(a).map(|(u, ai)| u + lambda * ai).collect();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&i, &j| key[j].total_cmp(&key[i]).then(p.utilities[j].total_cmp(&p.utilities[i])).then(i.cmp(&j)));
    order
}

fn exposure_of(order: &[usize], w: &[f64]) -> Vec<f64> {
    let mut e = vec![0.0; order.len()];
    for (pos, &i) in order.iter().enumerate() {
        e[i] = w[pos];
    }
    e
}

/// Maximizes expected utility `sum_ij u_i P_ij w_j` over doubly stochastic
/// `P` subject to equal average exposure of the two groups.
///
/// For a fixed multiplier the Lagrangian is maximized by sorting on
/// `u_i + lambda a_i`. The multiplier where the parity residual changes
/// sign is found among the pairwise breakpoints, and the two sorts on
/// either side of it are mixed so that parity holds exactly.
pub fn foe_solve(problem: &RerankProblem) -> Result<FoeSolution> {
    problem.validate()?;
    let n = problem.len();
    let w = &problem.position_weights;
    let Some(a) = problem.parity_weights() else {
        return Ok(pure(problem, &lagrangian_order(problem, &vec![0.0; n], 0.0)));
    };
    let residual = |order: &[usize]| -> f64 { exposure_of(order, w).iter().zip(&a).map(|(e, ai)| e * ai).sum() };
    let base = lagrangian_order(problem, &a, 0.0);
    let scale = w[0];
    if residual(&base).abs() <= 1e-12 * scale {
        return Ok(pure(problem, &base));
    }
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| problem.popular[i]);
    let gap = a[pos[0]] - a[neg[0]];
    let mut breaks: Vec<f64> = pos
        .iter()
        .flat_map(|&i| neg.iter().map(move |&j| (problem.utilities[j] - problem.utilities[i]) / gap))
        .collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    // Representative multiplier strictly inside each interval between breakpoints.
    let probe = |k: usize| -> f64 {
        if k == 0 {
            breaks[0] - 1.0
        } else if k == breaks.len() {
            breaks[k - 1] + 1.0
        } else {
            0.5 * (breaks[k - 1] + breaks[k])
        }
    };
    let at = |k: usize| {
        let order = lagrangian_order(problem, &a, probe(k));
        let r = residual(&order);
        (order, r)
    };
    // Residual is nondecreasing in lambda; find the first interval with r >= 0.
    let (mut lo, mut hi) = (0usize, breaks.len());
    while lo < hi {
        let mid = (lo + hi) / 2;
        if at(mid).1 >= 0.0 {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let (upper, r_up) = at(lo);
    if r_up.abs() <= 1e-12 * scale || lo == 0 {
        return Ok(pure(problem, &upper));
    }
    let (lower, r_lo) = at(lo - 1);
    let theta = -r_lo / (r_up - r_lo);
    let mut matrix = vec![0.0; n * n];
    for (pos, (&i, &j)) in upper.iter().zip(&lower).enumerate() {
        matrix[i * n + pos] += theta;
        matrix[j * n + pos] += 1.0 - theta;
    }
    let eu = exposure_of(&upper, w);
    let el = exposure_of(&lower, w);
    let expected: Vec<f64> = eu.iter().zip(&el).map(|(x, y)| theta * x + (1.0 - theta) * y).collect();
    Ok(finish(problem, matrix, expected))
}

fn pure(problem: &RerankProblem, order: &[usize]) -> FoeSolution {
    let n = problem.len();
    let mut matrix = vec![0.0; n * n];
    for (pos, &i) in order.iter().enumerate() {
        matrix[i * n + pos] = 1.0;
    }
    finish(problem, matrix, exposure_of(order, &problem.position_weights))
}

fn finish(problem: &RerankProblem, matrix: Vec<f64>, expected: Vec<f64>) -> FoeSolution {
    let objective = problem.utilities.iter().zip(&expected).map(|(u, e)| u * e).sum();
    let mut idx: Vec<usize> = (0..problem.len()).collect();
    idx.sort_by(|&i, &j| {
        expected[j]
            .total_cmp(&expected[i])
            .then(problem.utilities[j].total_cmp(&problem.utilities[i]))
            .then(problem.candidates[i].cmp(&problem.candidates[j]))
    });
    FoeSolution {
        ranking: idx.iter().map(|&i| problem.candidates[i]).collect(),
        matrix,
        expected_exposure: expected,
        objective,
    }
}

/// Deterministic top-`k` of the fair ranking program.
pub fn foe_rerank(problem: &RerankProblem, k: usize) -> Result<Vec<usize>> {
    if k > problem.len() {
        return Err(Error::InvalidArgument(format!("K = {k} exceeds {} candidates", problem.len())));
    }
    Ok(foe_solve(problem)?.top(k))
}

/// Greedy by utility with at most `floor(alpha' K)` popular items.
pub fn quota_greedy_rerank(problem: &RerankProblem, k: usize, alpha_prime: f64) -> Result<Vec<usize>> {
    let quota = (alpha_prime * k as f64 + 1e-9).floor() as usize;
    let mut order: Vec<usize> = (0..problem.len()).collect();
    order.sort_by(|&i, &j| {
        problem.utilities[j]
            .total_cmp(&problem.utilities[i])
            .then(problem.candidates[i].cmp(&problem.candidates[j]))
    });
    let mut out = Vec::with_capacity(k);
    let mut popular = 0;
    for i in order {
        if out.len() == k {
            break;
        }
        if problem.popular[i] {
            if popular == quota {
                continue;
            }
            popular += 1;
        }
        out.push(problem.candidates[i]);
    }
    if out.len() < k {
        return Err(Error::InvalidArgument(format!(
            "only {} items fit a list of {k} with at most {quota} popular items",
            out.len()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaselineMethod {
    Mf,
    MfFoe,
    Quota,
}

impl std::str::FromStr for BaselineMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mf" => Ok(BaselineMethod::Mf),
            "mf-foe" => Ok(BaselineMethod::MfFoe),
            "quota" => Ok(BaselineMethod::Quota),
            other => Err(Error::Config(format!("unknown baseline method `{other}` (mf, mf-foe, quota)"))),
        }
    }
}

/// Static list for one user: MF top candidates, optionally reranked.
#[allow(clippy::too_many_arguments)]
pub fn baseline_list(
    method: BaselineMethod,
    user: usize,
    embeddings: &EmbeddingTable,
    groups: &GroupAssignment,
    exclude: &[bool],
    k: usize,
    n_candidates: usize,
    alpha_prime: f64,
) -> Result<Vec<usize>> {
    let scores = embeddings.user_scores(user);
    let available = (0..scores.len()).filter(|&i| !exclude.get(i).copied().unwrap_or(false)).count();
    match method {
        BaselineMethod::Mf => Ok(topk_by_scores(&scores, k, exclude)?.0),
        BaselineMethod::MfFoe | BaselineMethod::Quota => {
            let (cands, utils) = topk_by_scores(&scores, n_candidates.max(k).min(available), exclude)?;
            let problem = RerankProblem::new(cands, utils, groups);
            if method == BaselineMethod::MfFoe {
                foe_rerank(&problem, k)
            } else {
                quota_greedy_rerank(&problem, k, alpha_prime)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct LongTermRun {
    pub series: Vec<SeriesPoint>,
    /// Accumulated list per evaluated user.
    pub lists: Vec<Vec<usize>>,
    /// Group labels used in each round.
    pub round_groups: Vec<GroupAssignment>,
    pub accumulated_exposure: Vec<u64>,
}

/// Rounds of static MF-FOE lists of length `k`. Labels are frozen within a
/// round and recomputed from accumulated exposure between rounds; each
/// round reranks the top `min(2k, remaining)` unseen items.
pub fn mf_foe_longterm(
    split: &SplitDataset,
    embeddings: &EmbeddingTable,
    initial: &GroupAssignment,
    users: &[usize],
    rounds: usize,
    k: usize,
) -> Result<LongTermRun> {
    let n_items = split.n_items;
    let relevant: Vec<HashSet<usize>> = users.iter().map(|&u| split.test[u].iter().map(|x| x.item_id).collect()).collect();
    let mut tracker = CumulativeTracker::new(relevant, n_items);
    let mut excluded: Vec<Vec<bool>> = users
        .iter()
        .map(|&u| {
            let mut m = vec![false; n_items];
            for i in split.seen_items(u) {
                m[i] = true;
            }
            m
        })
        .collect();
    let mut lists = vec![Vec::new(); users.len()];
    let mut accumulated = vec![0u64; n_items];
    let mut groups = initial.clone();
    let mut series = Vec::with_capacity(rounds * k);
    let mut round_groups = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        let round_lists: Vec<Vec<usize>> = users
            .par_iter()
            .zip(&excluded)
            .map(|(&u, ex)| baseline_list(BaselineMethod::MfFoe, u, embeddings, &groups, ex, k, 2 * k, 1.0))
            .collect::<Result<_>>()?;
        for j in 0..k {
            let step_items: Vec<usize> = round_lists.iter().map(|l| l[j]).collect();
            series.push(tracker.record(&step_items, &groups)?);
        }
        for (u, l) in round_lists.into_iter().enumerate() {
            for &i in &l {
                excluded[u][i] = true;
                accumulated[i] += 1;
            }
            lists[u].extend(l);
        }
        round_groups.push(groups.clone());
        groups = regroup(initial, &accumulated);
    }
    Ok(LongTermRun { series, lists, round_groups, accumulated_exposure: accumulated })
}
