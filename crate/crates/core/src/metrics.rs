use std::collections::HashSet;
use std::io::Write;

use crate::error::{Error, Result};
use crate::ingest::GroupAssignment;

/// `(popular, long-tail)` counts in one list.
pub fn exposure_counts(items: &[usize], groups: &GroupAssignment) -> (usize, usize) {
    let popular = items.iter().filter(|&&i| groups.is_popular(i)).count();
    (popular, items.len() - popular)
}

/// `|count_0 / size_0 - count_1 / size_1|`
pub fn parity_gap(counts: (usize, usize), group_sizes: (usize, usize)) -> Result<f64> {
    if group_sizes.0 == 0 || group_sizes.1 == 0 {
        return Err(Error::InvalidArgument("both groups must be nonempty".into()));
    }
    Ok((counts.0 as f64 / group_sizes.0 as f64 - counts.1 as f64 / group_sizes.1 as f64).abs())
}

/// Per-list ratio check `count_0 / count_1 <= alpha`, in multiplicative form.
pub fn exact_k_satisfied(count_popular: usize, k: usize, alpha: f64) -> bool {
    let long_tail = k.saturating_sub(count_popular) as f64;
    count_popular as f64 <= alpha * long_tail + 1e-9
}

/// Fairness level and the cost limit derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct FairnessSpec {
    pub alpha: Option<f64>,
    pub alpha_prime: f64,
    pub k: usize,
    pub t: usize,
    pub gamma_c: f64,
}

impl FairnessSpec {
    pub fn from_alpha(alpha: f64, k: usize, t: usize, gamma_c: f64) -> Result<Self> {
        if !(alpha > 0.0) {
            return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
        }
        Ok(FairnessSpec { alpha: Some(alpha), alpha_prime: alpha / (1.0 + alpha), k, t, gamma_c })
    }

    pub fn from_alpha_prime(alpha_prime: f64, k: usize, t: usize, gamma_c: f64) -> Result<Self> {
        if !(alpha_prime > 0.0 && alpha_prime <= 1.0) {
            return Err(Error::InvalidArgument(format!("alpha' must lie in (0,1], got {alpha_prime}")));
        }
        Ok(FairnessSpec { alpha: None, alpha_prime, k, t, gamma_c })
    }

    /// Per-step budget `alpha' K`.
    pub fn step_budget(&self) -> f64 {
        self.alpha_prime * self.k as f64
    }

    pub fn cost_limit(&self) -> f64 {
        cost_limit(self)
    }
}

/// `d = sum_{t=0}^{T-1} gamma_c^t alpha' K`
pub fn cost_limit(spec: &FairnessSpec) -> f64 {
    (0..spec.t).map(|t| spec.gamma_c.powi(t as i32)).sum::<f64>() * spec.step_budget()
}

fn hits(recommended: &[usize], relevant: &HashSet<usize>, k: usize) -> usize {
    recommended.iter().take(k).filter(|i| relevant.contains(i)).count()
}

pub fn recall_at_k(recommended: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    hits(recommended, relevant, k) as f64 / relevant.len() as f64
}

pub fn precision_at_k(recommended: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    if relevant.is_empty() || k == 0 {
        return 0.0;
    }
    hits(recommended, relevant, k) as f64 / k as f64
}

pub fn f1_at_k(recommended: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    let p = precision_at_k(recommended, relevant, k);
    let r = recall_at_k(recommended, relevant, k);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn ndcg_at_k(recommended: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let discount = |rank: usize| 1.0 / ((rank + 1) as f64).log2();
    let dcg: f64 = recommended
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, i)| relevant.contains(i))
        .map(|(pos, _)| discount(pos + 1))
        .sum();
    let ideal: f64 = (1..=k.min(relevant.len())).map(discount).sum();
    dcg / ideal
}

/// `sum_i sum_j |g_i - g_j| / (2 n^2 mean)`, via the sorted-order identity.
pub fn gini_index(exposures: &[f64]) -> Result<f64> {
    let n = exposures.len();
    let total: f64 = exposures.iter().sum();
    if n == 0 || !(total > 0.0) {
        return Err(Error::InvalidArgument("gini index needs a positive total exposure".into()));
    }
    let mut sorted = exposures.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pairwise: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, g)| (2.0 * i as f64 - n as f64 + 1.0) * g)
        .sum::<f64>()
        * 2.0;
    let mean = total / n as f64;
    Ok(pairwise / (2.0 * (n * n) as f64 * mean))
}

/// Share of recommendation slots holding popular items.
pub fn popularity_rate(lists: &[Vec<usize>], groups: &GroupAssignment) -> f64 {
    let total: usize = lists.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let popular: usize = lists.iter().map(|l| exposure_counts(l, groups).0).sum();
    popular as f64 / total as f64
}

/// One row of a metric report; fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub k: usize,
    pub recall: f64,
    pub f1: f64,
    pub ndcg: f64,
    pub gini: f64,
    pub pop_rate: f64,
}

pub const METRIC_HEADER: &str = "K,recall,f1,ndcg,gini,pop_rate";

/// Averages ranking metrics over users with nonempty relevant sets; Gini
/// and popularity rate are computed over every list.
pub fn evaluate_lists(
    lists: &[Vec<usize>],
    relevant: &[HashSet<usize>],
    k: usize,
    groups: &GroupAssignment,
) -> Result<MetricRow> {
    let mut n = 0usize;
    let (mut recall, mut f1, mut ndcg) = (0.0, 0.0, 0.0);
    for (list, rel) in lists.iter().zip(relevant) {
        if rel.is_empty() {
            continue;
        }
        n += 1;
        recall += recall_at_k(list, rel, k);
        f1 += f1_at_k(list, rel, k);
        ndcg += ndcg_at_k(list, rel, k);
    }
    let n = n.max(1) as f64;
    let mut exposure = vec![0.0; groups.n_items()];
    let truncated: Vec<Vec<usize>> = lists.iter().map(|l| l.iter().take(k).copied().collect()).collect();
    for &i in truncated.iter().flatten() {
        exposure[i] += 1.0;
    }
    Ok(MetricRow {
        k,
        recall: recall / n,
        f1: f1 / n,
        ndcg: ndcg / n,
        gini: gini_index(&exposure)?,
        pop_rate: popularity_rate(&truncated, groups),
    })
}

/// Writes rows as percentages.
pub fn write_metric_rows(w: &mut impl Write, rows: &[MetricRow]) -> std::io::Result<()> {
    writeln!(w, "{METRIC_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.k,
            100.0 * r.recall,
            100.0 * r.f1,
            100.0 * r.ndcg,
            100.0 * r.gini,
            100.0 * r.pop_rate
        )?;
    }
    Ok(())
}

/// One point of a long-term evaluation series; fractions in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesPoint {
    pub step: usize,
    pub ndcg: f64,
    pub gini: f64,
    pub pop_rate: f64,
}

pub const SERIES_HEADER: &str = "step,ndcg,gini,pop_rate";

pub fn write_series(w: &mut impl Write, series: &[SeriesPoint]) -> std::io::Result<()> {
    writeln!(w, "{SERIES_HEADER}")?;
    for p in series {
        writeln!(w, "{},{:.6},{:.6},{:.6}", p.step, 100.0 * p.ndcg, 100.0 * p.gini, 100.0 * p.pop_rate)?;
    }
    Ok(())
}

/// Cumulative metrics over a growing per-user list: each step appends one
/// item per user. NDCG treats the accumulated list as the ranking; Gini is
/// over all recommendations so far; an item counts as popular under the
/// labels in force when it was recommended.
#[derive(Debug, Clone)]
pub struct CumulativeTracker {
    relevant: Vec<HashSet<usize>>,
    dcg: Vec<f64>,
    exposure: Vec<f64>,
    slots: usize,
    popular_slots: usize,
    step: usize,
}

impl CumulativeTracker {
    /// `relevant[u]` is the relevant set of the u-th tracked user.
    pub fn new(relevant: Vec<HashSet<usize>>, n_items: usize) -> Self {
        CumulativeTracker {
            dcg: vec![0.0; relevant.len()],
            relevant,
            exposure: vec![0.0; n_items],
            slots: 0,
            popular_slots: 0,
            step: 0,
        }
    }

    pub fn exposure(&self) -> &[f64] {
        &self.exposure
    }

    /// Records `items[u]` for every tracked user and returns the new point.
    pub fn record(&mut self, items: &[usize], groups: &GroupAssignment) -> Result<SeriesPoint> {
        if items.len() != self.relevant.len() {
            return Err(Error::Shape { expected: self.relevant.len(), got: items.len() });
        }
        let rank = self.step + 1;
        let discount = 1.0 / ((rank + 1) as f64).log2();
        let (mut ndcg, mut n) = (0.0, 0usize);
        for (u, &item) in items.iter().enumerate() {
            self.exposure[item] += 1.0;
            self.slots += 1;
            if groups.is_popular(item) {
                self.popular_slots += 1;
            }
            let rel = &self.relevant[u];
            if rel.is_empty() {
                continue;
            }
            if rel.contains(&item) {
                self.dcg[u] += discount;
            }
            let ideal: f64 = (1..=rank.min(rel.len())).map(|j| 1.0 / ((j + 1) as f64).log2()).sum();
            ndcg += self.dcg[u] / ideal;
            n += 1;
        }
        let point = SeriesPoint {
            step: self.step,
            ndcg: ndcg / n.max(1) as f64,
            gini: gini_index(&self.exposure)?,
            pop_rate: self.popular_slots as f64 / self.slots as f64,
        };
        self.step += 1;
        Ok(point)
    }
}
