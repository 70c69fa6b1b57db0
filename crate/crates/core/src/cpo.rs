use std::fmt;
use std::io::Write;

use crate::critic::{CriticNet, FitReport};
use crate::error::{Error, Result};
use crate::nn::gaussian::{log_density, log_density_grad};
use crate::nn::objective::Objective;
use crate::nn::params::{axpy, dot};
use crate::nn::{conjugate_gradient, fisher_vector_product, mean_kl, par_accumulate, GaussianHead, GaussianPolicyModel};

#[derive(Debug, Clone, PartialEq)]
pub struct CpoConfig {
    pub delta: f64,
    pub cost_limit: f64,
    pub backtrack_ratio: f64,
    pub max_backtracks: usize,
    pub gamma_r: f64,
    pub gamma_c: f64,
    pub gae_lambda: f64,
    pub cg_iters: usize,
    pub damping: f64,
    /// L-BFGS iterations per critic fit.
    pub critic_iters: usize,
}

impl Default for CpoConfig {
    fn default() -> Self {
        CpoConfig {
            delta: 0.01,
            cost_limit: f64::INFINITY,
            backtrack_ratio: 0.8,
            max_backtracks: 10,
            gamma_r: 0.99,
            gamma_c: 0.99,
            gae_lambda: 0.95,
            cg_iters: 10,
            damping: 0.1,
            critic_iters: 25,
        }
    }
}

impl CpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.delta > 0.0) {
            return bad(format!("delta must be positive, got {}", self.delta));
        }
        if !(self.cost_limit >= 0.0) {
            return bad(format!("cost limit must be nonnegative, got {}", self.cost_limit));
        }
        if !(self.backtrack_ratio > 0.0 && self.backtrack_ratio < 1.0) {
            return bad(format!("backtrack ratio must lie in (0,1), got {}", self.backtrack_ratio));
        }
        for (name, g) in [("gamma_r", self.gamma_r), ("gamma_c", self.gamma_c)] {
            if !(g > 0.0 && g <= 1.0) {
                return bad(format!("{name} must lie in (0,1], got {g}"));
            }
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad(format!("gae_lambda must lie in [0,1], got {}", self.gae_lambda));
        }
        if !(self.damping >= 0.0) || self.cg_iters == 0 {
            return bad("damping must be nonnegative and cg_iters positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepType {
    Feasible,
    InfeasibleRecovery,
    Rejected,
}

impl fmt::Display for StepType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StepType::Feasible => "feasible",
            StepType::InfeasibleRecovery => "infeasible-recovery",
            StepType::Rejected => "rejected",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub surrogate_improvement: f64,
    pub kl_after: f64,
    /// Projected constraint value `J_C` after the step.
    pub cost_estimate_after: f64,
    pub step_type: StepType,
    pub backtracks_used: usize,
}

/// One transition as seen by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutStep<I> {
    /// Policy input; re-evaluated under candidate parameters.
    pub input: I,
    /// Critic input, fixed at collection time.
    pub features: Vec<f64>,
    pub action: Vec<f64>,
    /// Behavior-policy log-density of `action`.
    pub log_density: f64,
    pub reward: f64,
    pub cost: f64,
}

/// A contiguous run of transitions from one user.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout<I> {
    pub steps: Vec<RolloutStep<I>>,
    /// Critic input of the state after the last step when the episode
    /// continues; `None` marks the last step as terminal.
    pub bootstrap: Option<Vec<f64>>,
}

/// Per-transition estimates, flattened in rollout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    /// GAE reward advantages, normalized over the batch.
    pub advantages: Vec<f64>,
    pub raw_advantages: Vec<f64>,
    /// GAE cost advantages, not normalized.
    pub cost_advantages: Vec<f64>,
    /// Discounted reward-to-go.
    pub returns: Vec<f64>,
    /// Discounted cost-to-go.
    pub cost_returns: Vec<f64>,
    /// Frozen TD(0) targets `r + gamma V(s')`.
    pub value_targets: Vec<f64>,
    pub cost_targets: Vec<f64>,
    /// Batch mean of discounted cost from each rollout's first step.
    pub j_c: f64,
    /// Mean over rollouts of `sum_{t < len} gamma_c^t`.
    pub horizon_scale: f64,
}

fn gae(signal: &[f64], values: &[f64], last: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = signal.len();
    let mut adv = vec![0.0; n];
    let mut targets = vec![0.0; n];
    let mut running = 0.0;
    for t in (0..n).rev() {
        let next = if t + 1 < n { values[t + 1] } else { last };
        targets[t] = signal[t] + gamma * next;
        let delta = targets[t] - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
    }
    (adv, targets)
}

fn discounted_to_go(signal: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; signal.len()];
    let mut acc = 0.0;
    for t in (0..signal.len()).rev() {
        acc = signal[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

pub fn compute_advantages<I>(
    rollouts: &[Rollout<I>],
    value_critic: &CriticNet,
    cost_critic: &CriticNet,
    cfg: &CpoConfig,
) -> Result<Advantages> {
    let n_rollouts = rollouts.iter().filter(|r| !r.steps.is_empty()).count();
    if n_rollouts == 0 {
        return Err(Error::EmptyBatch("no transitions to learn from"));
    }
    let mut out = Advantages {
        advantages: Vec::new(),
        raw_advantages: Vec::new(),
        cost_advantages: Vec::new(),
        returns: Vec::new(),
        cost_returns: Vec::new(),
        value_targets: Vec::new(),
        cost_targets: Vec::new(),
        j_c: 0.0,
        horizon_scale: 0.0,
    };
    for r in rollouts.iter().filter(|r| !r.steps.is_empty()) {
        let rewards: Vec<f64> = r.steps.iter().map(|s| s.reward).collect();
        let costs: Vec<f64> = r.steps.iter().map(|s| s.cost).collect();
        let mut v = Vec::with_capacity(rewards.len());
        let mut vc = Vec::with_capacity(rewards.len());
        for s in &r.steps {
            v.push(value_critic.estimate(&s.features)?);
            vc.push(cost_critic.estimate(&s.features)?);
        }
        let (last_v, last_c) = match &r.bootstrap {
            Some(f) => (value_critic.estimate(f)?, cost_critic.estimate(f)?),
            None => (0.0, 0.0),
        };
        let (a, yt) = gae(&rewards, &v, last_v, cfg.gamma_r, cfg.gae_lambda);
        let (ac, yc) = gae(&costs, &vc, last_c, cfg.gamma_c, cfg.gae_lambda);
        let cost_to_go = discounted_to_go(&costs, cfg.gamma_c);
        out.j_c += cost_to_go[0];
        out.horizon_scale += (0..rewards.len()).map(|t| cfg.gamma_c.powi(t as i32)).sum::<f64>();
        out.raw_advantages.extend(a);
        out.cost_advantages.extend(ac);
        out.returns.extend(discounted_to_go(&rewards, cfg.gamma_r));
        out.cost_returns.extend(cost_to_go);
        out.value_targets.extend(yt);
        out.cost_targets.extend(yc);
    }
    out.j_c /= n_rollouts as f64;
    out.horizon_scale /= n_rollouts as f64;
    out.advantages = normalize(&out.raw_advantages);
    if out.advantages.iter().chain(&out.cost_advantages).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("advantages"));
    }
    Ok(out)
}

/// Zero mean, unit variance; centered only when the spread is negligible.
fn normalize(x: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        x.iter().map(|v| v - mean).collect()
    } else {
        x.iter().map(|v| (v - mean) / std).collect()
    }
}

/// The sampled data a policy update is computed from.
#[derive(Debug, Clone)]
pub struct Batch<'a, I> {
    pub inputs: Vec<&'a I>,
    pub actions: Vec<&'a [f64]>,
    pub old_log_density: Vec<f64>,
    pub advantages: Vec<f64>,
    pub cost_advantages: Vec<f64>,
    pub j_c: f64,
    pub horizon_scale: f64,
}

impl<'a, I> Batch<'a, I> {
    pub fn new(rollouts: &'a [Rollout<I>], adv: &Advantages) -> Self {
        let steps: Vec<&RolloutStep<I>> = rollouts.iter().flat_map(|r| &r.steps).collect();
        Batch {
            inputs: steps.iter().map(|s| &s.input).collect(),
            actions: steps.iter().map(|s| s.action.as_slice()).collect(),
            old_log_density: steps.iter().map(|s| s.log_density).collect(),
            advantages: adv.advantages.clone(),
            cost_advantages: adv.cost_advantages.clone(),
            j_c: adv.j_c,
            horizon_scale: adv.horizon_scale,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

/// `E[(pi_theta / pi_old) * weight]` over a batch, as a function of theta.
pub struct Surrogate<'b, 'a, M: GaussianPolicyModel> {
    pub model: &'b M,
    pub batch: &'b Batch<'a, M::Input>,
    pub weights: &'b [f64],
}

impl<M: GaussianPolicyModel> Objective for Surrogate<'_, '_, M> {
    fn value(&self, params: &[f64]) -> f64 {
        let b = self.batch;
        let total = par_accumulate(b.len(), 1, |i, acc| {
            let head = self.model.head(params, b.inputs[i]);
            let ratio = (log_density(&head, b.actions[i]) - b.old_log_density[i]).exp();
            acc[0] += ratio * self.weights[i];
        });
        total[0] / b.len() as f64
    }

    fn value_and_gradient(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let b = self.batch;
        let dim = self.model.n_params();
        let mut acc = par_accumulate(b.len(), dim + 1, |i, acc| {
            let head = self.model.head(params, b.inputs[i]);
            let ratio = (log_density(&head, b.actions[i]) - b.old_log_density[i]).exp();
            let w = ratio * self.weights[i];
            acc[dim] += w;
            let (d_mu, d_ls) = log_density_grad(&head, b.actions[i]);
            let d_mu: Vec<f64> = d_mu.iter().map(|x| x * w).collect();
            let d_ls: Vec<f64> = d_ls.iter().map(|x| x * w).collect();
            self.model.head_vjp(params, b.inputs[i], &d_mu, &d_ls, &mut acc[..dim]);
        });
        let n = b.len() as f64;
        let value = acc.pop().unwrap() / n;
        acc.iter_mut().for_each(|x| *x /= n);
        (value, acc)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateGradients {
    pub g: Vec<f64>,
    pub b: Vec<f64>,
    /// `J_C - d`
    pub c: f64,
}

/// Objective gradient `g`, constraint gradient `b` and constraint offset
/// `c` at the behavior parameters. The cost surrogate is a per-step
/// average, so it is scaled by the expected discounted horizon to express
/// the change of the trajectory-level cost.
pub fn surrogate_gradients<M: GaussianPolicyModel>(
    model: &M,
    params: &[f64],
    batch: &Batch<'_, M::Input>,
    cost_limit: f64,
) -> SurrogateGradients {
    let g = Surrogate { model, batch, weights: &batch.advantages }.value_and_gradient(params).1;
    let mut b = Surrogate { model, batch, weights: &batch.cost_advantages }.value_and_gradient(params).1;
    b.iter_mut().for_each(|x| *x *= batch.horizon_scale);
    SurrogateGradients { g, b, c: batch.j_c - cost_limit }
}

/// Which branch of the dual produced the step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DualCase {
    /// Constraint has no effect; plain trust-region ascent.
    Slack,
    /// Constraint may bind; two-multiplier solution.
    Active,
    /// Trust region cannot reach feasibility; pure cost descent.
    Recovery,
    /// Nothing to gain and nothing to repair.
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepSolution {
    pub direction: Vec<f64>,
    pub step_type: StepType,
    pub case: DualCase,
    pub lambda: f64,
    pub nu: f64,
}

const EPS: f64 = 1e-8;

/// Solves `max g'x  s.t.  c + b'x <= 0,  x'Hx / 2 <= delta` given
/// `hg = H^-1 g` and `hb = H^-1 b`, via the closed-form dual.
pub fn solve_dual(g: &[f64], b: &[f64], hg: &[f64], hb: &[f64], c: f64, delta: f64) -> Result<StepSolution> {
    let q = dot(g, hg);
    let r = dot(g, hb);
    let s = dot(b, hb);
    let step_type = if c > 0.0 { StepType::InfeasibleRecovery } else { StepType::Feasible };
    let recovery = |s: f64| -> Result<StepSolution> {
        if !(s > EPS) {
            return Err(Error::DegenerateConstraint { s, c });
        }
        let scale = -(2.0 * delta / s).sqrt();
        Ok(StepSolution {
            direction: hb.iter().map(|x| scale * x).collect(),
            step_type,
            case: DualCase::Recovery,
            lambda: 0.0,
            nu: -scale,
        })
    };
    let trpo = |q: f64| StepSolution {
        direction: hg.iter().map(|x| (2.0 * delta / q).sqrt() * x).collect(),
        step_type,
        case: DualCase::Slack,
        lambda: (q / (2.0 * delta)).sqrt(),
        nu: 0.0,
    };
    if !(q.is_finite() && r.is_finite() && s.is_finite()) {
        return Err(Error::NonFinite("trust-region dual"));
    }
    if q <= EPS {
        if c > 0.0 {
            return recovery(s);
        }
        return Ok(StepSolution {
            direction: vec![0.0; g.len()],
            step_type,
            case: DualCase::Zero,
            lambda: 0.0,
            nu: 0.0,
        });
    }
    if s <= EPS {
        if c > 0.0 {
            return Err(Error::DegenerateConstraint { s, c });
        }
        return Ok(trpo(q));
    }
    let a = q - r * r / s;
    let bb = 2.0 * delta - c * c / s;
    if c >= 0.0 && bb < 0.0 {
        return recovery(s);
    }
    if c < 0.0 && bb < 0.0 {
        // The whole trust region is feasible.
        return Ok(trpo(q));
    }
    let bound = if c != 0.0 {
        -r / c
    } else if r > 0.0 {
        f64::NEG_INFINITY
    } else if r < 0.0 {
        f64::INFINITY
    } else {
        0.0
    };
    let (la, lb) = if c >= 0.0 {
        ((bound, f64::INFINITY), (0.0, bound))
    } else {
        ((0.0, bound), (bound, f64::INFINITY))
    };
    let proj = |x: f64, (lo, hi): (f64, f64)| lo.max(hi.min(x));
    let lam_a = proj((a / bb).sqrt(), la);
    let lam_b = proj((q / (2.0 * delta)).sqrt(), lb);
    let f_a = |l: f64| {
        if !(l > 0.0) || !l.is_finite() || a < 0.0 {
            f64::NEG_INFINITY
        } else {
            -0.5 * (a / (l + EPS) + bb * l) + r * c / s
        }
    };
    let f_b = |l: f64| {
        if !(l > 0.0) || !l.is_finite() {
            f64::NEG_INFINITY
        } else {
            -0.5 * (q / (l + EPS) + 2.0 * delta * l)
        }
    };
    let (fa, fb) = (f_a(lam_a), f_b(lam_b));
    if fa == f64::NEG_INFINITY && fb == f64::NEG_INFINITY {
        // Objective and constraint gradients are parallel at the boundary.
        return if c > 0.0 { recovery(s) } else { Ok(trpo(q)) };
    }
    let lambda = if fa >= fb { lam_a } else { lam_b };
    let nu = (lambda * c + r).max(0.0) / s;
    let direction: Vec<f64> = hg.iter().zip(hb).map(|(x, y)| (x - nu * y) / lambda).collect();
    let case = if nu > 0.0 { DualCase::Active } else { DualCase::Slack };
    Ok(StepSolution { direction, step_type, case, lambda, nu })
}

/// Runs conjugate gradient for `H^-1 g` and `H^-1 b`, then the dual.
pub fn solve_step<F>(g: &[f64], b: &[f64], c: f64, mut fvp: F, cfg: &CpoConfig) -> Result<StepSolution>
where
    F: FnMut(&[f64]) -> Vec<f64>,
{
    let hg = conjugate_gradient(&mut fvp, g, cfg.cg_iters, 1e-10)?;
    let hb = conjugate_gradient(&mut fvp, b, cfg.cg_iters, 1e-10)?;
    solve_dual(g, b, &hg, &hb, c, cfg.delta)
}

fn old_heads<M: GaussianPolicyModel>(model: &M, params: &[f64], batch: &Batch<'_, M::Input>) -> Vec<GaussianHead> {
    use rayon::prelude::*;
    batch.inputs.par_iter().map(|x| model.head(params, x)).collect()
}

/// Backtracking line search over `beta^j * direction`. On rejection the
/// parameters are left untouched.
pub fn line_search<M: GaussianPolicyModel>(
    model: &M,
    params: &mut Vec<f64>,
    direction: &[f64],
    step_type: StepType,
    batch: &Batch<'_, M::Input>,
    cfg: &CpoConfig,
) -> UpdateReport {
    let c = batch.j_c - cfg.cost_limit;
    let heads = old_heads(model, params, batch);
    let reward = Surrogate { model, batch, weights: &batch.advantages };
    let cost = Surrogate { model, batch, weights: &batch.cost_advantages };
    let surr0 = reward.value(params);
    let cost0 = cost.value(params);
    let rejected = UpdateReport {
        surrogate_improvement: 0.0,
        kl_after: 0.0,
        cost_estimate_after: batch.j_c,
        step_type: StepType::Rejected,
        backtracks_used: cfg.max_backtracks,
    };
    if direction.iter().any(|x| !x.is_finite()) {
        return rejected;
    }
    let mut scale = 1.0;
    for j in 0..=cfg.max_backtracks {
        let mut trial = params.clone();
        axpy(scale, direction, &mut trial);
        scale *= cfg.backtrack_ratio;
        let kl = mean_kl(model, &trial, &batch.inputs, &heads);
        let improvement = reward.value(&trial) - surr0;
        let cost_change = batch.horizon_scale * (cost.value(&trial) - cost0);
        if !(kl.is_finite() && improvement.is_finite() && cost_change.is_finite()) {
            continue;
        }
        let kl_ok = kl <= cfg.delta;
        let (improve_ok, cost_ok) = if c > 0.0 {
            (true, cost_change < 0.0)
        } else {
            (improvement > 0.0, c + cost_change <= 0.0)
        };
        log::trace!("backtrack {j}: kl {kl:.3e} improvement {improvement:.3e} cost change {cost_change:.3e}");
        if kl_ok && improve_ok && cost_ok {
            *params = trial;
            return UpdateReport {
                surrogate_improvement: improvement,
                kl_after: kl,
                cost_estimate_after: batch.j_c + cost_change,
                step_type,
                backtracks_used: j,
            };
        }
    }
    rejected
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationReport {
    pub update: UpdateReport,
    pub j_c: f64,
    pub case: DualCase,
    pub value_fit: FitReport,
    pub cost_fit: FitReport,
}

/// Advantages, gradients, trust-region step, line search, then critic fits
/// on targets frozen before the update.
pub fn cpo_iteration<M: GaussianPolicyModel>(
    rollouts: &[Rollout<M::Input>],
    model: &M,
    params: &mut Vec<f64>,
    value_critic: &mut CriticNet,
    cost_critic: &mut CriticNet,
    cfg: &CpoConfig,
) -> Result<IterationReport> {
    cfg.validate()?;
    let adv = compute_advantages(rollouts, value_critic, cost_critic, cfg)?;
    let batch = Batch::new(rollouts, &adv);
    let grads = surrogate_gradients(model, params, &batch, cfg.cost_limit);
    let snapshot = params.clone();
    let fvp = |v: &[f64]| fisher_vector_product(model, &snapshot, &batch.inputs, v, cfg.damping);
    let solution = solve_step(&grads.g, &grads.b, grads.c, fvp, cfg)?;
    let update = line_search(model, params, &solution.direction, solution.step_type, &batch, cfg);
    if update.step_type != StepType::Rejected {
        assert!(update.kl_after <= cfg.delta, "accepted step violates the trust region");
    }
    let features: Vec<Vec<f64>> = rollouts.iter().flat_map(|r| r.steps.iter().map(|s| s.features.clone())).collect();
    let value_fit = value_critic.fit(&features, &adv.value_targets, cfg.critic_iters)?;
    let cost_fit = cost_critic.fit(&features, &adv.cost_targets, cfg.critic_iters)?;
    Ok(IterationReport { update, j_c: adv.j_c, case: solution.case, value_fit, cost_fit })
}

pub const TRAINING_LOG_HEADER: &str = "iter,surrogate_improvement,kl_after,cost_estimate,d,step_type,backtracks";

pub fn write_log_row(w: &mut impl Write, iter: usize, report: &UpdateReport, d: f64) -> std::io::Result<()> {
    writeln!(
        w,
        "{iter},{:.9},{:.9},{:.9},{d:.9},{},{}",
        report.surrogate_improvement, report.kl_after, report.cost_estimate_after, report.step_type, report.backtracks_used
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::fisher::tests::TinyPolicy;
    use crate::nn::testutil::central_difference;
    use crate::rng;
    use rand::Rng;

    fn step(features: Vec<f64>, reward: f64, cost: f64) -> RolloutStep<Vec<f64>> {
        RolloutStep { input: features.clone(), features, action: vec![], log_density: 0.0, reward, cost }
    }

    fn linear_critic(w: &[f64]) -> CriticNet {
        let mut c = CriticNet::zeros(w.len(), &[]);
        c.params[..w.len()].copy_from_slice(w);
        c
    }

    fn cfg(gamma: f64, lambda: f64) -> CpoConfig {
        CpoConfig { gamma_r: gamma, gamma_c: gamma, gae_lambda: lambda, ..CpoConfig::default() }
    }

    #[test]
    fn td_advantage_at_lambda_zero() {
        let v = linear_critic(&[0.5, -1.0, 2.0]);
        let zero = CriticNet::zeros(3, &[]);
        let r = Rollout {
            steps: vec![step(vec![1.0, 0.0, 0.0], 1.0, 0.0), step(vec![0.0, 1.0, 0.0], 0.0, 1.0)],
            bootstrap: Some(vec![0.0, 0.0, 1.0]),
        };
        let a = compute_advantages(&[r], &v, &zero, &cfg(0.9, 0.0)).unwrap();
        assert!((a.raw_advantages[0] - (1.0 - 0.9 - 0.5)).abs() < 1e-12);
        assert!((a.raw_advantages[1] - (0.0 + 0.9 * 2.0 + 1.0)).abs() < 1e-12);
        assert_eq!(a.value_targets, vec![1.0 - 0.9, 0.9 * 2.0]);
    }

    #[test]
    fn perfect_critic_gives_zero_advantage() {
        let gamma = 0.9;
        let v = linear_critic(&[1.0 + gamma * 2.0, 2.0]);
        let vc = linear_critic(&[gamma * 1.0, 1.0]);
        let r = Rollout {
            steps: vec![step(vec![1.0, 0.0], 1.0, 0.0), step(vec![0.0, 1.0], 2.0, 1.0)],
            bootstrap: None,
        };
        for lambda in [0.0, 0.5, 1.0] {
            let a = compute_advantages(std::slice::from_ref(&r), &v, &vc, &cfg(gamma, lambda)).unwrap();
            assert!(a.raw_advantages.iter().all(|x| x.abs() < 1e-12));
            assert!(a.cost_advantages.iter().all(|x| x.abs() < 1e-12));
        }
    }

    #[test]
    fn monte_carlo_at_lambda_one() {
        let zero = CriticNet::zeros(1, &[]);
        let rewards = [1.0, 0.0, 2.0, 3.0];
        let r = Rollout { steps: rewards.iter().map(|&x| step(vec![0.0], x, x)).collect(), bootstrap: None };
        let a = compute_advantages(&[r], &zero, &zero, &cfg(0.5, 1.0)).unwrap();
        for t in 0..4 {
            let brute: f64 = (t..4).map(|k| 0.5f64.powi((k - t) as i32) * rewards[k]).sum();
            assert!((a.raw_advantages[t] - brute).abs() < 1e-12);
            assert!((a.cost_advantages[t] - brute).abs() < 1e-12);
            assert!((a.returns[t] - brute).abs() < 1e-12);
        }
        assert!((a.j_c - a.cost_returns[0]).abs() < 1e-15);
        assert!((a.horizon_scale - (1.0 + 0.5 + 0.25 + 0.125)).abs() < 1e-15);
        let mean: f64 = a.advantages.iter().sum::<f64>() / 4.0;
        let var: f64 = a.advantages.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_rollouts_are_an_error() {
        let zero = CriticNet::zeros(1, &[]);
        let empty: Vec<Rollout<Vec<f64>>> = vec![];
        assert!(compute_advantages(&empty, &zero, &zero, &cfg(0.9, 0.9)).is_err());
        let model = TinyPolicy::new(2, 2, 2);
        let mut params = vec![0.0; model.n];
        let mut v = CriticNet::zeros(2, &[]);
        let mut c = CriticNet::zeros(2, &[]);
        assert!(cpo_iteration(&empty, &model, &mut params, &mut v, &mut c, &CpoConfig::default()).is_err());
    }

    struct Fixture {
        model: TinyPolicy,
        params: Vec<f64>,
        rollouts: Vec<Rollout<Vec<f64>>>,
    }

    fn fixture(seed: u64, n: usize) -> Fixture {
        let model = TinyPolicy::new(2, 2, 2);
        let mut r = rng::stream(seed, "fixture");
        let params: Vec<f64> = (0..model.n).map(|_| r.random_range(-0.5..0.5)).collect();
        let steps = (0..n)
            .map(|_| {
                let x = vec![r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)];
                let head = model.head(&params, &x);
                let action = head.sample(&mut r);
                RolloutStep {
                    log_density: log_density(&head, &action),
                    features: x.clone(),
                    input: x,
                    action,
                    reward: r.random_range(0.0..2.0),
                    cost: r.random_range(0.0..1.0),
                }
            })
            .collect();
        Fixture { model, params, rollouts: vec![Rollout { steps, bootstrap: None }] }
    }

    fn batch_with<'a>(f: &'a Fixture, adv: Vec<f64>, cadv: Vec<f64>, j_c: f64) -> Batch<'a, Vec<f64>> {
        let a = Advantages {
            advantages: adv.clone(),
            raw_advantages: adv,
            cost_advantages: cadv,
            returns: vec![],
            cost_returns: vec![],
            value_targets: vec![],
            cost_targets: vec![],
            j_c,
            horizon_scale: 1.0,
        };
        Batch::new(&f.rollouts, &a)
    }

    #[test]
    fn zero_advantages_give_zero_gradients() {
        let f = fixture(1, 4);
        let b = batch_with(&f, vec![0.0; 4], vec![0.0; 4], 0.7);
        let grads = surrogate_gradients(&f.model, &f.params, &b, 0.7);
        assert!(grads.g.iter().all(|&x| x == 0.0));
        assert!(grads.b.iter().all(|&x| x == 0.0));
        assert_eq!(grads.c, 0.0);
    }

    #[test]
    fn surrogate_gradient_matches_finite_differences() {
        for seed in 0..10 {
            let f = fixture(seed, 3);
            assert!(f.model.n <= 30);
            let adv = vec![1.0, -0.5, 0.25];
            let b = batch_with(&f, adv.clone(), adv.clone(), 0.0);
            let s = Surrogate { model: &f.model, batch: &b, weights: &adv };
            let g = surrogate_gradients(&f.model, &f.params, &b, 0.0).g;
            let fd = central_difference(&|p: &[f64]| s.value(p), &f.params, 1e-5);
            let err: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(err / scale < 1e-4, "seed {seed}: {}", err / scale);
            // Away from the behavior parameters the ratio is no longer 1.
            let shifted: Vec<f64> = f.params.iter().map(|p| p + 0.05).collect();
            let (_, g2) = s.value_and_gradient(&shifted);
            let fd2 = central_difference(&|p: &[f64]| s.value(p), &shifted, 1e-5);
            let err2: f64 = g2.iter().zip(&fd2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!(err2 / fd2.iter().map(|x| x * x).sum::<f64>().sqrt() < 1e-4);
        }
    }

    fn identity_cfg(delta: f64) -> CpoConfig {
        CpoConfig { delta, damping: 0.0, cg_iters: 20, ..CpoConfig::default() }
    }

    #[test]
    fn slack_constraint_is_plain_trust_region() {
        let g = [3.0, -1.0, 0.5];
        let h = [2.0, 1.0, 4.0];
        let fvp = |v: &[f64]| v.iter().zip(&h).map(|(a, b)| a * b).collect::<Vec<_>>();
        let sol = solve_step(&g, &[0.0; 3], -1.0, fvp, &identity_cfg(0.05)).unwrap();
        let hg: Vec<f64> = g.iter().zip(&h).map(|(a, b)| a / b).collect();
        let q = dot(&g, &hg);
        for (x, y) in sol.direction.iter().zip(&hg) {
            assert!((x - (2.0 * 0.05 / q).sqrt() * y).abs() < 1e-9);
        }
        assert_eq!(sol.step_type, StepType::Feasible);
        assert_eq!(sol.case, DualCase::Slack);
    }

    #[test]
    fn zero_objective_with_violation_recovers() {
        let b = [0.0, 2.0];
        let sol = solve_step(&[0.0, 0.0], &b, 0.3, |v: &[f64]| v.to_vec(), &identity_cfg(0.5)).unwrap();
        assert_eq!(sol.step_type, StepType::InfeasibleRecovery);
        assert_eq!(sol.case, DualCase::Recovery);
        let s: f64 = 4.0;
        assert!((sol.direction[1] + (2.0 * 0.5 / s).sqrt() * 2.0).abs() < 1e-12);
        assert!(solve_step(&[0.0, 0.0], &[0.0, 0.0], 0.3, |v: &[f64]| v.to_vec(), &identity_cfg(0.5)).is_err());
    }

    #[test]
    fn two_dimensional_case_matches_grid() {
        let (g, b, c, delta) = ([1.0, 0.0], [0.0, 1.0], 0.05, 0.5);
        let sol = solve_step(&g, &b, c, |v: &[f64]| v.to_vec(), &identity_cfg(delta)).unwrap();
        // Brute force over a fine grid of the disk of radius 1.
        let mut best = (f64::NEG_INFINITY, [0.0, 0.0]);
        let n = 2000;
        for i in 0..=n {
            for j in 0..=n {
                let x = -1.0 + 2.0 * i as f64 / n as f64;
                let y = -1.0 + 2.0 * j as f64 / n as f64;
                // Among equal objectives keep the point nearest the constraint line.
                let better = x > best.0 || (x == best.0 && y > best.1[1]);
                if 0.5 * (x * x + y * y) <= delta && c + y <= 0.0 && better {
                    best = (x, [x, y]);
                }
            }
        }
        assert!((sol.direction[0] - best.1[0]).abs() < 1e-3, "{:?} vs {:?}", sol.direction, best.1);
        assert!((sol.direction[1] - best.1[1]).abs() < 1e-3);
        assert!((sol.direction[0] - (1.0f64 - 0.0025).sqrt()).abs() < 1e-7 && (sol.direction[1] + 0.05).abs() < 1e-7);
    }

    #[test]
    fn zero_direction_is_rejected_and_params_untouched() {
        let f = fixture(3, 6);
        let b = batch_with(&f, vec![1.0, -1.0, 0.5, 0.2, -0.3, 0.1], vec![0.0; 6], 0.0);
        let mut params = f.params.clone();
        let rep = line_search(&f.model, &mut params, &vec![0.0; f.model.n], StepType::Feasible, &b, &CpoConfig::default());
        assert_eq!(rep.step_type, StepType::Rejected);
        assert!(params.iter().zip(&f.params).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn good_direction_accepted_without_backtracking() {
        let f = fixture(4, 8);
        let adv: Vec<f64> = (0..8).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
        let b = batch_with(&f, adv, vec![0.0; 8], 0.0);
        let cfg = CpoConfig { cost_limit: 1.0, ..CpoConfig::default() };
        let grads = surrogate_gradients(&f.model, &f.params, &b, cfg.cost_limit);
        let dir: Vec<f64> = grads.g.iter().map(|x| 1e-3 * x).collect();
        let mut params = f.params.clone();
        let rep = line_search(&f.model, &mut params, &dir, StepType::Feasible, &b, &cfg);
        assert_eq!(rep.step_type, StepType::Feasible);
        assert_eq!(rep.backtracks_used, 0);
        assert!(rep.surrogate_improvement > 0.0 && rep.kl_after <= cfg.delta);
    }

    #[test]
    fn tiny_trust_region_rejects() {
        let f = fixture(5, 8);
        let adv: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        let b = batch_with(&f, adv, vec![0.0; 8], 0.0);
        let cfg = CpoConfig { delta: 1e-300, ..CpoConfig::default() };
        let grads = surrogate_gradients(&f.model, &f.params, &b, 0.0);
        let mut params = f.params.clone();
        let rep = line_search(&f.model, &mut params, &grads.g, StepType::Feasible, &b, &cfg);
        assert_eq!(rep.step_type, StepType::Rejected);
        assert_eq!(params, f.params);
    }

    #[test]
    fn full_iteration_respects_trust_region() {
        let f = fixture(6, 16);
        let mut params = f.params.clone();
        let mut v = CriticNet::new(2, &[4], 1, "v");
        let mut c = CriticNet::new(2, &[4], 1, "c");
        let cfg = CpoConfig { cost_limit: f64::INFINITY, ..CpoConfig::default() };
        let rep = cpo_iteration(&f.rollouts, &f.model, &mut params, &mut v, &mut c, &cfg).unwrap();
        assert_ne!(rep.update.step_type, StepType::InfeasibleRecovery);
        if rep.update.step_type != StepType::Rejected {
            assert!(rep.update.kl_after <= cfg.delta);
            assert!(rep.update.surrogate_improvement > 0.0);
        }
        assert!(rep.value_fit.final_loss <= rep.value_fit.initial_loss);
        assert!(rep.cost_fit.final_loss <= rep.cost_fit.initial_loss);
    }

    #[test]
    fn log_row_format() {
        let rep = UpdateReport {
            surrogate_improvement: 0.5,
            kl_after: 0.001,
            cost_estimate_after: 2.0,
            step_type: StepType::InfeasibleRecovery,
            backtracks_used: 3,
        };
        let mut out = Vec::new();
        write_log_row(&mut out, 7, &rep, 1.5).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "7,0.500000000,0.001000000,2.000000000,1.500000000,infeasible-recovery,3\n"
        );
    }
}
