#![allow(dead_code)]

use fcpo::cpo::{solve_step, CpoConfig, DualCase, StepType};
use fcpo::rng;
use rand::Rng;

/// Central finite-difference gradient.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + eps;
            let hi = f(&p);
            p[i] = orig - eps;
            let lo = f(&p);
            p[i] = orig;
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-10);
    num / den
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense row-major square matrix helpers for the QP oracle.
pub struct Dense {
    pub n: usize,
    pub a: Vec<f64>,
}

impl Dense {
    pub fn random_spd(n: usize, seed: u64) -> Self {
        let mut r = rng::stream(seed, "spd");
        let m: Vec<f64> = (0..n * n).map(|_| r.random_range(-1.0..1.0)).collect();
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                a[i * n + j] = (0..n).map(|k| m[i * n + k] * m[j * n + k]).sum::<f64>();
            }
            a[i * n + i] += 0.2;
        }
        Dense { n, a }
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| dot(&self.a[i * self.n..(i + 1) * self.n], v)).collect()
    }

    /// Lower Cholesky factor.
    pub fn cholesky(&self) -> Vec<f64> {
        let n = self.n;
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
                if i == j {
                    l[i * n + i] = (self.a[i * n + i] - s).sqrt();
                } else {
                    l[i * n + j] = (self.a[i * n + j] - s) / l[j * n + j];
                }
            }
        }
        l
    }
}

fn forward_sub(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in 0..n {
        let s: f64 = (0..i).map(|k| l[i * n + k] * x[k]).sum();
        x[i] = (b[i] - s) / l[i * n + i];
    }
    x
}

fn back_sub_transposed(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|k| l[k * n + i] * x[k]).sum();
        x[i] = (b[i] - s) / l[i * n + i];
    }
    x
}

pub struct QpOracle {
    pub direction: Vec<f64>,
    pub objective: f64,
    /// True when no point of the trust region satisfies the constraint.
    pub infeasible: bool,
}

/// Brute-force solution of `max g'x s.t. c + b'x <= 0, x'Hx/2 <= delta`.
///
/// In whitened coordinates `y = L'x` the region is a ball and the optimum of
/// a linear objective lies on the boundary circle of the plane spanned by
/// the whitened `g` and `b`; that circle is scanned on a dense angle grid.
/// Infeasible instances return the point minimizing `b'x` instead.
pub fn qp_oracle(h: &Dense, g: &[f64], b: &[f64], c: f64, delta: f64) -> QpOracle {
    let n = h.n;
    let l = h.cholesky();
    let gt = forward_sub(&l, n, g);
    let bt = forward_sub(&l, n, b);
    let radius = (2.0 * delta).sqrt();
    let bn = dot(&bt, &bt).sqrt();
    let to_x = |y: &[f64]| back_sub_transposed(&l, n, y);
    if c - radius * bn > 0.0 {
        let y: Vec<f64> = bt.iter().map(|v| -radius * v / bn).collect();
        let x = to_x(&y);
        return QpOracle { objective: dot(g, &x), direction: x, infeasible: true };
    }
    let gn = dot(&gt, &gt).sqrt();
    let e1: Vec<f64> = gt.iter().map(|v| v / gn).collect();
    let proj = dot(&bt, &e1);
    let mut e2: Vec<f64> = bt.iter().zip(&e1).map(|(v, e)| v - proj * e).collect();
    let e2n = dot(&e2, &e2).sqrt();
    if e2n > 1e-12 {
        e2.iter_mut().for_each(|v| *v /= e2n);
    } else {
        e2 = vec![0.0; n];
    }
    let (b1, b2) = (proj, dot(&bt, &e2));
    let steps = 400_000;
    let mut best: Option<(f64, f64)> = None;
    for k in 0..steps {
        let t = 2.0 * std::f64::consts::PI * k as f64 / steps as f64;
        let (u, v) = (radius * t.cos(), radius * t.sin());
        if c + b1 * u + b2 * v <= 0.0 {
            let obj = gn * u;
            if best.is_none_or(|(o, _)| obj > o) {
                best = Some((obj, t));
            }
        }
    }
    let (objective, t) = best.expect("feasible region is nonempty");
    let y: Vec<f64> = e1.iter().zip(&e2).map(|(a, b)| radius * (t.cos() * a + t.sin() * b)).collect();
    QpOracle { direction: to_x(&y), objective, infeasible: false }
}

/// Draws an instance whose constraint offset lands in the requested regime.
pub fn qp_instance(seed: u64, regime: usize) -> (Dense, Vec<f64>, Vec<f64>, f64, f64) {
    let mut r = rng::stream(seed, "qp");
    let n = r.random_range(2..=10);
    let h = Dense::random_spd(n, seed);
    let g: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
    let delta = r.random_range(0.005..0.5);
    // Reach of the trust region along b: sqrt(2 delta b'H^-1 b).
    let hb = fcpo::nn::conjugate_gradient(|v| h.matvec(v), &b, 200, 1e-14).unwrap();
    let reach = (2.0 * delta * dot(&b, &hb)).sqrt();
    let c = match regime {
        0 => -reach * r.random_range(1.5..4.0),
        1 => reach * r.random_range(-0.9..0.9),
        _ => reach * r.random_range(1.2..3.0),
    };
    (h, g, b, c, delta)
}

/// Small-network experiment settings for the planted-preference logs.
pub fn synth_experiment(alpha_prime: f64, seed: u64) -> fcpo::runner::ExperimentConfig {
    let mut cfg = fcpo::runner::ExperimentConfig {
        emb_dim: 8,
        gru_hidden: 8,
        gru_layers: 1,
        actor_hidden: vec![32, 32],
        critic_hidden: vec![32, 32],
        k: 2,
        t: 3,
        eval_k: vec![2],
        min_interactions: 5,
        seed,
        ..Default::default()
    };
    cfg.alpha_prime = Some(alpha_prime);
    cfg
}

/// Solves one drawn instance with `solve_step` and checks it against
/// [`qp_oracle`]; returns the dual case that produced the step.
pub fn check_solve_step(seed: u64, regime: usize) -> DualCase {
    let (h, g, b, c, delta) = qp_instance(seed, regime);
    let cfg = CpoConfig { delta, damping: 0.0, cg_iters: 200, ..CpoConfig::default() };
    let sol = solve_step(&g, &b, c, |v: &[f64]| h.matvec(v), &cfg).unwrap();
    let oracle = qp_oracle(&h, &g, &b, c, delta);
    let x = &sol.direction;
    let kl = 0.5 * dot(x, &h.matvec(x));
    assert!(kl <= delta * (1.0 + 1e-6), "seed {seed}: kl {kl} > {delta}");
    if oracle.infeasible {
        assert_eq!(sol.case, DualCase::Recovery, "seed {seed}");
        assert_eq!(sol.step_type, StepType::InfeasibleRecovery);
        let got = dot(&b, x);
        let want = dot(&b, &oracle.direction);
        assert!((got - want).abs() <= 1e-3 * want.abs(), "seed {seed}: {got} vs {want}");
    } else {
        let obj = dot(&g, x);
        assert!(c + dot(&b, x) <= 1e-6, "seed {seed}: constraint violated");
        assert!(
            (obj - oracle.objective).abs() <= 1e-3 * oracle.objective.abs(),
            "seed {seed} ({:?}): {obj} vs {}",
            sol.case,
            oracle.objective
        );
        assert!(matches!(sol.case, DualCase::Slack | DualCase::Active), "seed {seed}: {:?}", sol.case);
    }
    sol.case
}
