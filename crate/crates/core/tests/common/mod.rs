//! Brute-force oracles shared by integration tests.

#![allow(dead_code)]

use faer::linalg::solvers::Solve;
use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stackelberg_peg::mpcc::{HorizonProblem, Layout};
use stackelberg_peg::nlp::{NlpProblem, Triplet};
use stackelberg_peg::objectives::ForecastBundle;
use stackelberg_peg::state::{ProtocolParams, SpeculatorParams, SystemState};

/// Grid-search Stackelberg solution of a one-stage problem.
#[derive(Debug, Clone, Copy)]
pub struct GridOptimum {
    pub delta_alpha: f64,
    pub delta: f64,
    pub leader: f64,
}

fn smoothing_weight(e: f64) -> f64 {
    if e.abs() > 0.01 {
        1.0
    } else {
        (1.0 / e.abs()).min(1000.0)
    }
}

/// Leader cost of a one-stage plan, written out from scratch.
pub fn one_stage_leader(p: &HorizonProblem, delta_alpha: f64, delta: f64) -> f64 {
    let f = &p.forecasts;
    let s0 = p.state.supply;
    let peg = p.protocol.peg;
    let e0 = f.demand[0] / s0 - peg;
    let e1 = f.demand[1] / (s0 + delta) - peg;
    let w = smoothing_weight(e0);
    e0 * e0 + e1 * e1 + w * delta_alpha * delta_alpha + delta_alpha * e0
}

/// Follower cost `−gain·Δ + σ·w_S·(α₀ − D₀/(S₀+Δ))²`.
pub fn one_stage_follower(p: &HorizonProblem, delta: f64) -> f64 {
    let f = &p.forecasts;
    let s0 = p.state.supply;
    let a0 = p.state.redemption_price;
    let r = f.collateral_price[1] / f.collateral_price[0];
    let gain = r * f.stablecoin_price[0] - a0;
    let gap = a0 - f.demand[0] / (s0 + delta);
    -gain * delta + s0 * p.speculator.arb_weight * gap * gap
}

fn vault_ok(p: &HorizonProblem, delta_alpha: f64, delta: f64) -> bool {
    let f = &p.forecasts;
    let s1 = p.state.supply + delta;
    let c1 = p.state.collateral + f.stablecoin_price[0] / f.collateral_price[0] * delta;
    let a1 = p.state.redemption_price + delta_alpha;
    s1 > 0.0 && f.collateral_price[1] * c1 >= p.speculator.min_collateral_ratio * a1 * s1
}

/// δα on a grid of `da_step` over `[−0.1, 0.1]`; for each, the follower's best
/// response on a grid of `d_step` over the box `|Δ| ≤ box_fraction·S₀`.
pub fn one_stage_grid(p: &HorizonProblem, da_step: f64, d_step: f64, box_fraction: f64) -> GridOptimum {
    let half = box_fraction * p.state.supply;
    let n_d = (2.0 * half / d_step).round() as i64;
    let n_a = (0.2 / da_step).round() as i64;
    // The follower's cost does not depend on δα; only feasibility does.
    let mut order: Vec<(f64, f64)> = (0..=n_d)
        .map(|k| {
            let d = -half + k as f64 * d_step;
            (one_stage_follower(p, d), d)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut best = GridOptimum {
        delta_alpha: f64::NAN,
        delta: f64::NAN,
        leader: f64::INFINITY,
    };
    for i in 0..=n_a {
        let da = -0.1 + i as f64 * da_step;
        let Some(&(_, d)) = order.iter().find(|(_, d)| vault_ok(p, da, *d)) else {
            continue;
        };
        let leader = one_stage_leader(p, da, d);
        if leader < best.leader {
            best = GridOptimum {
                delta_alpha: da,
                delta: d,
                leader,
            };
        }
    }
    best
}

/// One-stage instance drawn near the default initial conditions.
pub fn random_one_stage(rng: &mut ChaCha8Rng) -> HorizonProblem {
    let supply = rng.random_range(95.0..105.0);
    let alpha = rng.random_range(0.98..1.02);
    let pc = [rng.random_range(9.0..11.0), rng.random_range(9.0..11.0)];
    let gamma0 = rng.random_range(1.8..3.0);
    let collateral = gamma0 * alpha * supply / pc[0];
    let demand = [rng.random_range(95.0..105.0), rng.random_range(95.0..105.0)];
    let p_stb = demand[0] / supply;
    HorizonProblem {
        state: SystemState::new(supply, collateral, alpha).unwrap(),
        forecasts: ForecastBundle::new(demand.to_vec(), pc.to_vec(), vec![p_stb; 2]).unwrap(),
        protocol: ProtocolParams::default(),
        speculator: SpeculatorParams::default(),
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---- two-stage oracle ------------------------------------------------------

/// Follower cost of a two-stage plan at redemption prices `(α₀, α₁)`.
fn two_stage_follower(p: &HorizonProblem, alpha1: f64, d0: f64, d1: f64) -> f64 {
    let f = &p.forecasts;
    let sigma = p.state.supply;
    let w = p.speculator.arb_weight;
    let alphas = [p.state.redemption_price, alpha1];
    let supplies = [p.state.supply, p.state.supply + d0];
    let mut cost = 0.0;
    for (t, d) in [d0, d1].into_iter().enumerate() {
        let r = f.collateral_price[t + 1] / f.collateral_price[t];
        let gain = p.speculator.discount.powi(t as i32) * (r * f.stablecoin_price[t] - alphas[t]);
        let gap = alphas[t] - f.demand[t] / (supplies[t] + d);
        cost += -gain * d + sigma * w * gap * gap;
    }
    cost
}

fn argmin_convex(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    let golden = 0.5 * (5f64.sqrt() - 1.0);
    for _ in 0..120 {
        let a = hi - golden * (hi - lo);
        let b = lo + golden * (hi - lo);
        if f(a) <= f(b) {
            hi = b;
        } else {
            lo = a;
        }
    }
    0.5 * (lo + hi)
}

/// Follower best response `(Δ₀, Δ₁)` to `α₁`: a grid over `Δ₀` with an exact
/// line minimization over `Δ₁`, then a golden refinement of `Δ₀`.
fn two_stage_response(p: &HorizonProblem, alpha1: f64, bracket: f64) -> (f64, f64) {
    let inner = |d0: f64| {
        let d1 = argmin_convex(|d1| two_stage_follower(p, alpha1, d0, d1), -bracket, bracket);
        (two_stage_follower(p, alpha1, d0, d1), d1)
    };
    let step = 0.05;
    let n = (2.0 * bracket / step) as i64;
    let best = (0..=n)
        .map(|k| -bracket + k as f64 * step)
        .min_by(|a, b| inner(*a).0.total_cmp(&inner(*b).0))
        .unwrap();
    let d0 = argmin_convex(|d0| inner(d0).0, best - step, best + step);
    (d0, inner(d0).1)
}

/// Leader cost of a two-stage plan, written out from scratch.
pub fn two_stage_leader(p: &HorizonProblem, rates: [f64; 2], deltas: [f64; 2]) -> f64 {
    let f = &p.forecasts;
    let peg = p.protocol.peg;
    let s0 = p.state.supply;
    let supplies = [s0, s0 + deltas[0], s0 + deltas[0] + deltas[1]];
    let e: Vec<f64> = (0..3).map(|t| f.demand[t] / supplies[t] - peg).collect();
    let mut cost: f64 = e.iter().map(|v| v * v).sum();
    for t in 0..2 {
        let w = smoothing_weight(f.demand[t] / s0 - peg);
        cost += w * rates[t] * rates[t] + rates[t] * e[t];
    }
    cost
}

/// Brute-force Stackelberg solution of a two-stage problem whose vaults stay
/// slack: δα₀ on a grid of `da_step`, the follower's response by direct
/// minimization, and δα₁ in closed form (it only enters the leader's cost).
pub fn two_stage_oracle(p: &HorizonProblem, da_step: f64, bracket: f64) -> ([f64; 2], [f64; 2], f64) {
    let n = (0.2 / da_step).round() as i64;
    let mut best = ([f64::NAN; 2], [f64::NAN; 2], f64::INFINITY);
    for i in 0..=n {
        let da0 = -0.1 + i as f64 * da_step;
        let (d0, d1) = two_stage_response(p, p.state.redemption_price + da0, bracket);
        let e1 = p.forecasts.demand[1] / (p.state.supply + d0) - p.protocol.peg;
        let w1 = smoothing_weight(p.forecasts.demand[1] / p.state.supply - p.protocol.peg);
        let da1 = (-e1 / (2.0 * w1)).clamp(-0.1, 0.1);
        let cost = two_stage_leader(p, [da0, da1], [d0, d1]);
        if cost < best.2 {
            best = ([da0, da1], [d0, d1], cost);
        }
    }
    best
}

// ---- random horizon problems -----------------------------------------------

pub fn random_problem(rng: &mut ChaCha8Rng, horizon: usize) -> HorizonProblem {
    let demand: Vec<f64> = (0..=horizon).map(|_| rng.random_range(80.0..120.0)).collect();
    let pc: Vec<f64> = (0..=horizon).map(|_| rng.random_range(8.0..12.0)).collect();
    let p0 = rng.random_range(0.9..1.1);
    HorizonProblem {
        state: SystemState::new(rng.random_range(80.0..120.0), rng.random_range(15.0..30.0), rng.random_range(0.9..1.1))
            .unwrap(),
        forecasts: ForecastBundle::new(demand, pc, vec![p0; horizon + 1]).unwrap(),
        protocol: ProtocolParams::default(),
        speculator: SpeculatorParams::default(),
    }
}

/// A point of the MPCC variable space away from every singularity.
pub fn random_point(rng: &mut ChaCha8Rng, l: &Layout) -> Vec<f64> {
    let mut z = vec![0.0; l.num_vars()];
    for t in 0..=l.horizon {
        z[l.alpha(t)] = rng.random_range(0.8..1.2);
        z[l.supply(t)] = rng.random_range(0.6..1.4);
        z[l.collateral(t)] = rng.random_range(0.1..0.4);
    }
    for t in 0..l.horizon {
        z[l.rate(t)] = rng.random_range(-0.1..0.1);
        z[l.delta(t)] = rng.random_range(-0.3..0.3);
    }
    for j in 0..l.num_g() {
        z[l.lambda(j)] = rng.random_range(-1.0..1.0);
    }
    for i in 0..l.num_h() {
        z[l.mu(i)] = rng.random_range(0.0..1.0);
    }
    z
}

// ---- convex QPs ------------------------------------------------------------

/// `min ½xᵀQx + cᵀx  s.t.  A_E x = b_E,  A_I x ≥ b_I`.
#[derive(Debug, Clone)]
pub struct Qp {
    pub q: Vec<Vec<f64>>,
    pub c: Vec<f64>,
    pub a_eq: Vec<Vec<f64>>,
    pub b_eq: Vec<f64>,
    pub a_in: Vec<Vec<f64>>,
    pub b_in: Vec<f64>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Qp {
    pub fn value(&self, x: &[f64]) -> f64 {
        let qx: Vec<f64> = self.q.iter().map(|row| dot(row, x)).collect();
        0.5 * dot(x, &qx) + dot(&self.c, x)
    }
}

impl NlpProblem for Qp {
    fn num_vars(&self) -> usize {
        self.c.len()
    }
    fn num_eq(&self) -> usize {
        self.b_eq.len()
    }
    fn num_ineq(&self) -> usize {
        self.b_in.len()
    }
    fn objective(&self, x: &[f64]) -> f64 {
        self.value(x)
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        for (i, g) in grad.iter_mut().enumerate() {
            *g = dot(&self.q[i], x) + self.c[i];
        }
    }
    fn eq_constraints(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&self.a_eq[i], x) - self.b_eq[i];
        }
    }
    fn ineq_constraints(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(&self.a_in[i], x) - self.b_in[i];
        }
    }
    fn eq_jacobian(&self, _x: &[f64], jac: &mut Vec<Triplet>) {
        for (i, row) in self.a_eq.iter().enumerate() {
            jac.extend(row.iter().enumerate().map(|(j, &v)| (i, j, v)));
        }
    }
    fn ineq_jacobian(&self, _x: &[f64], jac: &mut Vec<Triplet>) {
        for (i, row) in self.a_in.iter().enumerate() {
            jac.extend(row.iter().enumerate().map(|(j, &v)| (i, j, v)));
        }
    }
    fn hessian(&self, _x: &[f64], obj_factor: f64, _y_eq: &[f64], _y_ineq: &[f64], hess: &mut Vec<Triplet>) {
        for i in 0..self.c.len() {
            for j in 0..=i {
                hess.push((i, j, obj_factor * self.q[i][j]));
            }
        }
    }
}

/// Strictly convex QP with a known strictly feasible point; the linear term
/// pulls the unconstrained minimizer outside so some constraints bind.
pub fn random_convex_qp(rng: &mut ChaCha8Rng) -> (Qp, Vec<f64>) {
    let n = rng.random_range(2..=10);
    let m = rng.random_range(1..=5);
    let n_eq = rng.random_range(0..=m.min(n - 1).min(2));
    let n_in = m - n_eq;
    let factor: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let q: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| factor[k][i] * factor[k][j]).sum::<f64>() + if i == j { 0.1 } else { 0.0 }).collect())
        .collect();
    let c: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
    let x0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut row = || (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let a_eq: Vec<Vec<f64>> = (0..n_eq).map(|_| row()).collect();
    let a_in: Vec<Vec<f64>> = (0..n_in).map(|_| row()).collect();
    let b_eq = a_eq.iter().map(|a| dot(a, &x0)).collect();
    let b_in = a_in.iter().map(|a| dot(a, &x0) - rng.random_range(0.05..1.0)).collect();
    (Qp { q, c, a_eq, b_eq, a_in, b_in }, x0)
}

/// Exact solution by enumerating active sets: solve the equality-constrained
/// KKT system for each subset and keep the best point that is primal feasible
/// with non-negative inequality multipliers.
pub fn active_set_oracle(qp: &Qp) -> Option<(Vec<f64>, f64)> {
    let n = qp.c.len();
    let m_in = qp.b_in.len();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for mask in 0u32..(1 << m_in) {
        let active: Vec<usize> = (0..m_in).filter(|i| mask & (1 << i) != 0).collect();
        let rows: Vec<(&Vec<f64>, f64)> = qp
            .a_eq
            .iter()
            .zip(&qp.b_eq)
            .chain(active.iter().map(|&i| (&qp.a_in[i], &qp.b_in[i])))
            .map(|(a, &b)| (a, b))
            .collect();
        let k = rows.len();
        let size = n + k;
        // [Q  −Aᵀ; A  0] [x; λ] = [−c; b]
        let kkt = Mat::<f64>::from_fn(size, size, |i, j| match (i < n, j < n) {
            (true, true) => qp.q[i][j],
            (true, false) => -rows[j - n].0[i],
            (false, true) => rows[i - n].0[j],
            (false, false) => 0.0,
        });
        let rhs = Mat::<f64>::from_fn(size, 1, |i, _| if i < n { -qp.c[i] } else { rows[i - n].1 });
        let sol = kkt.partial_piv_lu().solve(&rhs);
        let x: Vec<f64> = (0..n).map(|i| sol[(i, 0)]).collect();
        if x.iter().any(|v| !v.is_finite()) {
            continue;
        }
        // A singular subset can still produce finite garbage; check the residual.
        let residual = (0..size)
            .map(|i| {
                let lhs: f64 = (0..size).map(|j| kkt[(i, j)] * sol[(j, 0)]).sum();
                (lhs - rhs[(i, 0)]).abs()
            })
            .fold(0.0, f64::max);
        if residual > 1e-8 {
            continue;
        }
        let multipliers_ok = (0..active.len()).all(|a| sol[(n + qp.a_eq.len() + a, 0)] >= -1e-10);
        let feasible = qp.a_in.iter().zip(&qp.b_in).all(|(a, b)| dot(a, &x) >= b - 1e-10);
        if multipliers_ok && feasible {
            let value = qp.value(&x);
            if best.as_ref().is_none_or(|(_, v)| value < *v) {
                best = Some((x, value));
            }
        }
    }
    best
}
