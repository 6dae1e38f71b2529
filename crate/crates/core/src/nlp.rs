//! A primal-dual interior-point solver for smooth nonlinear programs
//!
//! ```text
//! min F(x)  s.t.  c_E(x) = 0,  c_I(x) ≥ 0,  l ≤ x ≤ u
//! ```
//!
//! General inequalities get slack variables; bounds are handled by log
//! barriers directly. Each iteration solves the reduced primal-dual system
//! with a dense LU, regularizing the Hessian block until the step has
//! positive curvature, and globalizes with an ℓ1 merit line search. The
//! barrier parameter decreases monotonically.
//!
//! Multipliers follow `L = F − y_Eᵀc_E − y_Iᵀc_I − z_Lᵀ(x − l) − z_Uᵀ(u − x)`,
//! so `y_I`, `z_L`, `z_U` are non-negative at a solution.

use faer::Mat;
use faer::linalg::solvers::Solve;

use crate::error::{Error, Result};

/// Sparse matrix entry `(row, col, value)`. Duplicates are summed.
pub type Triplet = (usize, usize, f64);

pub trait NlpProblem {
    fn num_vars(&self) -> usize;
    fn num_eq(&self) -> usize;
    fn num_ineq(&self) -> usize;

    /// Lower and upper variable bounds; use infinities for free components.
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.num_vars();
        (vec![f64::NEG_INFINITY; n], vec![f64::INFINITY; n])
    }

    fn objective(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64], grad: &mut [f64]);
    fn eq_constraints(&self, x: &[f64], out: &mut [f64]);
    fn ineq_constraints(&self, x: &[f64], out: &mut [f64]);
    fn eq_jacobian(&self, x: &[f64], jac: &mut Vec<Triplet>);
    fn ineq_jacobian(&self, x: &[f64], jac: &mut Vec<Triplet>);

    /// Lower triangle (`row ≥ col`) of `∇²(σ_f·F − y_Eᵀc_E − y_Iᵀc_I)`.
    fn hessian(&self, x: &[f64], obj_factor: f64, y_eq: &[f64], y_ineq: &[f64], hess: &mut Vec<Triplet>);

    /// Points outside the domain are rejected by the line search.
    fn in_domain(&self, _x: &[f64]) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IpmOptions {
    /// Scaled KKT tolerance for convergence.
    pub tol: f64,
    /// Absolute constraint-violation tolerance for convergence.
    pub constr_tol: f64,
    pub max_iter: usize,
    /// Initial barrier parameter.
    pub mu_init: f64,
    /// Relative push of the starting point into the bound interior.
    pub bound_push: f64,
}

impl Default for IpmOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            constr_tol: 1e-9,
            max_iter: 200,
            mu_init: 0.1,
            bound_push: 1e-2,
        }
    }
}

/// Starting point. Missing multipliers are initialized from the barrier.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IpmStart {
    pub x: Vec<f64>,
    pub y_eq: Option<Vec<f64>>,
    pub y_ineq: Option<Vec<f64>>,
    pub z_lower: Option<Vec<f64>>,
    pub z_upper: Option<Vec<f64>>,
}

impl IpmStart {
    pub fn primal(x: Vec<f64>) -> Self {
        Self {
            x,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IpmStatus {
    Converged,
    MaxIterations,
    /// The line search could not make progress.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpmSolution {
    pub x: Vec<f64>,
    pub y_eq: Vec<f64>,
    pub y_ineq: Vec<f64>,
    pub z_lower: Vec<f64>,
    pub z_upper: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub status: IpmStatus,
    /// Unscaled max-norm KKT error of the original problem.
    pub kkt_error: f64,
    pub constraint_violation: f64,
}

impl IpmSolution {
    pub fn converged(&self) -> bool {
        self.status == IpmStatus::Converged
    }
}

const KAPPA_EPS: f64 = 10.0;
const KAPPA_SIGMA: f64 = 1e10;
const S_MAX: f64 = 100.0;
const ARMIJO: f64 = 1e-4;
const MIN_STEP: f64 = 1e-12;
const MERIT_NOISE: f64 = 1e-12;
const SHORT_STEP: f64 = 1e-2;
const MAX_DAMPING: f64 = 1e2;
/// Smallest gap used by the multiplier safeguard; rounding can leave a
/// boundary step a few ulps outside.
const GAP_FLOOR: f64 = 1e-15;

struct Evaluation {
    f: f64,
    grad: Vec<f64>,
    c_eq: Vec<f64>,
    c_ineq: Vec<f64>,
    jac_eq: Vec<Triplet>,
    jac_ineq: Vec<Triplet>,
}

fn evaluate<P: NlpProblem + ?Sized>(p: &P, x: &[f64]) -> Result<Evaluation> {
    let n = p.num_vars();
    let mut grad = vec![0.0; n];
    let mut c_eq = vec![0.0; p.num_eq()];
    let mut c_ineq = vec![0.0; p.num_ineq()];
    let mut jac_eq = Vec::new();
    let mut jac_ineq = Vec::new();
    let f = p.objective(x);
    p.gradient(x, &mut grad);
    p.eq_constraints(x, &mut c_eq);
    p.ineq_constraints(x, &mut c_ineq);
    p.eq_jacobian(x, &mut jac_eq);
    p.ineq_jacobian(x, &mut jac_ineq);
    let finite = f.is_finite()
        && grad.iter().chain(&c_eq).chain(&c_ineq).all(|v| v.is_finite())
        && jac_eq.iter().chain(&jac_ineq).all(|t| t.2.is_finite());
    if !finite {
        return Err(Error::Numerical("non-finite function value in NLP evaluation".into()));
    }
    Ok(Evaluation {
        f,
        grad,
        c_eq,
        c_ineq,
        jac_eq,
        jac_ineq,
    })
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `out += Aᵀ·y` for a triplet matrix.
fn add_transpose_product(jac: &[Triplet], y: &[f64], out: &mut [f64]) {
    for &(i, j, v) in jac {
        out[j] += v * y[i];
    }
}

/// `out = A·d` for a triplet matrix with `rows` rows.
fn product(jac: &[Triplet], d: &[f64], rows: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows];
    for &(i, j, v) in jac {
        out[i] += v * d[j];
    }
    out
}

struct Iterate {
    x: Vec<f64>,
    s: Vec<f64>,
    y_eq: Vec<f64>,
    y_ineq: Vec<f64>,
    z_l: Vec<f64>,
    z_u: Vec<f64>,
    v: Vec<f64>,
}

struct Bounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
    has_l: Vec<bool>,
    has_u: Vec<bool>,
}

impl Bounds {
    fn gap_l(&self, x: &[f64], i: usize) -> f64 {
        x[i] - self.lower[i]
    }

    fn gap_u(&self, x: &[f64], i: usize) -> f64 {
        self.upper[i] - x[i]
    }

    fn barrier(&self, x: &[f64], s: &[f64]) -> f64 {
        let mut b = 0.0;
        for i in 0..x.len() {
            if self.has_l[i] {
                b -= self.gap_l(x, i).ln();
            }
            if self.has_u[i] {
                b -= self.gap_u(x, i).ln();
            }
        }
        b - s.iter().map(|v| v.ln()).sum::<f64>()
    }
}

/// Gradient of the Lagrangian with respect to `x`.
fn lagrangian_gradient(ev: &Evaluation, it: &Iterate, bounds: &Bounds) -> Vec<f64> {
    let mut g = ev.grad.clone();
    let neg_eq: Vec<f64> = it.y_eq.iter().map(|v| -v).collect();
    let neg_in: Vec<f64> = it.y_ineq.iter().map(|v| -v).collect();
    add_transpose_product(&ev.jac_eq, &neg_eq, &mut g);
    add_transpose_product(&ev.jac_ineq, &neg_in, &mut g);
    for i in 0..g.len() {
        if bounds.has_l[i] {
            g[i] -= it.z_l[i];
        }
        if bounds.has_u[i] {
            g[i] += it.z_u[i];
        }
    }
    g
}

struct ErrorParts {
    dual: f64,
    primal: f64,
    compl: f64,
    s_d: f64,
    s_c: f64,
}

impl ErrorParts {
    fn scaled(&self) -> f64 {
        (self.dual / self.s_d).max(self.primal).max(self.compl / self.s_c)
    }

    fn unscaled(&self) -> f64 {
        self.dual.max(self.primal).max(self.compl)
    }
}

fn optimality_error(ev: &Evaluation, it: &Iterate, bounds: &Bounds, mu: f64) -> ErrorParts {
    let grad_l = lagrangian_gradient(ev, it, bounds);
    let mut dual = inf_norm(&grad_l);
    for (yi, vi) in it.y_ineq.iter().zip(&it.v) {
        dual = dual.max((yi - vi).abs());
    }
    let mut primal = inf_norm(&ev.c_eq);
    for (c, s) in ev.c_ineq.iter().zip(&it.s) {
        primal = primal.max((c - s).abs());
    }
    let mut compl: f64 = 0.0;
    let mut z_sum = 0.0;
    let mut z_count = 0usize;
    for i in 0..it.x.len() {
        if bounds.has_l[i] {
            compl = compl.max((bounds.gap_l(&it.x, i) * it.z_l[i] - mu).abs());
            z_sum += it.z_l[i].abs();
            z_count += 1;
        }
        if bounds.has_u[i] {
            compl = compl.max((bounds.gap_u(&it.x, i) * it.z_u[i] - mu).abs());
            z_sum += it.z_u[i].abs();
            z_count += 1;
        }
    }
    for (s, v) in it.s.iter().zip(&it.v) {
        compl = compl.max((s * v - mu).abs());
        z_sum += v.abs();
        z_count += 1;
    }
    let y_sum: f64 = it.y_eq.iter().chain(&it.y_ineq).map(|v| v.abs()).sum();
    let m = it.y_eq.len() + it.y_ineq.len();
    let s_d = (S_MAX.max((y_sum + z_sum) / (m + z_count).max(1) as f64)) / S_MAX;
    let s_c = (S_MAX.max(z_sum / z_count.max(1) as f64)) / S_MAX;
    ErrorParts {
        dual,
        primal,
        compl,
        s_d,
        s_c,
    }
}

fn fraction_to_boundary(values: impl Iterator<Item = (f64, f64)>, tau: f64) -> f64 {
    let mut alpha: f64 = 1.0;
    for (v, d) in values {
        if d < 0.0 {
            alpha = alpha.min(-tau * v / d);
        }
    }
    alpha.max(0.0)
}

fn primal_fraction(bounds: &Bounds, it: &Iterate, step: &Step, tau: f64) -> f64 {
    let n = it.x.len();
    fraction_to_boundary(
        (0..n)
            .filter(|&i| bounds.has_l[i])
            .map(|i| (bounds.gap_l(&it.x, i), step.dx[i]))
            .chain((0..n).filter(|&i| bounds.has_u[i]).map(|i| (bounds.gap_u(&it.x, i), -step.dx[i])))
            .chain(it.s.iter().zip(&step.ds).map(|(a, b)| (*a, *b))),
        tau,
    )
}

fn dual_fraction(bounds: &Bounds, it: &Iterate, step: &Step, tau: f64) -> f64 {
    let n = it.x.len();
    fraction_to_boundary(
        (0..n)
            .filter(|&i| bounds.has_l[i])
            .map(|i| (it.z_l[i], step.dz_l[i]))
            .chain((0..n).filter(|&i| bounds.has_u[i]).map(|i| (it.z_u[i], step.dz_u[i])))
            .chain(it.v.iter().zip(&step.dv).map(|(a, b)| (*a, *b))),
        tau,
    )
}

struct Step {
    delta_w: f64,
    dx: Vec<f64>,
    ds: Vec<f64>,
    dy_eq: Vec<f64>,
    dy_ineq: Vec<f64>,
    dz_l: Vec<f64>,
    dz_u: Vec<f64>,
    dv: Vec<f64>,
    curvature: f64,
}

/// Primal-dual interior-point solve from `start`.
pub fn solve<P: NlpProblem + ?Sized>(problem: &P, start: &IpmStart, options: &IpmOptions) -> Result<IpmSolution> {
    let n = problem.num_vars();
    let m_eq = problem.num_eq();
    let m_in = problem.num_ineq();
    crate::error::check_len("NLP starting point", n, start.x.len())?;
    let (lower, upper) = problem.bounds();
    crate::error::check_len("NLP lower bounds", n, lower.len())?;
    crate::error::check_len("NLP upper bounds", n, upper.len())?;
    for i in 0..n {
        if lower[i] > upper[i] {
            return Err(Error::config(format!("empty bound interval at variable {i}")));
        }
    }
    let bounds = Bounds {
        has_l: lower.iter().map(|v| v.is_finite()).collect(),
        has_u: upper.iter().map(|v| v.is_finite()).collect(),
        lower,
        upper,
    };

    let mut mu = options.mu_init;
    let mut x = start.x.clone();
    for i in 0..n {
        let (l, u) = (bounds.lower[i], bounds.upper[i]);
        let push_l = options.bound_push * l.abs().max(1.0);
        let push_u = options.bound_push * u.abs().max(1.0);
        let (mut lo, mut hi) = (l + push_l, u - push_u);
        if bounds.has_l[i] && bounds.has_u[i] {
            let half = options.bound_push * (u - l);
            lo = lo.min(l + half);
            hi = hi.max(u - half);
        }
        if bounds.has_l[i] {
            x[i] = x[i].max(lo);
        }
        if bounds.has_u[i] {
            x[i] = x[i].min(hi);
        }
    }
    if !problem.in_domain(&x) {
        return Err(Error::domain("NLP starting point outside the problem domain"));
    }
    let mut ev = evaluate(problem, &x)?;
    let s: Vec<f64> = ev.c_ineq.iter().map(|c| c.max(options.bound_push)).collect();
    let y_eq = start.y_eq.clone().unwrap_or_else(|| vec![0.0; m_eq]);
    crate::error::check_len("NLP equality multipliers", m_eq, y_eq.len())?;
    let v: Vec<f64> = match &start.y_ineq {
        Some(y) => {
            crate::error::check_len("NLP inequality multipliers", m_in, y.len())?;
            y.iter().zip(&s).map(|(yi, si)| yi.max(1e-2 * mu / si)).collect()
        }
        None => s.iter().map(|si| mu / si).collect(),
    };
    let init_z = |given: &Option<Vec<f64>>, has: &[bool], gap: &dyn Fn(usize) -> f64| -> Vec<f64> {
        (0..n)
            .map(|i| {
                if !has[i] {
                    0.0
                } else {
                    let barrier = mu / gap(i);
                    match given {
                        Some(z) if z.len() == n => z[i].max(1e-2 * barrier),
                        _ => barrier,
                    }
                }
            })
            .collect()
    };
    let z_l = init_z(&start.z_lower, &bounds.has_l, &|i| bounds.gap_l(&x, i));
    let z_u = init_z(&start.z_upper, &bounds.has_u, &|i| bounds.gap_u(&x, i));
    let mut it = Iterate {
        x,
        s,
        y_eq,
        y_ineq: v.clone(),
        z_l,
        z_u,
        v,
    };

    let mut delta_w_last = 0.0;
    // Raised after short steps so a badly modelled direction is damped next time.
    let mut delta_w_floor: f64 = 0.0;
    let mut nu = 1.0;
    let mut hess = Vec::new();
    let mut status = IpmStatus::MaxIterations;
    let mut iterations = 0;
    let mut stalls = 0;

    loop {
        let err0 = optimality_error(&ev, &it, &bounds, 0.0);
        if err0.scaled() <= options.tol && err0.primal <= options.constr_tol.max(options.tol) {
            status = IpmStatus::Converged;
            break;
        }
        if iterations >= options.max_iter {
            break;
        }
        loop {
            let err_mu = optimality_error(&ev, &it, &bounds, mu);
            if err_mu.scaled() > KAPPA_EPS * mu || mu <= options.tol / 10.0 {
                break;
            }
            mu = (options.tol / 10.0).max((0.2 * mu).min(mu.powf(1.5)));
        }
        iterations += 1;

        hess.clear();
        problem.hessian(&it.x, 1.0, &it.y_eq, &it.y_ineq, &mut hess);
        let r_in: Vec<f64> = ev.c_ineq.iter().zip(&it.s).map(|(c, s)| c - s).collect();
        let mut step = compute_step(&ev, &it, &bounds, &hess, mu, (&ev.c_eq, &r_in), delta_w_floor, &mut delta_w_last)?;

        let tau = (1.0 - mu).max(0.99);
        let mut alpha_primal = primal_fraction(&bounds, &it, &step, tau);
        let mut alpha_dual = dual_fraction(&bounds, &it, &step, tau);

        // ℓ1 merit on the barrier problem.
        let y_new_max = it
            .y_eq
            .iter()
            .zip(&step.dy_eq)
            .chain(it.y_ineq.iter().zip(&step.dy_ineq))
            .fold(0.0f64, |m, (y, d)| m.max((y + d).abs()));
        if nu < y_new_max + 1.0 {
            nu = 2.0 * y_new_max + 1.0;
        }
        let violation = |ev: &Evaluation, s: &[f64]| -> f64 {
            ev.c_eq.iter().map(|c| c.abs()).sum::<f64>()
                + ev.c_ineq.iter().zip(s).map(|(c, s)| (c - s).abs()).sum::<f64>()
        };
        let merit = |ev: &Evaluation, x: &[f64], s: &[f64]| -> f64 {
            ev.f + mu * bounds.barrier(x, s) + nu * violation(ev, s)
        };
        let phi0 = merit(&ev, &it.x, &it.s);
        let mut slope = 0.0;
        for i in 0..n {
            let mut g = ev.grad[i];
            if bounds.has_l[i] {
                g -= mu / bounds.gap_l(&it.x, i);
            }
            if bounds.has_u[i] {
                g += mu / bounds.gap_u(&it.x, i);
            }
            slope += g * step.dx[i];
        }
        for (si, dsi) in it.s.iter().zip(&step.ds) {
            slope -= mu / si * dsi;
        }
        slope -= nu * violation(&ev, &it.s);

        let mut accepted = None;
        let mut first_trial = true;
        while alpha_primal >= MIN_STEP {
            let x_trial: Vec<f64> = it.x.iter().zip(&step.dx).map(|(a, d)| a + alpha_primal * d).collect();
            let s_trial: Vec<f64> = it.s.iter().zip(&step.ds).map(|(a, d)| a + alpha_primal * d).collect();
            if problem.in_domain(&x_trial) {
                if let Ok(ev_trial) = evaluate(problem, &x_trial) {
                    let phi = merit(&ev_trial, &x_trial, &s_trial);
                    // The slack absorbs rounding once predicted decreases reach noise level.
                    let noise = MERIT_NOISE * phi0.abs().max(1.0);
                    let target = phi0 + ARMIJO * alpha_primal * slope.min(0.0) + noise;
                    if phi.is_finite() && phi <= target {
                        accepted = Some((x_trial, s_trial, ev_trial));
                        break;
                    }
                    if first_trial {
                        first_trial = false;
                        // Second-order correction against curvature of the constraints.
                        let c_soc: Vec<f64> =
                            ev.c_eq.iter().zip(&ev_trial.c_eq).map(|(c, ct)| alpha_primal * c + ct).collect();
                        let r_soc: Vec<f64> = (0..m_in)
                            .map(|r| alpha_primal * r_in[r] + ev_trial.c_ineq[r] - s_trial[r])
                            .collect();
                        let mut dw = step.delta_w;
                        if let Ok(soc) =
                            compute_step(&ev, &it, &bounds, &hess, mu, (&c_soc, &r_soc), step.delta_w, &mut dw)
                        {
                            let alpha_soc = primal_fraction(&bounds, &it, &soc, tau);
                            let x_soc: Vec<f64> = it.x.iter().zip(&soc.dx).map(|(a, d)| a + alpha_soc * d).collect();
                            let s_soc: Vec<f64> = it.s.iter().zip(&soc.ds).map(|(a, d)| a + alpha_soc * d).collect();
                            if alpha_soc > 0.0 && problem.in_domain(&x_soc) {
                                if let Ok(ev_soc) = evaluate(problem, &x_soc) {
                                    let phi_soc = merit(&ev_soc, &x_soc, &s_soc);
                                    if phi_soc.is_finite() && phi_soc <= target {
                                        alpha_dual = dual_fraction(&bounds, &it, &soc, tau);
                                        alpha_primal = alpha_soc;
                                        step = soc;
                                        accepted = Some((x_soc, s_soc, ev_soc));
                                        break;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            alpha_primal *= 0.5;
        }
        let (x_new, s_new, ev_new) = match accepted {
            Some(found) => {
                stalls = 0;
                found
            }
            None => {
                stalls += 1;
                if stalls >= 3 {
                    status = IpmStatus::Stalled;
                    break;
                }
                // Take a short step to escape; the next iteration rebuilds the model.
                let alpha = fraction_to_boundary(std::iter::empty(), tau).min(1e-3);
                let x_trial: Vec<f64> = it.x.iter().zip(&step.dx).map(|(a, d)| a + alpha * d).collect();
                let s_trial: Vec<f64> = it.s.iter().zip(&step.ds).map(|(a, d)| (a + alpha * d).max(1e-300)).collect();
                if !problem.in_domain(&x_trial) {
                    status = IpmStatus::Stalled;
                    break;
                }
                let ev_trial = evaluate(problem, &x_trial)?;
                alpha_primal = alpha;
                (x_trial, s_trial, ev_trial)
            }
        };

        if alpha_primal < SHORT_STEP {
            delta_w_floor = (10.0 * step.delta_w.max(1e-4)).min(MAX_DAMPING);
        } else {
            delta_w_floor = if delta_w_floor > 1e-6 { delta_w_floor / 10.0 } else { 0.0 };
        }
        it.x = x_new;
        it.s = s_new;
        ev = ev_new;
        for (y, d) in it.y_eq.iter_mut().zip(&step.dy_eq) {
            *y += alpha_primal * d;
        }
        for (y, d) in it.y_ineq.iter_mut().zip(&step.dy_ineq) {
            *y += alpha_primal * d;
        }
        for i in 0..n {
            if bounds.has_l[i] {
                let gap = bounds.gap_l(&it.x, i).max(GAP_FLOOR * bounds.lower[i].abs().max(1.0));
                let z = it.z_l[i] + alpha_dual * step.dz_l[i];
                it.z_l[i] = z.clamp(mu / (KAPPA_SIGMA * gap), KAPPA_SIGMA * mu / gap);
            }
            if bounds.has_u[i] {
                let gap = bounds.gap_u(&it.x, i).max(GAP_FLOOR * bounds.upper[i].abs().max(1.0));
                let z = it.z_u[i] + alpha_dual * step.dz_u[i];
                it.z_u[i] = z.clamp(mu / (KAPPA_SIGMA * gap), KAPPA_SIGMA * mu / gap);
            }
        }
        for (i, vi) in it.v.iter_mut().enumerate() {
            let z = *vi + alpha_dual * step.dv[i];
            let s = it.s[i].max(GAP_FLOOR);
            *vi = z.clamp(mu / (KAPPA_SIGMA * s), KAPPA_SIGMA * mu / s);
        }
        if !step.curvature.is_finite() {
            return Err(Error::Numerical("non-finite curvature in NLP step".into()));
        }
    }

    let err = optimality_error(&ev, &it, &bounds, 0.0);
    Ok(IpmSolution {
        objective: ev.f,
        kkt_error: err.unscaled(),
        constraint_violation: err.primal,
        x: it.x,
        y_eq: it.y_eq,
        y_ineq: it.y_ineq,
        z_lower: it.z_l,
        z_upper: it.z_u,
        iterations,
        status,
    })
}

fn compute_step(
    ev: &Evaluation,
    it: &Iterate,
    bounds: &Bounds,
    hess: &[Triplet],
    mu: f64,
    residuals: (&[f64], &[f64]),
    delta_w_floor: f64,
    delta_w_last: &mut f64,
) -> Result<Step> {
    let (c_eq, r_in) = residuals;
    let n = it.x.len();
    let m_eq = it.y_eq.len();
    let m_in = it.s.len();
    let dim = n + m_eq;

    // Diagonal barrier terms.
    let mut sigma_x = vec![0.0; n];
    let mut grad_b = ev.grad.clone();
    for i in 0..n {
        if bounds.has_l[i] {
            let gap = bounds.gap_l(&it.x, i);
            sigma_x[i] += it.z_l[i] / gap;
            grad_b[i] -= mu / gap;
        }
        if bounds.has_u[i] {
            let gap = bounds.gap_u(&it.x, i);
            sigma_x[i] += it.z_u[i] / gap;
            grad_b[i] += mu / gap;
        }
    }
    let sigma_s: Vec<f64> = it.v.iter().zip(&it.s).map(|(v, s)| v / s).collect();

    let mut base = Mat::<f64>::zeros(dim, dim);
    for &(i, j, v) in hess {
        base[(i, j)] += v;
        if i != j {
            base[(j, i)] += v;
        }
    }
    for i in 0..n {
        base[(i, i)] += sigma_x[i];
    }
    // A_Iᵀ Σ_s A_I, accumulated row by row of A_I.
    let mut rows_in: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m_in];
    for &(r, c, v) in &ev.jac_ineq {
        rows_in[r].push((c, v));
    }
    for (r, row) in rows_in.iter().enumerate() {
        let w = sigma_s[r];
        for &(a, va) in row {
            for &(b, vb) in row {
                base[(a, b)] += w * va * vb;
            }
        }
    }
    for &(r, c, v) in &ev.jac_eq {
        base[(n + r, c)] += v;
        base[(c, n + r)] += v;
    }

    // Right-hand side for (dx, −dy_E).
    let mut rhs = Mat::<f64>::zeros(dim, 1);
    let mut top: Vec<f64> = grad_b.iter().map(|g| -g).collect();
    add_transpose_product(&ev.jac_eq, &it.y_eq, &mut top);
    let extra: Vec<f64> = (0..m_in).map(|r| mu / it.s[r] - sigma_s[r] * r_in[r]).collect();
    add_transpose_product(&ev.jac_ineq, &extra, &mut top);
    for i in 0..n {
        rhs[(i, 0)] = top[i];
    }
    for r in 0..m_eq {
        rhs[(n + r, 0)] = -c_eq[r];
    }

    let mut delta_w = delta_w_floor;
    let mut delta_c = 0.0;
    let mut attempts = 0;
    loop {
        let mut kkt = base.clone();
        for i in 0..n {
            kkt[(i, i)] += delta_w;
        }
        for r in 0..m_eq {
            kkt[(n + r, n + r)] -= delta_c;
        }
        let sol = kkt.partial_piv_lu().solve(&rhs);
        let dx: Vec<f64> = (0..n).map(|i| sol[(i, 0)]).collect();
        let finite = (0..dim).all(|i| sol[(i, 0)].is_finite());
        let mut curvature = f64::NAN;
        if finite {
            curvature = 0.0;
            for i in 0..n {
                let mut row = 0.0;
                for j in 0..n {
                    row += kkt[(i, j)] * dx[j];
                }
                curvature += row * dx[i];
            }
        }
        let dx_norm2: f64 = dx.iter().map(|d| d * d).sum();
        let residual_ok = finite && {
            let mut worst: f64 = 0.0;
            for i in 0..dim {
                let mut row = 0.0;
                for j in 0..dim {
                    row += kkt[(i, j)] * sol[(j, 0)];
                }
                worst = worst.max((row - rhs[(i, 0)]).abs());
            }
            let scale = 1.0 + (0..dim).fold(0.0f64, |m, i| m.max(rhs[(i, 0)].abs()));
            worst <= 1e-6 * scale
        };
        attempts += 1;
        if residual_ok && (curvature > 1e-12 * dx_norm2 || dx_norm2 == 0.0) {
            if delta_w > 0.0 {
                *delta_w_last = delta_w;
            }
            let dy_eq: Vec<f64> = (0..m_eq).map(|r| -sol[(n + r, 0)]).collect();
            let a_dx = product(&ev.jac_ineq, &dx, m_in);
            let ds: Vec<f64> = (0..m_in).map(|r| a_dx[r] + r_in[r]).collect();
            let dv: Vec<f64> = (0..m_in).map(|r| mu / it.s[r] - it.v[r] - sigma_s[r] * ds[r]).collect();
            let dy_ineq: Vec<f64> = (0..m_in).map(|r| it.v[r] + dv[r] - it.y_ineq[r]).collect();
            let mut dz_l = vec![0.0; n];
            let mut dz_u = vec![0.0; n];
            for i in 0..n {
                if bounds.has_l[i] {
                    let gap = bounds.gap_l(&it.x, i);
                    dz_l[i] = mu / gap - it.z_l[i] - it.z_l[i] / gap * dx[i];
                }
                if bounds.has_u[i] {
                    let gap = bounds.gap_u(&it.x, i);
                    dz_u[i] = mu / gap - it.z_u[i] + it.z_u[i] / gap * dx[i];
                }
            }
            return Ok(Step {
                delta_w,
                dx,
                ds,
                dy_eq,
                dy_ineq,
                dz_l,
                dz_u,
                dv,
                curvature,
            });
        }
        if attempts > 40 {
            return Err(Error::Numerical("could not regularize the KKT system".into()));
        }
        if !residual_ok && m_eq > 0 && delta_c == 0.0 {
            delta_c = 1e-8 * mu.powf(0.25);
        }
        delta_w = if delta_w == 0.0 {
            if *delta_w_last == 0.0 {
                1e-4
            } else {
                (*delta_w_last / 3.0).max(1e-20)
            }
        } else if *delta_w_last == 0.0 {
            delta_w * 100.0
        } else {
            delta_w * 8.0
        };
        if delta_w > 1e40 {
            return Err(Error::Numerical("Hessian regularization diverged".into()));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dense convex QP: `½xᵀQx + cᵀx` s.t. `A_E x = b_E`, `A_I x ≥ b_I`.
    struct Qp {
        q: Vec<Vec<f64>>,
        c: Vec<f64>,
        a_eq: Vec<Vec<f64>>,
        b_eq: Vec<f64>,
        a_in: Vec<Vec<f64>>,
        b_in: Vec<f64>,
        lower: Vec<f64>,
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
        fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (self.lower.clone(), vec![f64::INFINITY; self.c.len()])
        }
        fn objective(&self, x: &[f64]) -> f64 {
            let n = x.len();
            let mut f = 0.0;
            for i in 0..n {
                f += self.c[i] * x[i];
                for j in 0..n {
                    f += 0.5 * x[i] * self.q[i][j] * x[j];
                }
            }
            f
        }
        fn gradient(&self, x: &[f64], g: &mut [f64]) {
            for i in 0..x.len() {
                g[i] = self.c[i] + (0..x.len()).map(|j| self.q[i][j] * x[j]).sum::<f64>();
            }
        }
        fn eq_constraints(&self, x: &[f64], out: &mut [f64]) {
            for (r, row) in self.a_eq.iter().enumerate() {
                out[r] = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - self.b_eq[r];
            }
        }
        fn ineq_constraints(&self, x: &[f64], out: &mut [f64]) {
            for (r, row) in self.a_in.iter().enumerate() {
                out[r] = row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() - self.b_in[r];
            }
        }
        fn eq_jacobian(&self, _x: &[f64], jac: &mut Vec<Triplet>) {
            for (r, row) in self.a_eq.iter().enumerate() {
                jac.extend(row.iter().enumerate().map(|(c, v)| (r, c, *v)));
            }
        }
        fn ineq_jacobian(&self, _x: &[f64], jac: &mut Vec<Triplet>) {
            for (r, row) in self.a_in.iter().enumerate() {
                jac.extend(row.iter().enumerate().map(|(c, v)| (r, c, *v)));
            }
        }
        fn hessian(&self, _x: &[f64], obj: f64, _ye: &[f64], _yi: &[f64], hess: &mut Vec<Triplet>) {
            for i in 0..self.c.len() {
                for j in 0..=i {
                    hess.push((i, j, obj * self.q[i][j]));
                }
            }
        }
    }

    fn scalar_qp(lower: f64, ineq: bool) -> Qp {
        Qp {
            q: vec![vec![2.0]],
            c: vec![-2.0],
            a_eq: vec![],
            b_eq: vec![],
            a_in: if ineq { vec![vec![1.0]] } else { vec![] },
            b_in: if ineq { vec![2.0] } else { vec![] },
            lower: vec![lower],
        }
    }

    #[test]
    fn bound_constrained_scalar() {
        // min (x−1)² s.t. x ≥ 2 as a general inequality.
        let sol = solve(&scalar_qp(f64::NEG_INFINITY, true), &IpmStart::primal(vec![5.0]), &IpmOptions::default()).unwrap();
        assert!(sol.converged());
        assert!((sol.x[0] - 2.0).abs() < 1e-7);
        assert!((sol.y_ineq[0] - 2.0).abs() < 1e-6);

        // Same problem with a simple bound.
        let sol = solve(&scalar_qp(2.0, false), &IpmStart::primal(vec![0.0]), &IpmOptions::default()).unwrap();
        assert!(sol.converged());
        assert!((sol.x[0] - 2.0).abs() < 1e-7);
        assert!((sol.z_lower[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn equality_constrained_pair() {
        let qp = Qp {
            q: vec![vec![2.0, 0.0], vec![0.0, 2.0]],
            c: vec![0.0, 0.0],
            a_eq: vec![vec![1.0, 1.0]],
            b_eq: vec![1.0],
            a_in: vec![],
            b_in: vec![],
            lower: vec![f64::NEG_INFINITY; 2],
        };
        let sol = solve(&qp, &IpmStart::primal(vec![3.0, -1.0]), &IpmOptions::default()).unwrap();
        assert!(sol.converged());
        assert!((sol.x[0] - 0.5).abs() < 1e-9 && (sol.x[1] - 0.5).abs() < 1e-9);
        assert!((sol.y_eq[0] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn nonconvex_objective_needs_regularization() {
        // min −x² on [−1, 2]: the Hessian is negative definite everywhere.
        struct Concave;
        impl NlpProblem for Concave {
            fn num_vars(&self) -> usize {
                1
            }
            fn num_eq(&self) -> usize {
                0
            }
            fn num_ineq(&self) -> usize {
                0
            }
            fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
                (vec![-1.0], vec![2.0])
            }
            fn objective(&self, x: &[f64]) -> f64 {
                -x[0] * x[0]
            }
            fn gradient(&self, x: &[f64], g: &mut [f64]) {
                g[0] = -2.0 * x[0];
            }
            fn eq_constraints(&self, _x: &[f64], _out: &mut [f64]) {}
            fn ineq_constraints(&self, _x: &[f64], _out: &mut [f64]) {}
            fn eq_jacobian(&self, _x: &[f64], _jac: &mut Vec<Triplet>) {}
            fn ineq_jacobian(&self, _x: &[f64], _jac: &mut Vec<Triplet>) {}
            fn hessian(&self, _x: &[f64], obj: f64, _ye: &[f64], _yi: &[f64], hess: &mut Vec<Triplet>) {
                hess.push((0, 0, -2.0 * obj));
            }
        }
        let sol = solve(&Concave, &IpmStart::primal(vec![0.5]), &IpmOptions::default()).unwrap();
        assert!(sol.converged());
        assert!((sol.x[0] - 2.0).abs() < 1e-7);
    }

    #[test]
    fn zero_iteration_budget_reports_non_convergence() {
        let options = IpmOptions {
            max_iter: 0,
            ..IpmOptions::default()
        };
        let sol = solve(&scalar_qp(f64::NEG_INFINITY, true), &IpmStart::primal(vec![5.0]), &options).unwrap();
        assert_eq!(sol.status, IpmStatus::MaxIterations);
        assert_eq!(sol.iterations, 0);
    }

    #[test]
    fn deterministic() {
        let qp = scalar_qp(f64::NEG_INFINITY, true);
        let a = solve(&qp, &IpmStart::primal(vec![5.0]), &IpmOptions::default()).unwrap();
        let b = solve(&qp, &IpmStart::primal(vec![5.0]), &IpmOptions::default()).unwrap();
        assert_eq!(a, b);
    }
}
