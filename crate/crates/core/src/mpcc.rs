//! Finite-horizon leader/follower problem and its relaxed complementarity
//! reformulation.
//!
//! The follower's mint/burn problem is convex in its own variables once the
//! stablecoin price inside the collateral dynamics is frozen at the latest
//! observation, so it can be replaced by its KKT conditions. Complementarity
//! `μ_i·h_i = 0` is relaxed to `μ_i·h_i = ε_i` and `ε` is halved between
//! solves until successive primal solutions stop moving.
//!
//! Variables are stacked as `z = [x, y, λ, μ]` with
//!
//! ```text
//! x = [α_0..α_T, δα_0..δα_{T-1}]
//! y = [S_0..S_T, C_0..C_T, Δ_0..Δ_{T-1}] / σ
//! ```
//!
//! where `σ` is the initial supply. Token quantities are divided by `σ` so
//! the NLP is well scaled for any supply level; the follower's alignment
//! penalty is expressed per unit of that scale.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::nlp::{self, IpmOptions, IpmStart, NlpProblem, Triplet};
use crate::objectives::{stage_weights, ForecastBundle};
use crate::state::{ProtocolParams, SpeculatorParams, SystemState};

/// Index map for the stacked variable vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub horizon: usize,
}

impl Layout {
    pub fn new(horizon: usize) -> Self {
        Self { horizon }
    }

    pub fn num_upper(&self) -> usize {
        2 * self.horizon + 1
    }

    pub fn num_lower(&self) -> usize {
        3 * self.horizon + 2
    }

    /// Rows of the lower-level equalities `g`.
    pub fn num_g(&self) -> usize {
        2 * self.horizon + 2
    }

    /// Rows of the lower-level inequalities `h`.
    pub fn num_h(&self) -> usize {
        3 * self.horizon
    }

    pub fn num_vars(&self) -> usize {
        self.num_upper() + self.num_lower() + self.num_g() + self.num_h()
    }

    pub fn alpha(&self, t: usize) -> usize {
        t
    }

    pub fn rate(&self, t: usize) -> usize {
        self.horizon + 1 + t
    }

    pub fn supply(&self, t: usize) -> usize {
        self.num_upper() + t
    }

    pub fn collateral(&self, t: usize) -> usize {
        self.num_upper() + self.horizon + 1 + t
    }

    pub fn delta(&self, t: usize) -> usize {
        self.num_upper() + 2 * self.horizon + 2 + t
    }

    /// Multiplier of `g` row `j`. Rows `2t` carry supply dynamics (or the
    /// initial supply at `t = 0`), rows `2t + 1` collateral.
    pub fn lambda(&self, j: usize) -> usize {
        self.num_upper() + self.num_lower() + j
    }

    pub fn mu(&self, i: usize) -> usize {
        self.num_upper() + self.num_lower() + self.num_g() + i
    }

    /// `h` row of the vault constraint at stage `t ≥ 1`.
    pub fn vault_row(&self, t: usize) -> usize {
        t - 1
    }

    pub fn lower_box_row(&self, t: usize) -> usize {
        self.horizon + t
    }

    pub fn upper_box_row(&self, t: usize) -> usize {
        2 * self.horizon + t
    }

    /// Offsets of the NLP equality blocks `[G, g, ∇_y L, μ∘h − ε]`.
    fn eq_offsets(&self) -> (usize, usize, usize, usize) {
        let g = self.horizon + 1;
        let stat = g + self.num_g();
        let comp = stat + self.num_lower();
        (0, g, stat, comp)
    }

    pub fn num_eq(&self) -> usize {
        self.horizon + 1 + self.num_g() + self.num_lower() + self.num_h()
    }
}

/// One receding-horizon instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonProblem {
    pub state: SystemState,
    pub forecasts: ForecastBundle,
    pub protocol: ProtocolParams,
    pub speculator: SpeculatorParams,
}

impl HorizonProblem {
    pub fn horizon(&self) -> usize {
        self.forecasts.horizon()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MpccSettings {
    /// Box on every planned rate change, `|δα_t| ≤ rate_bound`.
    pub rate_bound: f64,
    /// Box on every planned mint/burn as a fraction of the initial supply.
    pub supply_box_fraction: f64,
    /// Outer stopping threshold on successive primal solutions.
    pub mu_tol: f64,
    pub max_outer: usize,
    pub eps_init: f64,
    /// Iteration budget of each inner solve.
    pub max_inner: usize,
    pub inner_tol: f64,
    /// Barrier parameter used when an inner solve is warm started.
    pub warm_barrier: f64,
}

impl Default for MpccSettings {
    fn default() -> Self {
        Self {
            rate_bound: 0.1,
            supply_box_fraction: 0.5,
            mu_tol: 1e-4,
            max_outer: 10,
            eps_init: 1.0,
            max_inner: 200,
            inner_tol: 1e-8,
            warm_barrier: 1e-4,
        }
    }
}

impl MpccSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate_bound > 0.0 && self.supply_box_fraction > 0.0) {
            return Err(Error::config("MPCC boxes must be positive"));
        }
        if !(self.mu_tol > 0.0 && self.eps_init > 0.0 && self.inner_tol > 0.0 && self.warm_barrier > 0.0) {
            return Err(Error::config("MPCC tolerances must be positive"));
        }
        if self.max_outer < 1 {
            return Err(Error::config("at least one outer iteration is required"));
        }
        Ok(())
    }

    fn ipm_options(&self, warm: bool) -> IpmOptions {
        IpmOptions {
            tol: self.inner_tol,
            constr_tol: self.inner_tol * 0.1,
            max_iter: self.max_inner,
            mu_init: if warm { self.warm_barrier } else { 0.1 },
            bound_push: if warm { 1e-8 } else { 1e-2 },
        }
    }
}

/// Penalty term `w·(α − q(u))²` with `q = D/u` and its derivatives, scaled by `σ`.
#[derive(Debug, Clone, Copy)]
struct Penalty {
    value: f64,
    /// `∂/∂u`
    r: f64,
    r_a: f64,
    r_u: f64,
    r_au: f64,
    r_uu: f64,
    /// `∂/∂α`
    d_alpha: f64,
}

/// The single-level relaxed NLP for one horizon.
#[derive(Debug, Clone)]
pub struct HorizonNlp {
    layout: Layout,
    scale: f64,
    supply0: f64,
    collateral0: f64,
    alpha0: f64,
    /// Demand in units of `σ`.
    demand: Vec<f64>,
    collateral_price: Vec<f64>,
    stablecoin_price: Vec<f64>,
    returns: Vec<f64>,
    kappa: Vec<f64>,
    weights: Vec<f64>,
    discount: Vec<f64>,
    /// `σ·w_S`
    penalty: f64,
    beta: f64,
    peg: f64,
    rate_bound: f64,
    box_half: f64,
    eps: Vec<f64>,
}

/// Builds the relaxed NLP for `problem` with every `ε_i = eps`.
pub fn assemble(problem: &HorizonProblem, settings: &MpccSettings, eps: f64) -> Result<HorizonNlp> {
    problem.state.validate()?;
    problem.forecasts.validate()?;
    problem.protocol.validate()?;
    problem.speculator.validate()?;
    settings.validate()?;
    let horizon = problem.horizon();
    if horizon < 1 {
        return Err(Error::config("horizon must be at least 1"));
    }
    let state = &problem.state;
    if state.supply <= 0.0 {
        return Err(Error::domain("horizon problem needs positive initial supply"));
    }
    let scale = state.supply;
    let f = &problem.forecasts;
    let weights = stage_weights(f, state.supply, &problem.protocol)?;
    let kappa = (0..horizon).map(|t| f.stablecoin_price[t] / f.collateral_price[t]).collect();
    let discount = (0..horizon).map(|t| problem.speculator.discount.powi(t as i32)).collect();
    let layout = Layout::new(horizon);
    Ok(HorizonNlp {
        layout,
        scale,
        supply0: 1.0,
        collateral0: state.collateral / scale,
        alpha0: state.redemption_price,
        demand: f.demand.iter().map(|d| d / scale).collect(),
        collateral_price: f.collateral_price.clone(),
        stablecoin_price: f.stablecoin_price.clone(),
        returns: f.returns.clone(),
        kappa,
        weights,
        discount,
        penalty: scale * problem.speculator.arb_weight,
        beta: problem.speculator.min_collateral_ratio,
        peg: problem.protocol.peg,
        rate_bound: settings.rate_bound,
        box_half: settings.supply_box_fraction,
        eps: vec![eps; layout.num_h()],
    })
}

impl HorizonNlp {
    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Supply scale `σ`.
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn eps(&self) -> &[f64] {
        &self.eps
    }

    pub fn set_eps(&mut self, eps: f64) {
        self.eps.iter_mut().for_each(|e| *e = eps);
    }

    pub fn stage_weights(&self) -> &[f64] {
        &self.weights
    }

    fn horizon(&self) -> usize {
        self.layout.horizon
    }

    /// Follower linear coefficient `γ^t·(r̂_t·p̂_t − α_t)`.
    fn gain(&self, t: usize, alpha: f64) -> f64 {
        self.discount[t] * (self.returns[t] * self.stablecoin_price[t] - alpha)
    }

    fn penalty_terms(&self, t: usize, alpha: f64, u: f64) -> Penalty {
        let d = self.demand[t];
        let q = d / u;
        let q1 = -d / (u * u);
        let q2 = 2.0 * d / (u * u * u);
        let q3 = -6.0 * d / (u * u * u * u);
        let w = self.penalty;
        let gap = alpha - q;
        Penalty {
            value: w * gap * gap,
            r: -2.0 * w * gap * q1,
            r_a: -2.0 * w * q1,
            r_u: 2.0 * w * (q1 * q1 - gap * q2),
            r_au: -2.0 * w * q2,
            r_uu: 2.0 * w * (3.0 * q1 * q2 - gap * q3),
            d_alpha: 2.0 * w * gap,
        }
    }

    /// Peg error at stage `t` and its first two derivatives in scaled supply.
    fn peg_terms(&self, t: usize, supply: f64) -> (f64, f64, f64) {
        let d = self.demand[t];
        (
            d / supply - self.peg,
            -d / (supply * supply),
            2.0 * d / (supply * supply * supply),
        )
    }

    fn vault(&self, z: &[f64], t: usize) -> f64 {
        let l = &self.layout;
        self.collateral_price[t] * z[l.collateral(t)] - self.beta * z[l.alpha(t)] * z[l.supply(t)]
    }

    // ---- upper level -------------------------------------------------------

    /// Leader cost `F`.
    pub fn upper_objective(&self, z: &[f64]) -> f64 {
        let l = &self.layout;
        let mut total = 0.0;
        for t in 0..=self.horizon() {
            let (e, _, _) = self.peg_terms(t, z[l.supply(t)]);
            total += e * e;
            if t < self.horizon() {
                let r = z[l.rate(t)];
                total += self.weights[t] * r * r + r * e;
            }
        }
        total
    }

    pub fn upper_gradient(&self, z: &[f64], grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let l = &self.layout;
        for t in 0..=self.horizon() {
            let (e, e1, _) = self.peg_terms(t, z[l.supply(t)]);
            let r = if t < self.horizon() { z[l.rate(t)] } else { 0.0 };
            grad[l.supply(t)] = (2.0 * e + r) * e1;
            if t < self.horizon() {
                grad[l.rate(t)] = 2.0 * self.weights[t] * r + e;
            }
        }
    }

    /// Upper-level equalities `G`: initial redemption price and its dynamics.
    pub fn upper_equalities(&self, z: &[f64], out: &mut [f64]) {
        let l = &self.layout;
        out[0] = z[l.alpha(0)] - self.alpha0;
        for t in 0..self.horizon() {
            out[1 + t] = z[l.alpha(t + 1)] - z[l.alpha(t)] - z[l.rate(t)];
        }
    }

    fn upper_equality_jacobian(&self, row0: usize, jac: &mut Vec<Triplet>) {
        let l = &self.layout;
        jac.push((row0, l.alpha(0), 1.0));
        for t in 0..self.horizon() {
            jac.push((row0 + 1 + t, l.alpha(t + 1), 1.0));
            jac.push((row0 + 1 + t, l.alpha(t), -1.0));
            jac.push((row0 + 1 + t, l.rate(t), -1.0));
        }
    }

    // ---- lower level -------------------------------------------------------

    /// Follower objective `f = −U`, in token units.
    pub fn lower_objective(&self, z: &[f64]) -> f64 {
        let l = &self.layout;
        (0..self.horizon())
            .map(|t| {
                let a = z[l.alpha(t)];
                let delta = z[l.delta(t)];
                let pen = self.penalty_terms(t, a, z[l.supply(t)] + delta);
                -self.scale * self.gain(t, a) * delta + pen.value
            })
            .sum()
    }

    /// Gradient of `f` with respect to every variable (only `x` and `y`
    /// entries can be nonzero).
    pub fn lower_gradient(&self, z: &[f64], grad: &mut [f64]) {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let l = &self.layout;
        for t in 0..self.horizon() {
            let a = z[l.alpha(t)];
            let delta = z[l.delta(t)];
            let pen = self.penalty_terms(t, a, z[l.supply(t)] + delta);
            grad[l.alpha(t)] = self.scale * self.discount[t] * delta + pen.d_alpha;
            grad[l.supply(t)] = pen.r;
            grad[l.delta(t)] = -self.scale * self.gain(t, a) + pen.r;
        }
    }

    /// Lower-level equalities `g` (initial conditions and dynamics), affine in `y`.
    pub fn lower_equalities(&self, z: &[f64], out: &mut [f64]) {
        let l = &self.layout;
        out[0] = z[l.supply(0)] - self.supply0;
        out[1] = z[l.collateral(0)] - self.collateral0;
        for t in 1..=self.horizon() {
            let delta = z[l.delta(t - 1)];
            out[2 * t] = z[l.supply(t)] - z[l.supply(t - 1)] - delta;
            out[2 * t + 1] = z[l.collateral(t)] - z[l.collateral(t - 1)] - self.kappa[t - 1] * delta;
        }
    }

    pub fn lower_equality_jacobian(&self, row0: usize, jac: &mut Vec<Triplet>) {
        let l = &self.layout;
        jac.push((row0, l.supply(0), 1.0));
        jac.push((row0 + 1, l.collateral(0), 1.0));
        for t in 1..=self.horizon() {
            let (rs, rc) = (row0 + 2 * t, row0 + 2 * t + 1);
            jac.push((rs, l.supply(t), 1.0));
            jac.push((rs, l.supply(t - 1), -1.0));
            jac.push((rs, l.delta(t - 1), -1.0));
            jac.push((rc, l.collateral(t), 1.0));
            jac.push((rc, l.collateral(t - 1), -1.0));
            jac.push((rc, l.delta(t - 1), -self.kappa[t - 1]));
        }
    }

    /// Lower-level inequalities `h ≥ 0`: vault safety at stages `1..=T`, then
    /// the lower and upper mint/burn boxes.
    pub fn lower_inequalities(&self, z: &[f64], out: &mut [f64]) {
        let l = &self.layout;
        for t in 1..=self.horizon() {
            out[l.vault_row(t)] = self.vault(z, t);
        }
        for t in 0..self.horizon() {
            let delta = z[l.delta(t)];
            out[l.lower_box_row(t)] = delta + self.box_half;
            out[l.upper_box_row(t)] = self.box_half - delta;
        }
    }

    pub fn lower_inequality_jacobian(&self, z: &[f64], row0: usize, jac: &mut Vec<Triplet>) {
        let l = &self.layout;
        for t in 1..=self.horizon() {
            let row = row0 + l.vault_row(t);
            jac.push((row, l.collateral(t), self.collateral_price[t]));
            jac.push((row, l.alpha(t), -self.beta * z[l.supply(t)]));
            jac.push((row, l.supply(t), -self.beta * z[l.alpha(t)]));
        }
        for t in 0..self.horizon() {
            jac.push((row0 + l.lower_box_row(t), l.delta(t), 1.0));
            jac.push((row0 + l.upper_box_row(t), l.delta(t), -1.0));
        }
    }

    /// `∇_y L` with `L = f − λᵀg − μᵀh`, one row per lower-level variable.
    pub fn stationarity(&self, z: &[f64], out: &mut [f64]) {
        let l = &self.layout;
        let horizon = self.horizon();
        let lam = |j: usize| z[l.lambda(j)];
        let mu = |i: usize| z[l.mu(i)];
        for t in 0..=horizon {
            let a = z[l.alpha(t)];
            let mut s_row = -lam(2 * t);
            let mut c_row = -lam(2 * t + 1);
            if t < horizon {
                let delta = z[l.delta(t)];
                let pen = self.penalty_terms(t, a, z[l.supply(t)] + delta);
                s_row += pen.r + lam(2 * t + 2);
                c_row += lam(2 * t + 3);
                out[2 * (horizon + 1) + t] = -self.scale * self.gain(t, a) + pen.r
                    + lam(2 * t + 2)
                    + self.kappa[t] * lam(2 * t + 3)
                    - mu(l.lower_box_row(t))
                    + mu(l.upper_box_row(t));
            }
            if t >= 1 {
                let mv = mu(l.vault_row(t));
                s_row += self.beta * a * mv;
                c_row -= self.collateral_price[t] * mv;
            }
            out[t] = s_row;
            out[horizon + 1 + t] = c_row;
        }
    }

    pub fn stationarity_jacobian(&self, z: &[f64], row0: usize, jac: &mut Vec<Triplet>) {
        let l = &self.layout;
        let horizon = self.horizon();
        for t in 0..=horizon {
            let a = z[l.alpha(t)];
            let s_row = row0 + t;
            let c_row = row0 + horizon + 1 + t;
            jac.push((s_row, l.lambda(2 * t), -1.0));
            jac.push((c_row, l.lambda(2 * t + 1), -1.0));
            if t < horizon {
                let pen = self.penalty_terms(t, a, z[l.supply(t)] + z[l.delta(t)]);
                jac.push((s_row, l.alpha(t), pen.r_a));
                jac.push((s_row, l.supply(t), pen.r_u));
                jac.push((s_row, l.delta(t), pen.r_u));
                jac.push((s_row, l.lambda(2 * t + 2), 1.0));
                jac.push((c_row, l.lambda(2 * t + 3), 1.0));

                let d_row = row0 + 2 * (horizon + 1) + t;
                jac.push((d_row, l.alpha(t), self.scale * self.discount[t] + pen.r_a));
                jac.push((d_row, l.supply(t), pen.r_u));
                jac.push((d_row, l.delta(t), pen.r_u));
                jac.push((d_row, l.lambda(2 * t + 2), 1.0));
                jac.push((d_row, l.lambda(2 * t + 3), self.kappa[t]));
                jac.push((d_row, l.mu(l.lower_box_row(t)), -1.0));
                jac.push((d_row, l.mu(l.upper_box_row(t)), 1.0));
            }
            if t >= 1 {
                let mv_idx = l.mu(l.vault_row(t));
                jac.push((s_row, l.alpha(t), self.beta * z[mv_idx]));
                jac.push((s_row, mv_idx, self.beta * a));
                jac.push((c_row, mv_idx, -self.collateral_price[t]));
            }
        }
    }

    /// `μ_i·h_i − ε_i`.
    pub fn complementarity(&self, z: &[f64], out: &mut [f64]) {
        let mut h = vec![0.0; self.layout.num_h()];
        self.lower_inequalities(z, &mut h);
        for i in 0..h.len() {
            out[i] = z[self.layout.mu(i)] * h[i] - self.eps[i];
        }
    }

    fn complementarity_jacobian(&self, z: &[f64], row0: usize, jac: &mut Vec<Triplet>) {
        let l = &self.layout;
        let mut h = vec![0.0; l.num_h()];
        self.lower_inequalities(z, &mut h);
        for i in 0..h.len() {
            jac.push((row0 + i, l.mu(i), h[i]));
        }
        for t in 1..=self.horizon() {
            let i = l.vault_row(t);
            let m = z[l.mu(i)];
            jac.push((row0 + i, l.collateral(t), m * self.collateral_price[t]));
            jac.push((row0 + i, l.alpha(t), -self.beta * m * z[l.supply(t)]));
            jac.push((row0 + i, l.supply(t), -self.beta * m * z[l.alpha(t)]));
        }
        for t in 0..self.horizon() {
            let lo = l.lower_box_row(t);
            let hi = l.upper_box_row(t);
            jac.push((row0 + lo, l.delta(t), z[l.mu(lo)]));
            jac.push((row0 + hi, l.delta(t), -z[l.mu(hi)]));
        }
    }

    /// Splits `z` into `(x, y, λ, μ)` slices.
    pub fn split<'a>(&self, z: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let l = &self.layout;
        let (x, rest) = z.split_at(l.num_upper());
        let (y, rest) = rest.split_at(l.num_lower());
        let (lam, mu) = rest.split_at(l.num_g());
        (x, y, lam, mu)
    }

    /// Cold start: no action, constant states, duals consistent with `ε`.
    pub fn cold_start(&self) -> Vec<f64> {
        let l = &self.layout;
        let mut z = vec![0.0; l.num_vars()];
        for t in 0..=self.horizon() {
            z[l.alpha(t)] = self.alpha0;
            z[l.supply(t)] = self.supply0;
            z[l.collateral(t)] = self.collateral0;
        }
        self.repair_vaults(&mut z);
        self.reset_complementarity_duals(&mut z);
        z
    }

    /// Re-integrates the dynamics from `z`'s controls, burning (or minting)
    /// just enough at each stage to leave every vault row at least
    /// `VAULT_MARGIN` inside the feasible side, within the mint/burn box.
    fn repair_vaults(&self, z: &mut [f64]) {
        const VAULT_MARGIN: f64 = 0.05;
        let l = &self.layout;
        let limit = 0.9 * self.box_half;
        for t in 0..self.horizon() {
            let mut delta = z[l.delta(t)];
            let alpha_next = z[l.alpha(t + 1)];
            let base = self.collateral_price[t + 1] * z[l.collateral(t)] - self.beta * alpha_next * z[l.supply(t)];
            let slope = self.collateral_price[t + 1] * self.kappa[t] - self.beta * alpha_next;
            if base + slope * delta < VAULT_MARGIN && slope != 0.0 {
                delta = ((VAULT_MARGIN - base) / slope).clamp(-limit, limit);
            }
            z[l.delta(t)] = delta;
            z[l.supply(t + 1)] = z[l.supply(t)] + delta;
            z[l.collateral(t + 1)] = z[l.collateral(t)] + self.kappa[t] * delta;
        }
    }

    /// Rolls a previous horizon solution forward by one stage (repeating the
    /// last one), rescales it, and re-integrates the dynamics from the current
    /// initial state. Falls back to a cold start when the result leaves the
    /// domain.
    pub fn rolled_start(&self, previous: &HorizonSolution) -> Vec<f64> {
        let l = &self.layout;
        let horizon = self.horizon();
        let mut z = self.cold_start();
        let prev_t = previous.delta_alpha.len();
        if prev_t == 0 {
            return z;
        }
        let pick = |v: &[f64], t: usize| v[(t + 1).min(v.len() - 1)];
        let margin = 1.0 - 1e-3;
        for t in 0..horizon {
            let rate = pick(&previous.delta_alpha, t).clamp(-margin * self.rate_bound, margin * self.rate_bound);
            let delta = (pick(&previous.delta, t) / self.scale).clamp(-margin * self.box_half, margin * self.box_half);
            z[l.rate(t)] = rate;
            z[l.delta(t)] = delta;
            z[l.alpha(t + 1)] = z[l.alpha(t)] + rate;
            z[l.supply(t + 1)] = z[l.supply(t)] + delta;
            z[l.collateral(t + 1)] = z[l.collateral(t)] + self.kappa[t] * delta;
        }
        self.repair_vaults(&mut z);
        if !self.in_domain(&z) || (0..=horizon).any(|t| z[l.supply(t)] < 0.05 || z[l.alpha(t)] <= 0.0) {
            return self.cold_start();
        }
        self.reset_complementarity_duals(&mut z);
        z
    }

    fn reset_complementarity_duals(&self, z: &mut [f64]) {
        let mut h = vec![0.0; self.layout.num_h()];
        self.lower_inequalities(z, &mut h);
        for i in 0..h.len() {
            z[self.layout.mu(i)] = self.eps[i] / h[i].max(0.1);
        }
    }

    /// Structured text listing of variables, constraint rows and residuals at `z`.
    pub fn dump(&self, z: &[f64]) -> String {
        let l = &self.layout;
        let horizon = self.horizon();
        let mut s = String::new();
        let _ = writeln!(s, "[horizon_nlp]");
        let _ = writeln!(s, "horizon = {horizon}");
        let _ = writeln!(s, "scale = {}", self.scale);
        let _ = writeln!(s, "num_vars = {}", l.num_vars());
        let _ = writeln!(s, "num_eq = {}", l.num_eq());
        let _ = writeln!(s, "num_ineq = {}", l.num_h());
        let _ = writeln!(s, "leader_objective = {:.12e}", self.upper_objective(z));
        let _ = writeln!(s, "follower_objective = {:.12e}", self.lower_objective(z));
        let _ = writeln!(s, "\n[variables]");
        let mut name = |idx: usize, label: String| {
            let _ = writeln!(s, "{idx:4} {label:<14} {:+.12e}", z[idx]);
        };
        for t in 0..=horizon {
            name(l.alpha(t), format!("alpha[{t}]"));
        }
        for t in 0..horizon {
            name(l.rate(t), format!("dalpha[{t}]"));
        }
        for t in 0..=horizon {
            name(l.supply(t), format!("S[{t}]"));
        }
        for t in 0..=horizon {
            name(l.collateral(t), format!("C[{t}]"));
        }
        for t in 0..horizon {
            name(l.delta(t), format!("Delta[{t}]"));
        }
        for j in 0..l.num_g() {
            name(l.lambda(j), format!("lambda[{j}]"));
        }
        for i in 0..l.num_h() {
            name(l.mu(i), format!("mu[{i}]"));
        }
        let blocks: [(&str, usize, Box<dyn Fn(&[f64], &mut [f64]) + '_>); 5] = [
            ("G", horizon + 1, Box::new(|z, o| self.upper_equalities(z, o))),
            ("g", l.num_g(), Box::new(|z, o| self.lower_equalities(z, o))),
            ("grad_y_L", l.num_lower(), Box::new(|z, o| self.stationarity(z, o))),
            ("h", l.num_h(), Box::new(|z, o| self.lower_inequalities(z, o))),
            ("mu_h_minus_eps", l.num_h(), Box::new(|z, o| self.complementarity(z, o))),
        ];
        for (label, rows, eval) in blocks {
            let mut out = vec![0.0; rows];
            eval(z, &mut out);
            let _ = writeln!(s, "\n[rows.{label}]");
            for (i, v) in out.iter().enumerate() {
                let _ = writeln!(s, "{i:4} {v:+.12e}");
            }
        }
        let _ = writeln!(s, "\n[residual]");
        let _ = writeln!(s, "kkt = {:.12e}", kkt_residual(self, z));
        s
    }
}

impl NlpProblem for HorizonNlp {
    fn num_vars(&self) -> usize {
        self.layout.num_vars()
    }

    fn num_eq(&self) -> usize {
        self.layout.num_eq()
    }

    fn num_ineq(&self) -> usize {
        self.layout.num_h()
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let l = &self.layout;
        let n = l.num_vars();
        let mut lower = vec![f64::NEG_INFINITY; n];
        let mut upper = vec![f64::INFINITY; n];
        for t in 0..self.horizon() {
            lower[l.rate(t)] = -self.rate_bound;
            upper[l.rate(t)] = self.rate_bound;
        }
        for i in 0..l.num_h() {
            lower[l.mu(i)] = 0.0;
        }
        (lower, upper)
    }

    fn objective(&self, z: &[f64]) -> f64 {
        self.upper_objective(z)
    }

    fn gradient(&self, z: &[f64], grad: &mut [f64]) {
        self.upper_gradient(z, grad);
    }

    fn eq_constraints(&self, z: &[f64], out: &mut [f64]) {
        let l = &self.layout;
        let (_, g0, s0, c0) = l.eq_offsets();
        self.upper_equalities(z, &mut out[..g0]);
        self.lower_equalities(z, &mut out[g0..s0]);
        self.stationarity(z, &mut out[s0..c0]);
        self.complementarity(z, &mut out[c0..]);
    }

    fn ineq_constraints(&self, z: &[f64], out: &mut [f64]) {
        self.lower_inequalities(z, out);
    }

    fn eq_jacobian(&self, z: &[f64], jac: &mut Vec<Triplet>) {
        let (_, g0, s0, c0) = self.layout.eq_offsets();
        self.upper_equality_jacobian(0, jac);
        self.lower_equality_jacobian(g0, jac);
        self.stationarity_jacobian(z, s0, jac);
        self.complementarity_jacobian(z, c0, jac);
    }

    fn ineq_jacobian(&self, z: &[f64], jac: &mut Vec<Triplet>) {
        self.lower_inequality_jacobian(z, 0, jac);
    }

    fn hessian(&self, z: &[f64], obj_factor: f64, y_eq: &[f64], y_ineq: &[f64], hess: &mut Vec<Triplet>) {
        let l = &self.layout;
        let horizon = self.horizon();
        let (_, _, s0, c0) = l.eq_offsets();
        let mut push = |i: usize, j: usize, v: f64| {
            if v != 0.0 {
                hess.push((i.max(j), i.min(j), v));
            }
        };

        for t in 0..=horizon {
            let (e, e1, e2) = self.peg_terms(t, z[l.supply(t)]);
            let r = if t < horizon { z[l.rate(t)] } else { 0.0 };
            push(l.supply(t), l.supply(t), obj_factor * (2.0 * e1 * e1 + (2.0 * e + r) * e2));
            if t < horizon {
                push(l.supply(t), l.rate(t), obj_factor * e1);
                push(l.rate(t), l.rate(t), obj_factor * 2.0 * self.weights[t]);
            }
        }

        // Stationarity rows: the penalty derivative R appears in both the
        // supply row and the mint/burn row of stage t.
        for t in 0..horizon {
            let rho = y_eq[s0 + t] + y_eq[s0 + 2 * (horizon + 1) + t];
            if rho == 0.0 {
                continue;
            }
            let pen = self.penalty_terms(t, z[l.alpha(t)], z[l.supply(t)] + z[l.delta(t)]);
            let (a, s, d) = (l.alpha(t), l.supply(t), l.delta(t));
            push(a, s, -rho * pen.r_au);
            push(a, d, -rho * pen.r_au);
            push(s, s, -rho * pen.r_uu);
            push(d, d, -rho * pen.r_uu);
            push(s, d, -rho * pen.r_uu);
        }
        for t in 1..=horizon {
            let rho = y_eq[s0 + t];
            push(l.alpha(t), l.mu(l.vault_row(t)), -rho * self.beta);
        }

        for t in 1..=horizon {
            let i = l.vault_row(t);
            let eta = y_eq[c0 + i];
            let m = l.mu(i);
            push(m, l.collateral(t), -eta * self.collateral_price[t]);
            push(m, l.alpha(t), eta * self.beta * z[l.supply(t)]);
            push(m, l.supply(t), eta * self.beta * z[l.alpha(t)]);
            push(l.alpha(t), l.supply(t), eta * self.beta * z[m] + y_ineq[i] * self.beta);
        }
        for t in 0..horizon {
            let lo = l.lower_box_row(t);
            let hi = l.upper_box_row(t);
            push(l.mu(lo), l.delta(t), -y_eq[c0 + lo]);
            push(l.mu(hi), l.delta(t), y_eq[c0 + hi]);
        }
    }

    fn in_domain(&self, z: &[f64]) -> bool {
        let l = &self.layout;
        (0..=self.horizon()).all(|t| z[l.supply(t)] > 0.0)
            && (0..self.horizon()).all(|t| z[l.supply(t)] + z[l.delta(t)] > 0.0)
    }
}

/// Max-norm KKT residual of the relaxed problem at the stacked point `z`,
/// using the NLP's current `ε`.
pub fn kkt_residual(nlp: &HorizonNlp, z: &[f64]) -> f64 {
    let l = nlp.layout();
    let mut worst: f64 = 0.0;
    let mut upd = |v: &[f64]| {
        for x in v {
            worst = worst.max(x.abs());
        }
    };
    let mut buf = vec![0.0; l.horizon + 1];
    nlp.upper_equalities(z, &mut buf);
    upd(&buf);
    let mut buf = vec![0.0; l.num_g()];
    nlp.lower_equalities(z, &mut buf);
    upd(&buf);
    let mut buf = vec![0.0; l.num_lower()];
    nlp.stationarity(z, &mut buf);
    upd(&buf);
    let mut h = vec![0.0; l.num_h()];
    nlp.lower_inequalities(z, &mut h);
    for (i, hi) in h.iter().enumerate() {
        let mu = z[l.mu(i)];
        worst = worst.max((-hi).max(0.0)).max((-mu).max(0.0));
        let gap = mu * hi - nlp.eps[i];
        worst = worst.max(if mu == 0.0 { gap.max(0.0) } else { gap.abs() });
    }
    worst
}

/// Per-outer-iteration record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OuterIterate {
    pub eps: f64,
    pub inner_iterations: usize,
    /// Whether the inner solve met its tolerance within budget.
    pub inner_converged: bool,
    /// `max_i |μ_i·h_i − ε_i|` at the inner solution.
    pub complementarity_error: f64,
    /// `max_i μ_i·h_i`.
    pub complementarity_gap: f64,
    pub min_h: f64,
    pub min_mu: f64,
    /// `‖z − z_prev‖₂` over the primal block; absent on the first pass.
    pub step: Option<f64>,
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSolution {
    pub alpha: Vec<f64>,
    pub delta_alpha: Vec<f64>,
    /// Supply, collateral and mint/burn trajectories in token/asset units.
    pub supply: Vec<f64>,
    pub collateral: Vec<f64>,
    pub delta: Vec<f64>,
    /// Multipliers of the scaled lower-level constraints.
    pub lambda: Vec<f64>,
    pub mu: Vec<f64>,
    pub eps: Vec<f64>,
    pub kkt_residual: f64,
    pub leader_objective: f64,
    pub follower_objective: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    /// Whether successive solutions moved less than `μ_tol`.
    pub converged: bool,
    pub history: Vec<OuterIterate>,
    pub scale: f64,
}

impl HorizonSolution {
    fn from_point(nlp: &HorizonNlp, z: &[f64]) -> Self {
        let l = nlp.layout();
        let horizon = l.horizon;
        let sc = nlp.scale();
        let (_, _, lam, mu) = nlp.split(z);
        Self {
            alpha: (0..=horizon).map(|t| z[l.alpha(t)]).collect(),
            delta_alpha: (0..horizon).map(|t| z[l.rate(t)]).collect(),
            supply: (0..=horizon).map(|t| sc * z[l.supply(t)]).collect(),
            collateral: (0..=horizon).map(|t| sc * z[l.collateral(t)]).collect(),
            delta: (0..horizon).map(|t| sc * z[l.delta(t)]).collect(),
            lambda: lam.to_vec(),
            mu: mu.to_vec(),
            eps: nlp.eps().to_vec(),
            kkt_residual: kkt_residual(nlp, z),
            leader_objective: nlp.upper_objective(z),
            follower_objective: nlp.lower_objective(z),
            outer_iterations: 0,
            inner_iterations: 0,
            converged: false,
            history: Vec::new(),
            scale: sc,
        }
    }

    /// Rebuilds the stacked scaled vector `z`.
    pub fn stacked(&self) -> Vec<f64> {
        let sc = self.scale;
        let mut z = Vec::new();
        z.extend(&self.alpha);
        z.extend(&self.delta_alpha);
        z.extend(self.supply.iter().map(|v| v / sc));
        z.extend(self.collateral.iter().map(|v| v / sc));
        z.extend(self.delta.iter().map(|v| v / sc));
        z.extend(&self.lambda);
        z.extend(&self.mu);
        z
    }

    /// Final relaxation level.
    pub fn final_eps(&self) -> f64 {
        self.eps.first().copied().unwrap_or(0.0)
    }
}

/// Solves the relaxed sequence. `warm` is the previous step's solution, used
/// to seed the first outer iteration.
pub fn solve_mpcc(
    problem: &HorizonProblem,
    settings: &MpccSettings,
    warm: Option<&HorizonSolution>,
) -> Result<HorizonSolution> {
    let mut nlp = assemble(problem, settings, settings.eps_init)?;
    let layout = nlp.layout();
    let primal = layout.num_upper() + layout.num_lower();
    let mut z = match warm {
        Some(prev) => nlp.rolled_start(prev),
        None => nlp.cold_start(),
    };
    check_len("MPCC starting point", layout.num_vars(), z.len())?;

    let mut eps = settings.eps_init;
    let mut start = IpmStart::primal(z.clone());
    let mut history = Vec::new();
    let mut prev_primal: Option<Vec<f64>> = None;
    let mut inner_total = 0;
    let mut converged = false;
    for outer in 0..settings.max_outer {
        nlp.set_eps(eps);
        let options = settings.ipm_options(outer > 0);
        let sol = nlp::solve(&nlp, &start, &options)?;
        inner_total += sol.iterations;
        if !sol.x.iter().all(|v| v.is_finite()) {
            return Err(Error::Solver(format!("inner solve diverged at outer iteration {outer} (eps {eps:e})")));
        }
        z = sol.x.clone();

        let mut h = vec![0.0; layout.num_h()];
        nlp.lower_inequalities(&z, &mut h);
        let mut comp_err: f64 = 0.0;
        let mut comp_gap = f64::NEG_INFINITY;
        for (i, hi) in h.iter().enumerate() {
            let prod = z[layout.mu(i)] * hi;
            comp_err = comp_err.max((prod - eps).abs());
            comp_gap = comp_gap.max(prod);
        }
        let step = prev_primal.as_ref().map(|p| {
            p.iter()
                .zip(&z[..primal])
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        });
        history.push(OuterIterate {
            eps,
            inner_iterations: sol.iterations,
            inner_converged: sol.converged(),
            complementarity_error: comp_err,
            complementarity_gap: comp_gap,
            min_h: h.iter().copied().fold(f64::INFINITY, f64::min),
            min_mu: (0..layout.num_h()).map(|i| z[layout.mu(i)]).fold(f64::INFINITY, f64::min),
            step,
            kkt_residual: kkt_residual(&nlp, &z),
        });
        if sol.converged() && step.is_some_and(|s| s < settings.mu_tol) {
            converged = true;
            break;
        }
        prev_primal = Some(z[..primal].to_vec());
        if outer + 1 < settings.max_outer {
            eps *= 0.5;
            start = IpmStart {
                x: z.clone(),
                y_eq: Some(sol.y_eq),
                y_ineq: Some(sol.y_ineq),
                z_lower: Some(sol.z_lower),
                z_upper: Some(sol.z_upper),
            };
        }
    }

    let mut solution = HorizonSolution::from_point(&nlp, &z);
    solution.outer_iterations = history.len();
    solution.inner_iterations = inner_total;
    solution.converged = converged;
    solution.history = history;
    Ok(solution)
}
