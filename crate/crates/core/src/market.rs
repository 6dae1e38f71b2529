//! Exogenous scenario paths and the endogenous agents that trade against them.
//!
//! Demand and collateral price follow geometric Brownian motions,
//! `X_{t+1} = X_t·exp((μ − σ²/2) + σ·Z_t)`, with optional additive demand
//! shocks and a deterministic collateral crash segment. Two agents act on the
//! supply every step: an arbitrageur trading the market/redemption price gap,
//! and a CDP speculator reacting to redemption-rate changes and expected
//! collateral returns. Both use a geometrically discounted history.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{MarketObservation, SystemState};

/// Discount weights below this are dropped from agent histories.
pub const HISTORY_CUTOFF: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    Default,
    Drift,
    Stress,
    SustainedShock,
    VaultCrisis,
}

impl ScenarioKind {
    /// The four Monte Carlo scenarios, in table order.
    pub const STUDY: [ScenarioKind; 4] = [
        ScenarioKind::Default,
        ScenarioKind::Drift,
        ScenarioKind::Stress,
        ScenarioKind::SustainedShock,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            ScenarioKind::Default => "default",
            ScenarioKind::Drift => "drift",
            ScenarioKind::Stress => "stress",
            ScenarioKind::SustainedShock => "sustained",
            ScenarioKind::VaultCrisis => "crisis",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(ScenarioKind::Default),
            "drift" => Ok(ScenarioKind::Drift),
            "stress" => Ok(ScenarioKind::Stress),
            "sustained" | "sustained_shock" => Ok(ScenarioKind::SustainedShock),
            "crisis" | "vault_crisis" => Ok(ScenarioKind::VaultCrisis),
            other => Err(Error::config(format!("unknown scenario `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbmParams {
    /// Per-step drift `μ`.
    pub drift: f64,
    /// Per-step volatility `σ`.
    pub volatility: f64,
}

/// Additive demand shock of `magnitude · D₀`, held for `duration` steps and
/// then decaying at rate `decay`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Shock {
    pub step: usize,
    pub magnitude: f64,
    pub decay: f64,
    #[serde(default = "one")]
    pub duration: usize,
}

fn one() -> usize {
    1
}

impl Shock {
    pub fn point(step: usize, magnitude: f64, decay: f64) -> Self {
        Self {
            step,
            magnitude,
            decay,
            duration: 1,
        }
    }

    /// Last step of the plateau.
    pub fn end(&self) -> usize {
        self.step + self.duration.max(1) - 1
    }

    /// Shape factor in `[0, 1]` at step `t`.
    pub fn profile(&self, t: usize) -> f64 {
        if t < self.step {
            return 0.0;
        }
        let past_plateau = (t - self.step) as f64 - (self.duration.max(1) - 1) as f64;
        (-self.decay * past_plateau.max(0.0)).exp()
    }
}

/// Deterministic collateral crash: the price falls by `rate` per step for
/// `length` steps starting at `start`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrashSegment {
    pub start: usize,
    pub length: usize,
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub kind: ScenarioKind,
    pub steps: usize,
    pub demand: GbmParams,
    pub eth: GbmParams,
    #[serde(default)]
    pub shocks: Vec<Shock>,
    #[serde(default)]
    pub crash: Option<CrashSegment>,
    /// Flip the demand drift sign on odd seeds (rising or falling trend).
    #[serde(default)]
    pub random_drift_sign: bool,
    pub initial_demand: f64,
    pub initial_eth_price: f64,
}

impl ScenarioConfig {
    pub fn preset(kind: ScenarioKind) -> Self {
        let base = Self {
            kind,
            steps: 100,
            demand: GbmParams {
                drift: 0.0,
                volatility: 0.01,
            },
            eth: GbmParams {
                drift: 0.0,
                volatility: 0.02,
            },
            shocks: Vec::new(),
            crash: None,
            random_drift_sign: false,
            initial_demand: 100.0,
            initial_eth_price: 10.0,
        };
        match kind {
            ScenarioKind::Default => base,
            ScenarioKind::Drift => Self {
                demand: GbmParams {
                    drift: 0.003,
                    volatility: 0.01,
                },
                random_drift_sign: true,
                ..base
            },
            ScenarioKind::Stress => Self {
                demand: GbmParams {
                    drift: 0.0,
                    volatility: 0.03,
                },
                shocks: vec![
                    Shock::point(20, 0.25, 0.1),
                    Shock::point(55, 0.20, 0.1),
                    Shock::point(75, -0.25, 0.1),
                ],
                ..base
            },
            ScenarioKind::SustainedShock => Self {
                shocks: vec![Shock {
                    step: 30,
                    magnitude: 0.4,
                    decay: 0.03,
                    duration: 10,
                }],
                ..base
            },
            ScenarioKind::VaultCrisis => Self {
                crash: Some(CrashSegment {
                    start: 20,
                    length: 20,
                    rate: 0.02,
                }),
                ..base
            },
        }
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    /// Conditional mean of `p_c[t+1] / p_c[t]`: `e^μ` off the crash window,
    /// `1 − rate` inside it.
    pub fn expected_eth_return(&self, t: usize) -> f64 {
        match self.crash {
            Some(c) if t >= c.start && t < c.start + c.length => 1.0 - c.rate,
            _ => self.eth.drift.exp(),
        }
    }

    /// Step of the last configured shock's plateau end, if any.
    pub fn last_shock_end(&self) -> Option<usize> {
        let shocks = self.shocks.iter().map(Shock::end);
        let crash = self.crash.iter().map(|c| c.start + c.length.max(1) - 1);
        shocks.chain(crash).max()
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(Error::config("scenario needs at least one step"));
        }
        for (name, p) in [("demand", self.demand), ("eth", self.eth)] {
            if !(p.volatility >= 0.0 && p.volatility.is_finite() && p.drift.is_finite()) {
                return Err(Error::config(format!("{name} GBM parameters invalid: {p:?}")));
            }
        }
        if !(self.initial_demand > 0.0 && self.initial_eth_price > 0.0) {
            return Err(Error::config("initial demand and collateral price must be positive"));
        }
        for shock in &self.shocks {
            if shock.step > self.steps {
                return Err(Error::config(format!("shock at step {} outside episode", shock.step)));
            }
            if !(shock.decay >= 0.0 && shock.magnitude.is_finite()) {
                return Err(Error::config(format!("invalid shock {shock:?}")));
            }
        }
        if let Some(crash) = &self.crash {
            if crash.start > self.steps || !(crash.rate >= 0.0 && crash.rate < 1.0) {
                return Err(Error::config(format!("invalid crash segment {crash:?}")));
            }
        }
        Ok(())
    }
}

/// One realized exogenous path, `steps + 1` entries per series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPath {
    pub demand: Vec<f64>,
    pub eth_price: Vec<f64>,
    pub seed: u64,
}

impl SimPath {
    pub fn len(&self) -> usize {
        self.demand.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demand.is_empty()
    }
}

const DEMAND_STREAM: u64 = 1;
const ETH_STREAM: u64 = 2;

fn gbm_series(initial: f64, params: GbmParams, steps: usize, seed: u64, stream: u64, crash: Option<&CrashSegment>) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let drift = params.drift - 0.5 * params.volatility * params.volatility;
    let mut series = Vec::with_capacity(steps + 1);
    let mut x = initial;
    series.push(x);
    for t in 0..steps {
        // Draw unconditionally so the noise at step t never depends on the crash window.
        let z: f64 = rng.sample(StandardNormal);
        let in_crash = crash.is_some_and(|c| t >= c.start && t < c.start + c.length);
        x *= match crash {
            Some(c) if in_crash => 1.0 - c.rate,
            _ => (drift + params.volatility * z).exp(),
        };
        series.push(x);
    }
    series
}

/// Deterministic per `(config, seed)`.
pub fn generate_path(config: &ScenarioConfig, seed: u64) -> Result<SimPath> {
    config.validate()?;
    let mut demand_params = config.demand;
    if config.random_drift_sign && seed % 2 == 1 {
        demand_params.drift = -demand_params.drift;
    }
    let base = gbm_series(config.initial_demand, demand_params, config.steps, seed, DEMAND_STREAM, None);
    let floor = 1e-3 * config.initial_demand;
    let demand = base
        .iter()
        .enumerate()
        .map(|(t, b)| {
            let shock: f64 = config
                .shocks
                .iter()
                .map(|s| s.magnitude * config.initial_demand * s.profile(t))
                .sum();
            (b + shock).max(floor)
        })
        .collect();
    let eth_price = gbm_series(
        config.initial_eth_price,
        config.eth,
        config.steps,
        seed,
        ETH_STREAM,
        config.crash.as_ref(),
    );
    Ok(SimPath { demand, eth_price, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpeculatorRule {
    /// React to redemption-rate changes and expected collateral returns.
    RateAndReturns,
    /// Same price-gap response as the arbitrageur (sensitivity mode).
    PriceGap,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReturnExpectation {
    /// The collateral process's conditional one-step mean return.
    Regime,
    /// The last realized one-step return.
    Realized,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrisisParams {
    /// Collateralization below which speculator burns are amplified.
    pub threshold: f64,
    pub multiplier: f64,
}

impl Default for CrisisParams {
    fn default() -> Self {
        Self {
            threshold: 1.8,
            multiplier: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentParams {
    /// Arbitrage gain `K_A`.
    pub arb_gain: f64,
    /// Speculator gain `K_S`.
    pub spec_gain: f64,
    /// History discount `γ_m`.
    pub memory: f64,
    pub speculator_rule: SpeculatorRule,
    pub return_expectation: ReturnExpectation,
    pub crisis: Option<CrisisParams>,
}

impl Default for AgentParams {
    fn default() -> Self {
        Self {
            arb_gain: 0.0,
            spec_gain: 100.0,
            memory: 0.9,
            speculator_rule: SpeculatorRule::RateAndReturns,
            return_expectation: ReturnExpectation::Regime,
            crisis: None,
        }
    }
}

impl AgentParams {
    pub fn with_arbitrage(mut self, arb_gain: f64) -> Self {
        self.arb_gain = arb_gain;
        self
    }

    /// Agent defaults for a scenario: the vault crisis turns on burn amplification
    /// and arbitrage.
    pub fn for_scenario(kind: ScenarioKind) -> Self {
        match kind {
            ScenarioKind::VaultCrisis => Self {
                arb_gain: 50.0,
                crisis: Some(CrisisParams::default()),
                ..Self::default()
            },
            _ => Self::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.arb_gain >= 0.0 && self.spec_gain >= 0.0) {
            return Err(Error::config("agent gains must be non-negative"));
        }
        if !(self.memory > 0.0 && self.memory < 1.0) {
            return Err(Error::config(format!("memory discount must lie in (0, 1), got {}", self.memory)));
        }
        if let Some(c) = &self.crisis {
            if !(c.multiplier >= 1.0) {
                return Err(Error::config("crisis multiplier must be >= 1"));
            }
        }
        Ok(())
    }
}

/// `Σ_τ γ^{t−τ}·x_τ` over a history ordered oldest to newest, dropping terms
/// whose weight falls below [`HISTORY_CUTOFF`].
pub fn discounted_sum(history: &[f64], memory: f64) -> f64 {
    let mut weight = 1.0;
    let mut total = 0.0;
    for x in history.iter().rev() {
        if weight < HISTORY_CUTOFF {
            break;
        }
        total += weight * x;
        weight *= memory;
    }
    total
}

/// `Δ^A = K_A·Σ γ^{t−τ}(p_τ − α_τ)`; `gaps` holds `p − α`, oldest first.
pub fn arbitrageur_action(gaps: &[f64], arb_gain: f64, memory: f64) -> f64 {
    arb_gain * discounted_sum(gaps, memory)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpeculatorSignal {
    pub delta_alpha: f64,
    pub expected_return: f64,
}

/// `Δ^S = K_S·Σ γ^{t−τ}[−δα_τ + (r̂_τ − 1)]`: mint when redemption cheapens or
/// collateral is expected to appreciate.
pub fn speculator_action(signals: &[SpeculatorSignal], spec_gain: f64, memory: f64) -> f64 {
    let mut weight = 1.0;
    let mut total = 0.0;
    for s in signals.iter().rev() {
        if weight < HISTORY_CUTOFF {
            break;
        }
        total += weight * (-s.delta_alpha + (s.expected_return - 1.0));
        weight *= memory;
    }
    spec_gain * total
}

/// Multiplies speculator burns by `multiplier` while collateralization sits
/// below `threshold`. Mints pass through.
pub fn crisis_amplify(delta_spec: f64, gamma: f64, threshold: f64, multiplier: f64) -> f64 {
    if gamma < threshold && delta_spec < 0.0 {
        multiplier * delta_spec
    } else {
        delta_spec
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarketStep {
    pub observation: MarketObservation,
    pub delta_arb: f64,
    pub delta_spec: f64,
    /// Net supply change after clamping.
    pub delta_total: f64,
    /// Collateralization seen by the agents before trading.
    pub gamma_before: f64,
    pub clamped: bool,
}

/// Agent memories for one episode.
#[derive(Debug, Clone)]
pub struct AgentMarket {
    params: AgentParams,
    supply_floor: f64,
    gaps: Vec<f64>,
    signals: Vec<SpeculatorSignal>,
}

impl AgentMarket {
    pub fn new(params: AgentParams, initial_supply: f64) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            params,
            supply_floor: 1e-6 * initial_supply,
            gaps: Vec::new(),
            signals: Vec::new(),
        })
    }

    pub fn params(&self) -> &AgentParams {
        &self.params
    }

    pub fn supply_floor(&self) -> f64 {
        self.supply_floor
    }

    /// Lets both agents trade at step `t` under the redemption price
    /// `α + δα` just announced, then clears the market at `D / S'`.
    pub fn step(
        &mut self,
        state: &SystemState,
        demand: f64,
        eth_price: f64,
        expected_return: f64,
        delta_alpha: f64,
    ) -> Result<MarketStep> {
        if state.supply <= 0.0 {
            return Err(Error::domain("market step needs positive supply"));
        }
        let alpha = state.redemption_price + delta_alpha;
        if alpha <= 0.0 {
            return Err(Error::domain(format!("redemption price {alpha} not positive")));
        }
        let price_before = demand / state.supply;
        self.gaps.push(price_before - alpha);
        self.signals.push(SpeculatorSignal {
            delta_alpha,
            expected_return,
        });
        let memory = self.params.memory;
        let delta_arb = arbitrageur_action(&self.gaps, self.params.arb_gain, memory);
        let raw_spec = match self.params.speculator_rule {
            SpeculatorRule::RateAndReturns => speculator_action(&self.signals, self.params.spec_gain, memory),
            SpeculatorRule::PriceGap => arbitrageur_action(&self.gaps, self.params.spec_gain, memory),
        };
        let gamma_before = state.collateral * eth_price / (alpha * state.supply);
        let delta_spec = match self.params.crisis {
            Some(c) => crisis_amplify(raw_spec, gamma_before, c.threshold, c.multiplier),
            None => raw_spec,
        };
        let wanted = delta_arb + delta_spec;
        let (delta_total, clamped) = self.clamp(state, demand, eth_price, wanted);
        let price = demand / (state.supply + delta_total);
        Ok(MarketStep {
            observation: MarketObservation {
                stablecoin_price: price,
                collateral_price: eth_price,
                demand,
                realized_delta: delta_total,
            },
            delta_arb,
            delta_spec,
            delta_total,
            gamma_before,
            clamped,
        })
    }

    /// Keeps supply above the floor and collateral non-negative once burns
    /// settle at the post-trade price.
    fn clamp(&self, state: &SystemState, demand: f64, eth_price: f64, wanted: f64) -> (f64, bool) {
        let supply_limit = self.supply_floor - state.supply;
        // C + (D/(S+Δ))/p_c·Δ ≥ 0  ⇔  Δ ≥ −C·p_c·S / (C·p_c + D)
        let value = state.collateral * eth_price;
        // Shrunk by a few ulps so rounding cannot leave dust-negative collateral.
        let collateral_limit = -value * state.supply / (value + demand) * (1.0 - 1e-12);
        let limit = supply_limit.max(collateral_limit);
        if wanted < limit {
            (limit, true)
        } else {
            (wanted, false)
        }
    }
}
