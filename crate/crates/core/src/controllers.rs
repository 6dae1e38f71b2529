//! Redemption-rate controllers: fixed (DAI-style), proportional (RAI-style)
//! and the receding-horizon Stackelberg controller.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecasting::{Forecaster, ForecasterConfig};
use crate::mpcc::{solve_mpcc, HorizonProblem, HorizonSolution, MpccSettings};
use crate::state::{MarketObservation, ProtocolParams, SpeculatorParams, SystemState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    /// `δα = 0`.
    Fixed,
    /// `δα = K_p·(α − p_stb)`.
    Proportional,
    /// Receding-horizon leader/follower solve.
    Stackelberg,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [ControllerKind::Fixed, ControllerKind::Proportional, ControllerKind::Stackelberg];

    /// Short name used in CLIs and tables.
    pub fn label(&self) -> &'static str {
        match self {
            ControllerKind::Fixed => "dai",
            ControllerKind::Proportional => "rai",
            ControllerKind::Stackelberg => "utai",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "dai" | "fixed" => Ok(ControllerKind::Fixed),
            "rai" | "proportional" => Ok(ControllerKind::Proportional),
            "utai" | "stackelberg" => Ok(ControllerKind::Stackelberg),
            other => Err(Error::config(format!("unknown controller `{other}` (expected dai, rai or utai)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub kind: ControllerKind,
    /// Proportional gain `K_p`.
    pub kp: f64,
    /// Gain of the proportional fallback used when a horizon solve fails.
    pub fallback_kp: f64,
    /// Clip applied to every Stackelberg decision.
    pub rate_bound: f64,
    pub protocol: ProtocolParams,
    pub speculator: SpeculatorParams,
    pub forecaster: ForecasterConfig,
    pub mpcc: MpccSettings,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            kind: ControllerKind::Stackelberg,
            kp: 0.05,
            fallback_kp: 0.05,
            rate_bound: 0.1,
            protocol: ProtocolParams::default(),
            speculator: SpeculatorParams::default(),
            forecaster: ForecasterConfig::default(),
            mpcc: MpccSettings::default(),
        }
    }
}

impl ControllerConfig {
    pub fn new(kind: ControllerKind) -> Self {
        Self {
            kind,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kp > 0.0 && self.fallback_kp > 0.0) {
            return Err(Error::config("proportional gains must be positive"));
        }
        if !(self.rate_bound > 0.0) {
            return Err(Error::config("rate bound must be positive"));
        }
        self.protocol.validate()?;
        self.speculator.validate()?;
        self.forecaster.validate()?;
        self.mpcc.validate()
    }
}

/// Horizon-solve diagnostics attached to a Stackelberg decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub final_eps: f64,
    pub kkt_residual: f64,
    /// Outer loop met `μ_tol` with a converged final inner solve.
    pub converged: bool,
    pub wall_seconds: f64,
    /// The proportional fallback replaced the solver's decision.
    pub fallback: bool,
    pub failure: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerDecision {
    pub delta_alpha: f64,
    /// Absent for the baselines.
    pub diagnostics: Option<SolverDiagnostics>,
}

pub fn fixed_decide() -> ControllerDecision {
    ControllerDecision {
        delta_alpha: 0.0,
        diagnostics: None,
    }
}

pub fn proportional_decide(state: &SystemState, observation: &MarketObservation, kp: f64) -> Result<ControllerDecision> {
    if !(kp > 0.0) {
        return Err(Error::config(format!("K_p must be positive, got {kp}")));
    }
    Ok(ControllerDecision {
        delta_alpha: kp * (state.redemption_price - observation.stablecoin_price),
        diagnostics: None,
    })
}

/// One horizon solve and the decision taken from its first stage. Solver
/// failures and a non-converged final inner solve fall back to the
/// proportional rule with `config.fallback_kp`.
pub fn stackelberg_decide(
    state: &SystemState,
    observation: &MarketObservation,
    forecaster: &Forecaster,
    config: &ControllerConfig,
    warm: Option<&HorizonSolution>,
) -> Result<(ControllerDecision, Option<HorizonSolution>)> {
    let forecasts = forecaster.forecast(config.protocol.horizon)?;
    let problem = HorizonProblem {
        state: *state,
        forecasts,
        protocol: config.protocol,
        speculator: config.speculator,
    };
    let started = Instant::now();
    let outcome = solve_mpcc(&problem, &config.mpcc, warm);
    let wall_seconds = started.elapsed().as_secs_f64();
    let fallback = |failure: String, partial: Option<&HorizonSolution>| -> Result<ControllerDecision> {
        let p = proportional_decide(state, observation, config.fallback_kp)?;
        Ok(ControllerDecision {
            delta_alpha: p.delta_alpha.clamp(-config.rate_bound, config.rate_bound),
            diagnostics: Some(SolverDiagnostics {
                outer_iterations: partial.map_or(0, |s| s.outer_iterations),
                inner_iterations: partial.map_or(0, |s| s.inner_iterations),
                final_eps: partial.map_or(f64::NAN, |s| s.final_eps()),
                kkt_residual: partial.map_or(f64::NAN, |s| s.kkt_residual),
                converged: false,
                wall_seconds,
                fallback: true,
                failure: Some(failure),
            }),
        })
    };
    match outcome {
        Ok(solution) => {
            let last_inner_ok = solution.history.last().is_some_and(|h| h.inner_converged);
            if !last_inner_ok {
                let decision = fallback("final inner solve did not converge".into(), Some(&solution))?;
                return Ok((decision, None));
            }
            let decision = ControllerDecision {
                delta_alpha: solution.delta_alpha[0].clamp(-config.rate_bound, config.rate_bound),
                diagnostics: Some(SolverDiagnostics {
                    outer_iterations: solution.outer_iterations,
                    inner_iterations: solution.inner_iterations,
                    final_eps: solution.final_eps(),
                    kkt_residual: solution.kkt_residual,
                    converged: solution.converged,
                    wall_seconds,
                    fallback: false,
                    failure: None,
                }),
            };
            Ok((decision, Some(solution)))
        }
        Err(e @ (Error::Solver(_) | Error::Numerical(_) | Error::Domain(_))) => Ok((fallback(e.to_string(), None)?, None)),
        Err(e) => Err(e),
    }
}

/// A controller with its per-episode memory (forecaster and warm start).
#[derive(Debug, Clone)]
pub struct Controller {
    config: ControllerConfig,
    forecaster: Option<Forecaster>,
    warm: Option<HorizonSolution>,
}

impl Controller {
    /// `forecaster` is required for the Stackelberg controller and ignored otherwise.
    pub fn new(config: ControllerConfig, forecaster: Option<Forecaster>) -> Result<Self> {
        config.validate()?;
        if config.kind == ControllerKind::Stackelberg && forecaster.is_none() {
            return Err(Error::config("the Stackelberg controller needs a forecaster"));
        }
        Ok(Self {
            config,
            forecaster,
            warm: None,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn kind(&self) -> ControllerKind {
        self.config.kind
    }

    /// Feeds an observation to the forecaster, if any.
    pub fn observe(&mut self, observation: &MarketObservation) -> Result<()> {
        match &mut self.forecaster {
            Some(f) => f.update(observation),
            None => observation.validate(),
        }
    }

    pub fn decide(&mut self, state: &SystemState, observation: &MarketObservation) -> Result<ControllerDecision> {
        match self.config.kind {
            ControllerKind::Fixed => Ok(fixed_decide()),
            ControllerKind::Proportional => proportional_decide(state, observation, self.config.kp),
            ControllerKind::Stackelberg => {
                let forecaster = self
                    .forecaster
                    .as_ref()
                    .ok_or_else(|| Error::config("the Stackelberg controller needs a forecaster"))?;
                let (decision, solution) =
                    stackelberg_decide(state, observation, forecaster, &self.config, self.warm.as_ref())?;
                // A failed solve drops the warm start so the next one starts cold.
                self.warm = solution;
                Ok(decision)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecasting::ForecasterKind;

    fn obs(price: f64) -> MarketObservation {
        MarketObservation {
            stablecoin_price: price,
            collateral_price: 10.0,
            demand: 100.0 * price,
            realized_delta: 0.0,
        }
    }

    fn state(alpha: f64) -> SystemState {
        SystemState::new(100.0, 25.0, alpha).unwrap()
    }

    #[test]
    fn fixed_never_moves() {
        let mut c = Controller::new(ControllerConfig::new(ControllerKind::Fixed), None).unwrap();
        let mut s = state(1.0);
        for k in 0..100 {
            let d = c.decide(&s, &obs(1.0 + 0.001 * k as f64)).unwrap();
            assert_eq!(d.delta_alpha, 0.0);
            assert!(d.diagnostics.is_none());
            s.redemption_price += d.delta_alpha;
        }
        assert_eq!(s.redemption_price, 1.0);
    }

    #[test]
    fn proportional_examples() {
        let d = proportional_decide(&state(1.0), &obs(1.05), 0.1).unwrap();
        assert!((d.delta_alpha + 0.005).abs() < 1e-15);
        assert_eq!(proportional_decide(&state(1.0), &obs(1.0), 0.1).unwrap().delta_alpha, 0.0);
        let d = proportional_decide(&state(1.0), &obs(0.9), 0.1).unwrap();
        assert!((d.delta_alpha - 0.01).abs() < 1e-15);
        assert!(proportional_decide(&state(1.0), &obs(1.0), 0.0).is_err());
    }

    fn flat_forecaster(demand: f64, pc: f64) -> Forecaster {
        let mut f = Forecaster::new(ForecasterConfig {
            kind: ForecasterKind::Persistence,
            ..ForecasterConfig::default()
        })
        .unwrap();
        f.update(&MarketObservation {
            stablecoin_price: demand / 100.0,
            collateral_price: pc,
            demand,
            realized_delta: 0.0,
        })
        .unwrap();
        f
    }

    #[test]
    fn zero_budget_forces_the_fallback() {
        let mut config = ControllerConfig::default();
        config.mpcc.max_inner = 0;
        let observation = obs(1.04);
        let (d, sol) = stackelberg_decide(&state(1.0), &observation, &flat_forecaster(104.0, 10.0), &config, None).unwrap();
        assert!(sol.is_none());
        let diag = d.diagnostics.unwrap();
        assert!(diag.fallback);
        assert!(diag.failure.is_some());
        assert!((d.delta_alpha - 0.05 * (1.0 - 1.04)).abs() < 1e-15);
    }

    #[test]
    fn equilibrium_decision_is_quiet() {
        let config = ControllerConfig::default();
        let (d, _) = stackelberg_decide(&state(1.0), &obs(1.0), &flat_forecaster(100.0, 10.0), &config, None).unwrap();
        assert!(d.delta_alpha.abs() <= 1e-3);
        assert!(!d.diagnostics.unwrap().fallback);
    }

    #[test]
    fn decisions_respect_the_clip() {
        let config = ControllerConfig {
            rate_bound: 1e-4,
            ..ControllerConfig::default()
        };
        let (d, _) = stackelberg_decide(&state(1.0), &obs(1.2), &flat_forecaster(120.0, 10.0), &config, None).unwrap();
        assert!(d.delta_alpha.abs() <= 1e-4);
    }

    #[test]
    fn stackelberg_needs_a_forecaster() {
        assert!(Controller::new(ControllerConfig::default(), None).is_err());
    }

    #[test]
    fn labels_round_trip() {
        for kind in ControllerKind::ALL {
            assert_eq!(ControllerKind::parse(kind.label()).unwrap(), kind);
        }
        assert!(ControllerKind::parse("pid").is_err());
    }
}
