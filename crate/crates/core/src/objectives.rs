//! Stage and horizon objectives of the two players.
//!
//! Protocol (leader) stage cost, with peg error `e = D̂/S − p_peg`:
//!
//! ```text
//! e² + ω_p·δα² + δα·e
//! ```
//!
//! Speculator (follower) stage utility, with predicted post-trade price
//! `p(Δ) = D̂/(S + Δ)`:
//!
//! ```text
//! γ^t·(r̂·p̂_stb − α)·Δ − w_S·(α − p(Δ))²
//! ```
//!
//! The alignment penalty is subtracted: the follower is hurt by trading the
//! market price away from the redemption price.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::state::{ProtocolParams, SpeculatorParams, SystemState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageEvaluation {
    pub peg_error: f64,
    pub stage_cost: f64,
    pub stage_utility: f64,
    pub wealth: f64,
}

/// Forecast arrays over one horizon. Price and demand series carry `T + 1`
/// entries (stage 0 is the latest observation), returns carry `T`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastBundle {
    pub demand: Vec<f64>,
    pub collateral_price: Vec<f64>,
    pub stablecoin_price: Vec<f64>,
    pub returns: Vec<f64>,
}

impl ForecastBundle {
    /// Builds a bundle and derives `r̂_t = p̂_c[t+1] / p̂_c[t]`.
    pub fn new(demand: Vec<f64>, collateral_price: Vec<f64>, stablecoin_price: Vec<f64>) -> Result<Self> {
        if demand.len() < 2 {
            return Err(Error::DimensionMismatch {
                what: "forecast length (horizon + 1)",
                expected: 2,
                got: demand.len(),
            });
        }
        check_len("collateral price forecast", demand.len(), collateral_price.len())?;
        check_len("stablecoin price forecast", demand.len(), stablecoin_price.len())?;
        let returns = collateral_price.windows(2).map(|w| w[1] / w[0]).collect();
        let bundle = Self {
            demand,
            collateral_price,
            stablecoin_price,
            returns,
        };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn horizon(&self) -> usize {
        self.returns.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.demand.len();
        check_len("collateral price forecast", n, self.collateral_price.len())?;
        check_len("stablecoin price forecast", n, self.stablecoin_price.len())?;
        check_len("return forecast", n.saturating_sub(1), self.returns.len())?;
        for (series, values) in [
            ("demand", &self.demand),
            ("collateral_price", &self.collateral_price),
            ("stablecoin_price", &self.stablecoin_price),
            ("returns", &self.returns),
        ] {
            if let Some((index, &value)) = values.iter().enumerate().find(|(_, v)| !(**v > 0.0 && v.is_finite())) {
                return Err(Error::NonPositiveForecast { series, index, value });
            }
        }
        Ok(())
    }
}

/// Rate-smoothing weight: 1 outside the tolerance band, `1/|e|` inside it,
/// capped so the weight stays finite at `e = 0`.
pub fn adaptive_weight(peg_error: f64, tolerance: f64, cap: f64) -> f64 {
    let magnitude = peg_error.abs();
    if magnitude > tolerance {
        1.0
    } else if magnitude * cap <= 1.0 {
        cap
    } else {
        1.0 / magnitude
    }
}

pub fn protocol_stage_cost(peg_error: f64, delta_alpha: f64, weight: f64) -> f64 {
    peg_error * peg_error + weight * delta_alpha * delta_alpha + delta_alpha * peg_error
}

pub fn peg_error(demand: f64, supply: f64, peg: f64) -> Result<f64> {
    if supply <= 0.0 {
        return Err(Error::domain(format!("peg error undefined at supply {supply}")));
    }
    Ok(demand / supply - peg)
}

/// Market price after the follower trades `delta` against `demand`.
pub fn predicted_price(demand: f64, supply: f64, delta: f64) -> Result<f64> {
    let post = supply + delta;
    if post <= 0.0 {
        return Err(Error::domain(format!("post-trade supply {post} is not positive")));
    }
    Ok(demand / post)
}

#[allow(clippy::too_many_arguments)]
pub fn speculator_stage_utility(
    t: usize,
    expected_return: f64,
    stablecoin_price: f64,
    redemption_price: f64,
    delta: f64,
    demand: f64,
    supply: f64,
    discount: f64,
    arb_weight: f64,
) -> Result<f64> {
    let price = predicted_price(demand, supply, delta)?;
    let gain = discount.powi(t as i32) * (expected_return * stablecoin_price - redemption_price) * delta;
    let misalignment = redemption_price - price;
    Ok(gain - arb_weight * misalignment * misalignment)
}

/// Long-run extractable wealth after a single mint/burn decision:
/// `W = r·(C·p_c + p_stb·Δ) − α·(S + Δ)`. Diagnostic only.
pub fn speculator_wealth(
    state: &SystemState,
    expected_return: f64,
    stablecoin_price: f64,
    delta: f64,
    collateral_price: f64,
) -> f64 {
    expected_return * (state.collateral * collateral_price + stablecoin_price * delta)
        - state.redemption_price * (state.supply + delta)
}

/// Frozen per-stage smoothing weights `ω_t`, evaluated on the no-action peg
/// errors `D̂_t / S_0 − p_peg` so the weights stay constant inside a solve.
pub fn stage_weights(forecasts: &ForecastBundle, supply: f64, protocol: &ProtocolParams) -> Result<Vec<f64>> {
    (0..forecasts.horizon())
        .map(|t| {
            let e = peg_error(forecasts.demand[t], supply, protocol.peg)?;
            Ok(adaptive_weight(e, protocol.weight_tolerance, protocol.weight_cap))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct HorizonCosts {
    /// Leader cost `J` summed over stages `0..=T`.
    pub protocol_cost: f64,
    /// Follower objective `f = −U`, summed over stages `0..T`.
    pub speculator_objective: f64,
    pub stages: Vec<StageEvaluation>,
}

/// Evaluates both players' objectives along a trajectory of `T + 1` states and
/// `T` controls.
pub fn horizon_costs(
    states: &[SystemState],
    rate_changes: &[f64],
    supply_changes: &[f64],
    forecasts: &ForecastBundle,
    weights: &[f64],
    protocol: &ProtocolParams,
    speculator: &SpeculatorParams,
) -> Result<HorizonCosts> {
    let horizon = forecasts.horizon();
    check_len("states", horizon + 1, states.len())?;
    check_len("rate changes", horizon, rate_changes.len())?;
    check_len("supply changes", horizon, supply_changes.len())?;
    check_len("stage weights", horizon, weights.len())?;

    let mut stages = Vec::with_capacity(horizon + 1);
    let mut protocol_cost = 0.0;
    let mut utility = 0.0;
    for (t, state) in states.iter().enumerate() {
        let e = peg_error(forecasts.demand[t], state.supply, protocol.peg)?;
        let p_stb = forecasts.stablecoin_price[t];
        let p_c = forecasts.collateral_price[t];
        let evaluation = if t < horizon {
            let stage_utility = speculator_stage_utility(
                t,
                forecasts.returns[t],
                p_stb,
                state.redemption_price,
                supply_changes[t],
                forecasts.demand[t],
                state.supply,
                speculator.discount,
                speculator.arb_weight,
            )?;
            StageEvaluation {
                peg_error: e,
                stage_cost: protocol_stage_cost(e, rate_changes[t], weights[t]),
                stage_utility,
                wealth: speculator_wealth(state, forecasts.returns[t], p_stb, supply_changes[t], p_c),
            }
        } else {
            StageEvaluation {
                peg_error: e,
                stage_cost: e * e,
                stage_utility: 0.0,
                wealth: speculator_wealth(state, 1.0, p_stb, 0.0, p_c),
            }
        };
        protocol_cost += evaluation.stage_cost;
        utility += evaluation.stage_utility;
        stages.push(evaluation);
    }
    Ok(HorizonCosts {
        protocol_cost,
        speculator_objective: -utility,
        stages,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn weight_examples() {
        assert_eq!(adaptive_weight(0.02, 0.01, 1000.0), 1.0);
        assert!((adaptive_weight(0.005, 0.01, 1000.0) - 200.0).abs() < 1e-9);
        assert_eq!(adaptive_weight(0.0, 0.01, 1000.0), 1000.0);
        assert_eq!(adaptive_weight(-0.02, 0.01, 1000.0), 1.0);
        assert_eq!(adaptive_weight(1e-4, 0.01, 1000.0), 1000.0);
    }

    #[test]
    fn stage_cost_examples() {
        assert!((protocol_stage_cost(0.1, 0.05, 1.0) - 0.0175).abs() < 1e-15);
        assert_eq!(protocol_stage_cost(0.0, 0.0, 1.0), 0.0);
        assert!((protocol_stage_cost(0.1, -0.05, 1.0) - 0.0075).abs() < 1e-15);
    }

    #[test]
    fn utility_examples() {
        let u = speculator_stage_utility(0, 1.1, 1.0, 1.0, 10.0, 110.0, 100.0, 1.0, 1.0).unwrap();
        assert!((u - 1.0).abs() < 1e-12);

        let u = speculator_stage_utility(3, 1.05, 1.0, 1.25, 0.0, 125.0, 100.0, 0.9, 1.0).unwrap();
        assert!(u.abs() < 1e-15);

        let u = speculator_stage_utility(1, 1.0, 1.0, 1.0, 5.0, 100.0, 100.0, 0.5, 1.0).unwrap();
        let expected = -(1.0 - 100.0 / 105.0f64).powi(2);
        assert!((u - expected).abs() < 1e-15);
        assert!((u + 0.002268).abs() < 1e-6);

        assert!(speculator_stage_utility(0, 1.0, 1.0, 1.0, -100.0, 100.0, 100.0, 0.9, 1.0).is_err());
    }

    #[test]
    fn wealth_examples() {
        let s = SystemState::new(15.0, 10.0, 1.0).unwrap();
        assert!((speculator_wealth(&s, 1.0, 1.0, 0.0, 2.0) - 5.0).abs() < 1e-12);
        assert!((speculator_wealth(&s, 1.2, 1.0, 5.0, 2.0) - 10.0).abs() < 1e-12);
        for delta in [-7.0, 0.0, 3.0, 40.0] {
            assert!((speculator_wealth(&s, 1.0, 1.0, delta, 2.0) - 5.0).abs() < 1e-12);
        }
    }

    fn flat_bundle(horizon: usize, demand: f64) -> ForecastBundle {
        ForecastBundle::new(vec![demand; horizon + 1], vec![10.0; horizon + 1], vec![1.0; horizon + 1]).unwrap()
    }

    #[test]
    fn bundle_rejects_bad_input() {
        assert!(ForecastBundle::new(vec![1.0], vec![1.0], vec![1.0]).is_err());
        assert!(ForecastBundle::new(vec![1.0, 1.0], vec![1.0], vec![1.0, 1.0]).is_err());
        let err = ForecastBundle::new(vec![1.0, -1.0], vec![1.0, 1.0], vec![1.0, 1.0]).unwrap_err();
        assert!(matches!(err, Error::NonPositiveForecast { series: "demand", index: 1, .. }));
    }

    #[test]
    fn bundle_returns_are_ratio_of_prices() {
        let b = ForecastBundle::new(vec![1.0; 4], vec![2.0, 2.2, 1.1, 1.1], vec![1.0; 4]).unwrap();
        assert_eq!(b.horizon(), 3);
        for t in 0..3 {
            assert!((b.returns[t] * b.collateral_price[t] - b.collateral_price[t + 1]).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_trajectory_has_zero_protocol_cost() {
        let forecasts = flat_bundle(4, 100.0);
        let states = vec![SystemState::new(100.0, 25.0, 1.0).unwrap(); 5];
        let costs = horizon_costs(
            &states,
            &[0.0; 4],
            &[0.0; 4],
            &forecasts,
            &[1.0; 4],
            &ProtocolParams::default(),
            &SpeculatorParams::default(),
        )
        .unwrap();
        assert_eq!(costs.protocol_cost, 0.0);
        assert_eq!(costs.speculator_objective, 0.0);
        assert_eq!(costs.stages.len(), 5);
    }

    #[test]
    fn single_stage_horizon_matches_stage_values() {
        let forecasts = ForecastBundle::new(vec![104.0, 104.0], vec![10.0, 11.0], vec![1.02, 1.02]).unwrap();
        let s0 = SystemState::new(100.0, 25.0, 1.0).unwrap();
        let s1 = SystemState::new(104.0, 25.4, 0.99).unwrap();
        let protocol = ProtocolParams::default();
        let spec = SpeculatorParams::default();
        let costs = horizon_costs(&[s0, s1], &[-0.01], &[4.0], &forecasts, &[1.0], &protocol, &spec).unwrap();
        let e0 = 0.04;
        let e1 = 0.0;
        let expected_j = protocol_stage_cost(e0, -0.01, 1.0) + e1 * e1;
        assert!((costs.protocol_cost - expected_j).abs() < 1e-12);
        let u = speculator_stage_utility(0, 1.1, 1.02, 1.0, 4.0, 104.0, 100.0, 0.95, 1.0).unwrap();
        assert!((costs.speculator_objective + u).abs() < 1e-12);
    }

    #[test]
    fn horizon_costs_dimension_mismatch() {
        let forecasts = flat_bundle(3, 100.0);
        let states = vec![SystemState::new(100.0, 25.0, 1.0).unwrap(); 3];
        let err = horizon_costs(
            &states,
            &[0.0; 3],
            &[0.0; 3],
            &forecasts,
            &[1.0; 3],
            &ProtocolParams::default(),
            &SpeculatorParams::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn utility_linear_gradient_matches_finite_difference() {
        // w_S = 0 isolates the linear wealth term.
        for (t, r, p, alpha) in [(0usize, 1.02, 1.01, 0.98), (3, 0.97, 1.1, 1.0), (7, 1.0, 0.95, 1.05)] {
            let gamma = 0.93f64;
            let f = |d: f64| speculator_stage_utility(t, r, p, alpha, d, 100.0, 100.0, gamma, 0.0).unwrap();
            let h = 1e-4;
            let fd = (f(2.0 + h) - f(2.0 - h)) / (2.0 * h);
            let exact = gamma.powi(t as i32) * (r * p - alpha);
            assert!((fd - exact).abs() <= 1e-6 * exact.abs().max(1e-12), "t={t}: {fd} vs {exact}");
        }
    }

    proptest! {
        #[test]
        fn stage_cost_is_convex_in_rate(e in -0.5..0.5f64, w in 0.01..1000.0f64, a in -0.1..0.1f64) {
            let h = 1e-3;
            let second = (protocol_stage_cost(e, a + h, w) - 2.0 * protocol_stage_cost(e, a, w)
                + protocol_stage_cost(e, a - h, w)) / (h * h);
            prop_assert!((second - 2.0 * w).abs() <= 1e-6 * (2.0 * w).max(1.0));
            prop_assert!(second > 0.0);
        }

        #[test]
        fn utility_increases_with_delta_when_leverage_pays(
            r in 1.0..1.1f64, alpha in 0.8..1.0f64, d in -20.0..20.0f64, step in 0.01..5.0f64,
        ) {
            prop_assume!(r * 1.0 > alpha);
            let u = |x: f64| speculator_stage_utility(2, r, 1.0, alpha, x, 100.0, 100.0, 0.95, 0.0).unwrap();
            prop_assert!(u(d + step) > u(d));
        }

        #[test]
        fn random_horizon_matches_stagewise_recomputation(
            deltas in proptest::collection::vec(-5.0..5.0f64, 3),
            rates in proptest::collection::vec(-0.05..0.05f64, 3),
            demand in proptest::collection::vec(90.0..110.0f64, 4),
            pc in proptest::collection::vec(5.0..15.0f64, 4),
        ) {
            let forecasts = ForecastBundle::new(demand.clone(), pc.clone(), vec![1.01; 4]).unwrap();
            let protocol = ProtocolParams::default();
            let spec = SpeculatorParams::default();
            let mut states = vec![SystemState::new(100.0, 30.0, 1.0).unwrap()];
            for t in 0..3 {
                let prev = states[t];
                states.push(SystemState {
                    supply: prev.supply + deltas[t],
                    collateral: prev.collateral + 1.01 / pc[t] * deltas[t],
                    redemption_price: prev.redemption_price + rates[t],
                });
            }
            let weights = stage_weights(&forecasts, 100.0, &protocol).unwrap();
            let costs = horizon_costs(&states, &rates, &deltas, &forecasts, &weights, &protocol, &spec).unwrap();

            let mut j = 0.0;
            let mut u = 0.0;
            for t in 0..=3 {
                let e = demand[t] / states[t].supply - 1.0;
                j += e * e;
                if t < 3 {
                    j += weights[t] * rates[t] * rates[t] + rates[t] * e;
                    let ret = pc[t + 1] / pc[t];
                    let price = demand[t] / (states[t].supply + deltas[t]);
                    u += 0.95f64.powi(t as i32) * (ret * 1.01 - states[t].redemption_price) * deltas[t]
                        - (states[t].redemption_price - price).powi(2);
                }
            }
            prop_assert!((costs.protocol_cost - j).abs() < 1e-10);
            prop_assert!((costs.speculator_objective + u).abs() < 1e-10);
        }
    }
}
