//! Protocol-visible stablecoin state and its one-step transition.
//!
//! A transition applies a redemption-rate change `δα` and a net mint/burn `Δ`:
//!
//! ```text
//! α' = α + δα
//! S' = S + Δ
//! C' = C + (p_stb / p_c) · Δ
//! ```
//!
//! Minted tokens are backed by collateral bought at the current conversion
//! factor `p_stb / p_c`; burned tokens release collateral at the same factor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    /// Outstanding token supply `S`.
    pub supply: f64,
    /// Collateral held in vaults, in collateral-asset units `C`.
    pub collateral: f64,
    /// Redemption price `α`, USD per token.
    pub redemption_price: f64,
}

impl SystemState {
    pub fn new(supply: f64, collateral: f64, redemption_price: f64) -> Result<Self> {
        let state = Self {
            supply,
            collateral,
            redemption_price,
        };
        state.validate()?;
        Ok(state)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.supply.is_finite() && self.collateral.is_finite() && self.redemption_price.is_finite()) {
            return Err(Error::Numerical(format!("non-finite state {self:?}")));
        }
        if self.supply < 0.0 {
            return Err(Error::domain(format!("negative supply {}", self.supply)));
        }
        if self.collateral < 0.0 {
            return Err(Error::domain(format!("negative collateral {}", self.collateral)));
        }
        if self.redemption_price <= 0.0 {
            return Err(Error::domain(format!(
                "non-positive redemption price {}",
                self.redemption_price
            )));
        }
        Ok(())
    }
}

/// One market observation consumed by controllers and forecasters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketObservation {
    pub stablecoin_price: f64,
    pub collateral_price: f64,
    pub demand: f64,
    /// Net supply change realized in the step that produced this observation.
    pub realized_delta: f64,
}

impl MarketObservation {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("stablecoin price", self.stablecoin_price),
            ("collateral price", self.collateral_price),
            ("demand", self.demand),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !self.realized_delta.is_finite() {
            return Err(Error::Numerical("non-finite realized delta".into()));
        }
        Ok(())
    }
}

/// Follower (CDP speculator) parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeculatorParams {
    /// Per-step discount `γ` in (0, 1].
    pub discount: f64,
    /// Weight `w_S` on the price-alignment penalty.
    pub arb_weight: f64,
    /// Minimum vault collateralization `β`.
    pub min_collateral_ratio: f64,
}

impl Default for SpeculatorParams {
    fn default() -> Self {
        Self {
            discount: 0.95,
            arb_weight: 1.0,
            min_collateral_ratio: 1.5,
        }
    }
}

impl SpeculatorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(Error::config(format!("discount must lie in (0, 1], got {}", self.discount)));
        }
        if !(self.arb_weight >= 0.0) {
            return Err(Error::config(format!("arb_weight must be >= 0, got {}", self.arb_weight)));
        }
        if !(self.min_collateral_ratio > 1.0) {
            return Err(Error::config(format!(
                "min_collateral_ratio must exceed 1, got {}",
                self.min_collateral_ratio
            )));
        }
        Ok(())
    }
}

/// Leader (protocol) parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolParams {
    pub peg: f64,
    /// Planning horizon `T` in steps.
    pub horizon: usize,
    /// Peg-error magnitude above which the rate-smoothing weight drops to 1.
    pub weight_tolerance: f64,
    /// Upper bound on the adaptive rate-smoothing weight.
    pub weight_cap: f64,
}

impl Default for ProtocolParams {
    fn default() -> Self {
        Self {
            peg: 1.0,
            horizon: 10,
            weight_tolerance: 0.01,
            weight_cap: 1000.0,
        }
    }
}

impl ProtocolParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.peg > 0.0) {
            return Err(Error::config(format!("peg must be positive, got {}", self.peg)));
        }
        if self.horizon < 1 {
            return Err(Error::config("horizon must be at least 1"));
        }
        if !(self.weight_tolerance > 0.0 && self.weight_cap > 0.0) {
            return Err(Error::config("weight tolerance and cap must be positive"));
        }
        Ok(())
    }
}

/// Applies one transition. Fails if the result leaves the admissible domain;
/// callers that simulate markets clamp `delta` beforehand.
pub fn step_state(
    state: &SystemState,
    delta_alpha: f64,
    delta: f64,
    stablecoin_price: f64,
    collateral_price: f64,
) -> Result<SystemState> {
    if !(stablecoin_price > 0.0 && collateral_price > 0.0) {
        return Err(Error::domain(format!(
            "prices must be positive (p_stb={stablecoin_price}, p_c={collateral_price})"
        )));
    }
    let next = SystemState {
        supply: state.supply + delta,
        collateral: state.collateral + stablecoin_price / collateral_price * delta,
        redemption_price: state.redemption_price + delta_alpha,
    };
    next.validate()?;
    Ok(next)
}

/// `Γ = C·p_c / (α·S)`.
pub fn collateralization_ratio(state: &SystemState, collateral_price: f64) -> Result<f64> {
    if state.supply <= 0.0 {
        return Err(Error::domain("collateralization ratio undefined at zero supply"));
    }
    if state.redemption_price <= 0.0 {
        return Err(Error::domain("collateralization ratio undefined at non-positive redemption price"));
    }
    Ok(state.collateral * collateral_price / (state.redemption_price * state.supply))
}

pub fn vault_feasible(state: &SystemState, collateral_price: f64, min_ratio: f64) -> Result<bool> {
    Ok(collateralization_ratio(state, collateral_price)? >= min_ratio)
}
