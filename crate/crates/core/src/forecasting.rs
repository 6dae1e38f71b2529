//! Demand and collateral-price forecasters feeding the horizon problem.
//!
//! Every forecaster pins the stablecoin price forecast to the latest market
//! observation across the whole horizon, which keeps the follower's dynamics
//! affine in its own variables.

use std::collections::VecDeque;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::SimPath;
use crate::objectives::ForecastBundle;
use crate::state::MarketObservation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecasterKind {
    /// Repeat the last observed level.
    Persistence,
    /// Exponentially smoothed level compounded at the mean log-drift of a window.
    EwmaDrift,
    /// Read the realized exogenous path (perfect foresight).
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForecasterConfig {
    pub kind: ForecasterKind,
    pub ewma_weight: f64,
    pub drift_window: usize,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            kind: ForecasterKind::EwmaDrift,
            ewma_weight: 0.3,
            drift_window: 10,
        }
    }
}

impl ForecasterConfig {
    pub fn persistence() -> Self {
        Self {
            kind: ForecasterKind::Persistence,
            ..Self::default()
        }
    }

    pub fn oracle() -> Self {
        Self {
            kind: ForecasterKind::Oracle,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.ewma_weight > 0.0 && self.ewma_weight <= 1.0) {
            return Err(Error::config(format!("ewma_weight must lie in (0, 1], got {}", self.ewma_weight)));
        }
        if self.drift_window < 1 {
            return Err(Error::config("drift_window must be at least 1"));
        }
        Ok(())
    }
}

/// Smoothed level plus a rolling window of raw values for the drift estimate.
#[derive(Debug, Clone, Default)]
struct SeriesTracker {
    level: Option<f64>,
    window: VecDeque<f64>,
}

impl SeriesTracker {
    fn push(&mut self, value: f64, weight: f64, window: usize) {
        self.level = Some(match self.level {
            None => value,
            Some(level) => weight * value + (1.0 - weight) * level,
        });
        self.window.push_back(value);
        while self.window.len() > window + 1 {
            self.window.pop_front();
        }
    }

    fn last(&self) -> Option<f64> {
        self.window.back().copied()
    }

    /// Mean one-step log growth over the stored window.
    fn log_drift(&self) -> f64 {
        match (self.window.front(), self.window.back()) {
            (Some(first), Some(last)) if self.window.len() > 1 => {
                (last.ln() - first.ln()) / (self.window.len() - 1) as f64
            }
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Forecaster {
    config: ForecasterConfig,
    demand: SeriesTracker,
    collateral: SeriesTracker,
    stablecoin_price: Option<f64>,
    observed: usize,
    path: Option<Arc<SimPath>>,
}

impl Forecaster {
    pub fn new(config: ForecasterConfig) -> Result<Self> {
        config.validate()?;
        if config.kind == ForecasterKind::Oracle {
            return Err(Error::config("oracle forecaster needs a path; use Forecaster::oracle"));
        }
        Ok(Self {
            config,
            demand: SeriesTracker::default(),
            collateral: SeriesTracker::default(),
            stablecoin_price: None,
            observed: 0,
            path: None,
        })
    }

    pub fn oracle(config: ForecasterConfig, path: Arc<SimPath>) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: ForecasterConfig {
                kind: ForecasterKind::Oracle,
                ..config
            },
            demand: SeriesTracker::default(),
            collateral: SeriesTracker::default(),
            stablecoin_price: None,
            observed: 0,
            path: Some(path),
        })
    }

    /// Builds the forecaster a controller config asks for; the oracle reads `path`.
    pub fn for_episode(config: ForecasterConfig, path: &Arc<SimPath>) -> Result<Self> {
        match config.kind {
            ForecasterKind::Oracle => Self::oracle(config, Arc::clone(path)),
            _ => Self::new(config),
        }
    }

    pub fn config(&self) -> &ForecasterConfig {
        &self.config
    }

    pub fn observations(&self) -> usize {
        self.observed
    }

    /// Smoothed collateral-price level (the last value for persistence).
    pub fn collateral_level(&self) -> Option<f64> {
        match self.config.kind {
            ForecasterKind::Persistence => self.collateral.last(),
            _ => self.collateral.level,
        }
    }

    pub fn demand_level(&self) -> Option<f64> {
        match self.config.kind {
            ForecasterKind::Persistence => self.demand.last(),
            _ => self.demand.level,
        }
    }

    pub fn update(&mut self, observation: &MarketObservation) -> Result<()> {
        observation.validate()?;
        let weight = self.config.ewma_weight;
        let window = self.config.drift_window;
        self.demand.push(observation.demand, weight, window);
        self.collateral.push(observation.collateral_price, weight, window);
        self.stablecoin_price = Some(observation.stablecoin_price);
        self.observed += 1;
        Ok(())
    }

    pub fn forecast(&self, horizon: usize) -> Result<ForecastBundle> {
        if horizon < 1 {
            return Err(Error::config("forecast horizon must be at least 1"));
        }
        let n = horizon + 1;
        let (demand, collateral) = match self.config.kind {
            ForecasterKind::Oracle => {
                let path = self.path.as_ref().ok_or_else(|| Error::config("oracle forecaster without path"))?;
                let start = self.observed.saturating_sub(1);
                let last = path.demand.len() - 1;
                let at = |k: usize| (start + k).min(last);
                (
                    (0..n).map(|k| path.demand[at(k)]).collect::<Vec<_>>(),
                    (0..n).map(|k| path.eth_price[at(k)]).collect::<Vec<_>>(),
                )
            }
            ForecasterKind::Persistence => {
                let d = self.demand.last().ok_or_else(no_history)?;
                let c = self.collateral.last().ok_or_else(no_history)?;
                (vec![d; n], vec![c; n])
            }
            ForecasterKind::EwmaDrift => {
                let d = self.demand.level.ok_or_else(no_history)?;
                let c = self.collateral.level.ok_or_else(no_history)?;
                let gd = self.demand.log_drift();
                let gc = self.collateral.log_drift();
                (
                    (0..n).map(|t| d * (gd * t as f64).exp()).collect(),
                    (0..n).map(|t| c * (gc * t as f64).exp()).collect(),
                )
            }
        };
        let stablecoin = match (self.stablecoin_price, self.config.kind) {
            (Some(p), _) => p,
            // Before the first observation the oracle assumes the market sits at par.
            (None, ForecasterKind::Oracle) => 1.0,
            (None, _) => return Err(no_history()),
        };
        ForecastBundle::new(demand, collateral, vec![stablecoin; n])
    }
}

fn no_history() -> Error {
    Error::InsufficientHistory("forecast requested before any observation".into())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obs(p_stb: f64, p_c: f64, demand: f64) -> MarketObservation {
        MarketObservation {
            stablecoin_price: p_stb,
            collateral_price: p_c,
            demand,
            realized_delta: 0.0,
        }
    }

    #[test]
    fn persistence_repeats_last_level() {
        let mut f = Forecaster::new(ForecasterConfig::persistence()).unwrap();
        f.update(&obs(1.0, 1.5, 100.0)).unwrap();
        f.update(&obs(1.01, 2.0, 101.0)).unwrap();
        assert_eq!(f.collateral_level(), Some(2.0));
        let b = f.forecast(3).unwrap();
        assert_eq!(b.collateral_price, vec![2.0; 4]);
        assert_eq!(b.returns, vec![1.0; 3]);
        assert_eq!(b.demand, vec![101.0; 4]);
        assert_eq!(b.stablecoin_price, vec![1.01; 4]);
    }

    #[test]
    fn ewma_level_blends_observations() {
        let cfg = ForecasterConfig {
            ewma_weight: 0.5,
            ..ForecasterConfig::default()
        };
        let mut f = Forecaster::new(cfg).unwrap();
        f.update(&obs(1.0, 1.0, 100.0)).unwrap();
        f.update(&obs(1.0, 2.0, 100.0)).unwrap();
        assert!((f.collateral_level().unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn ewma_drift_compounds_exact_growth() {
        let mut f = Forecaster::new(ForecasterConfig::default()).unwrap();
        let mut p = 3.0;
        for _ in 0..25 {
            f.update(&obs(1.0, p, 100.0)).unwrap();
            p *= 1.01;
        }
        let level = f.collateral_level().unwrap();
        let b = f.forecast(6).unwrap();
        for (t, v) in b.collateral_price.iter().enumerate() {
            let expected = level * 1.01f64.powi(t as i32);
            assert!((v - expected).abs() <= 1e-9 * expected, "t={t}: {v} vs {expected}");
        }
        for r in &b.returns {
            assert!((r - 1.01).abs() < 1e-9);
        }
    }

    #[test]
    fn forecast_needs_history() {
        let f = Forecaster::new(ForecasterConfig::default()).unwrap();
        assert!(matches!(f.forecast(3), Err(Error::InsufficientHistory(_))));
        let f = Forecaster::new(ForecasterConfig::persistence()).unwrap();
        assert!(matches!(f.forecast(3), Err(Error::InsufficientHistory(_))));
    }

    #[test]
    fn update_rejects_nonpositive_prices() {
        let mut f = Forecaster::new(ForecasterConfig::default()).unwrap();
        assert!(f.update(&obs(0.0, 1.0, 100.0)).is_err());
        assert!(f.update(&obs(1.0, -1.0, 100.0)).is_err());
        assert_eq!(f.observations(), 0);
    }

    #[test]
    fn oracle_reads_the_path() {
        let path = Arc::new(SimPath {
            demand: (0..20).map(|i| 100.0 + i as f64).collect(),
            eth_price: (0..20).map(|i| 10.0 * 1.02f64.powi(i)).collect(),
            seed: 7,
        });
        let mut f = Forecaster::oracle(ForecasterConfig::oracle(), Arc::clone(&path)).unwrap();
        let before = f.forecast(3).unwrap();
        assert_eq!(before.demand, path.demand[0..4].to_vec());
        for _ in 0..5 {
            // Values are ignored; only the step count advances.
            f.update(&obs(1.2, 999.0, 1.0)).unwrap();
        }
        let b = f.forecast(4).unwrap();
        assert_eq!(b.demand, path.demand[4..9].to_vec());
        assert_eq!(b.collateral_price, path.eth_price[4..9].to_vec());
        assert_eq!(b.stablecoin_price, vec![1.2; 5]);
        // Past the end of the path the last value repeats.
        for _ in 0..30 {
            f.update(&obs(1.0, 1.0, 1.0)).unwrap();
        }
        let tail = f.forecast(2).unwrap();
        assert_eq!(tail.demand, vec![119.0; 3]);
    }

    #[test]
    fn returns_consistent_and_positive_for_every_kind() {
        let path = Arc::new(SimPath {
            demand: vec![100.0, 90.0, 120.0, 80.0, 101.0],
            eth_price: vec![10.0, 7.0, 13.0, 9.0, 10.0],
            seed: 1,
        });
        let mut forecasters = vec![
            Forecaster::new(ForecasterConfig::persistence()).unwrap(),
            Forecaster::new(ForecasterConfig::default()).unwrap(),
            Forecaster::oracle(ForecasterConfig::oracle(), Arc::clone(&path)).unwrap(),
        ];
        for f in forecasters.iter_mut() {
            for t in 0..5 {
                f.update(&obs(1.0, path.eth_price[t], path.demand[t])).unwrap();
            }
            let b = f.forecast(5).unwrap();
            for t in 0..5 {
                assert!((b.returns[t] * b.collateral_price[t] - b.collateral_price[t + 1]).abs() < 1e-12);
            }
            assert!(b.demand.iter().chain(&b.collateral_price).all(|v| *v > 0.0));
        }
    }
}
