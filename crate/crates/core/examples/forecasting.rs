//! Forecasts from each forecaster after the same observed history.

use std::sync::Arc;

use stackelberg_peg::forecasting::{Forecaster, ForecasterConfig};
use stackelberg_peg::market::{generate_path, ScenarioConfig, ScenarioKind};
use stackelberg_peg::state::MarketObservation;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = Arc::new(generate_path(&ScenarioConfig::preset(ScenarioKind::Drift), 2)?);
    let seen = 40;
    let horizon = 10;
    for (name, config) in [
        ("persistence", ForecasterConfig::persistence()),
        ("ewma drift", ForecasterConfig::default()),
        ("oracle", ForecasterConfig::oracle()),
    ] {
        let mut f = Forecaster::for_episode(config, &path)?;
        for t in 0..seen {
            f.update(&MarketObservation {
                stablecoin_price: 1.0,
                collateral_price: path.eth_price[t],
                demand: path.demand[t],
                realized_delta: 0.0,
            })?;
        }
        let b = f.forecast(horizon)?;
        let err: f64 = (0..=horizon).map(|k| (b.demand[k] - path.demand[seen - 1 + k]).abs()).sum::<f64>() / (horizon + 1) as f64;
        println!(
            "{name:<12} demand {:>8.3} -> {:>8.3}, mean abs error {err:.3}",
            b.demand[0], b.demand[horizon]
        );
    }
    Ok(())
}
