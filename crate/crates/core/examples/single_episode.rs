//! Runs one episode per controller on the stress scenario and prints its metrics.
//!
//! cargo run --example single_episode -- [seed]

use stackelberg_peg::controllers::ControllerKind;
use stackelberg_peg::harness::{self, EpisodeConfig};
use stackelberg_peg::market::ScenarioKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map_or(Ok(7), |s| s.parse())?;
    println!("{:<6}{:>10}{:>10}{:>11}{:>8}{:>10}", "ctrl", "p_mad", "r_mad", "min_gamma", "repeg", "fallback");
    for kind in ControllerKind::ALL {
        let mut config = EpisodeConfig::new(ScenarioKind::Stress, kind);
        config.agents = config.agents.with_arbitrage(50.0);
        let trace = harness::run_episode(&config, seed)?;
        let m = harness::run_metrics(&trace)?;
        let repeg = m.time_to_repeg.map_or("never".to_string(), |t| t.to_string());
        println!(
            "{:<6}{:>10.6}{:>10.6}{:>11.4}{:>8}{:>10}",
            kind.label(),
            m.p_mad,
            m.r_mad,
            m.min_gamma,
            repeg,
            m.solver_failures
        );
    }
    Ok(())
}
