//! A reduced Monte Carlo study (4 seeds, 60 steps) printed as p-MAD and r-MAD tables.
//!
//! cargo run --release --example monte_carlo_table

use stackelberg_peg::harness::{self, StudyConfig};
use stackelberg_peg::market::{ScenarioConfig, ScenarioKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // The stress scenario's last shock lands at step 75.
    let study = StudyConfig {
        scenarios: [ScenarioKind::Default, ScenarioKind::Drift, ScenarioKind::SustainedShock]
            .map(ScenarioConfig::preset)
            .to_vec(),
        seeds: 4,
        steps: 60,
        ..StudyConfig::default()
    };
    let report = harness::monte_carlo(&study, &|done, total| {
        if done == total {
            eprintln!("{total} episodes");
        }
    })?;
    println!("P-MAD\n{}", report.table("p_mad"));
    println!("R-MAD\n{}", report.table("r_mad"));
    Ok(())
}
