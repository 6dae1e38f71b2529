//! Prints the demand and collateral price paths of every scenario for one seed.
//!
//! cargo run --example scenario_paths -- [seed]

use stackelberg_peg::market::{generate_path, ScenarioConfig, ScenarioKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map_or(Ok(1), |s| s.parse())?;
    let kinds = [
        ScenarioKind::Default,
        ScenarioKind::Drift,
        ScenarioKind::Stress,
        ScenarioKind::SustainedShock,
        ScenarioKind::VaultCrisis,
    ];
    let paths = kinds
        .iter()
        .map(|&k| generate_path(&ScenarioConfig::preset(k), seed))
        .collect::<Result<Vec<_>, _>>()?;
    print!("{:>4}", "t");
    for k in kinds {
        print!("{:>11}", k.label());
    }
    println!("{:>11}", "crisis eth");
    for t in (0..paths[0].len()).step_by(5) {
        print!("{t:>4}");
        for p in &paths {
            print!("{:>11.3}", p.demand[t]);
        }
        println!("{:>11.3}", paths[4].eth_price[t]);
    }
    Ok(())
}
