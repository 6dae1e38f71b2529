//! Collateralization paths of the three controllers through a collateral crash.
//!
//! cargo run --release --example vault_crisis -- [seed]

use stackelberg_peg::controllers::ControllerKind;
use stackelberg_peg::harness::{self, EpisodeConfig};
use stackelberg_peg::market::ScenarioKind;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed = std::env::args().nth(1).map_or(Ok(3), |s| s.parse())?;
    let traces = ControllerKind::ALL
        .map(|kind| harness::run_episode(&EpisodeConfig::new(ScenarioKind::VaultCrisis, kind), seed));
    let beta = EpisodeConfig::new(ScenarioKind::VaultCrisis, ControllerKind::Fixed)
        .controller
        .speculator
        .min_collateral_ratio;
    println!("{:>4}{:>10}{:>8}{:>8}{:>8}", "t", "eth", "dai", "rai", "utai");
    let traces = traces.into_iter().collect::<Result<Vec<_>, _>>()?;
    for t in (0..traces[0].records.len()).step_by(5) {
        print!("{t:>4}{:>10.3}", traces[0].records[t].eth_price);
        for trace in &traces {
            print!("{:>8.3}", trace.records[t].gamma);
        }
        println!();
    }
    for (kind, trace) in ControllerKind::ALL.iter().zip(&traces) {
        let m = harness::run_metrics(trace)?;
        let verdict = if m.min_gamma < beta { "breached" } else { "held" };
        println!("{}: min Γ {:.3}, vault minimum {beta} {verdict}", kind.label(), m.min_gamma);
    }
    Ok(())
}
