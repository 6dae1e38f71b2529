//! Solves one receding-horizon leader/follower problem and prints the plan.
//!
//! cargo run --example solve_horizon

use stackelberg_peg::mpcc::{solve_mpcc, HorizonProblem, MpccSettings};
use stackelberg_peg::objectives::ForecastBundle;
use stackelberg_peg::state::{ProtocolParams, SpeculatorParams, SystemState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let horizon = 5;
    // Demand expected to grow 1% a step against a fixed supply.
    let demand: Vec<f64> = (0..=horizon).map(|t| 100.0 * 1.01f64.powi(t as i32)).collect();
    let problem = HorizonProblem {
        state: SystemState::new(100.0, 25.0, 1.0)?,
        forecasts: ForecastBundle::new(demand, vec![10.0; horizon + 1], vec![1.0; horizon + 1])?,
        protocol: ProtocolParams {
            horizon,
            ..ProtocolParams::default()
        },
        speculator: SpeculatorParams::default(),
    };
    let sol = solve_mpcc(&problem, &MpccSettings::default(), None)?;
    println!("{:>3}{:>10}{:>10}{:>10}{:>10}", "t", "α", "δα", "S", "Δ");
    for t in 0..horizon {
        println!(
            "{t:>3}{:>10.4}{:>10.4}{:>10.3}{:>10.3}",
            sol.alpha[t], sol.delta_alpha[t], sol.supply[t], sol.delta[t]
        );
    }
    println!("\n{:>3}{:>10}{:>12}{:>8}", "k", "ε", "max |μh−ε|", "inner");
    for (k, it) in sol.history.iter().enumerate() {
        println!("{k:>3}{:>10.4}{:>12.2e}{:>8}", it.eps, it.complementarity_error, it.inner_converged);
    }
    println!(
        "\nleader {:.6}, follower {:.6}, converged {}, {} inner iterations",
        sol.leader_objective, sol.follower_objective, sol.converged, sol.inner_iterations
    );
    Ok(())
}
