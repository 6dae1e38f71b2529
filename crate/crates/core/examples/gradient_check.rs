//! Compares the analytic derivatives of a relaxed horizon program against
//! central differences.

use stackelberg_peg::fdcheck;
use stackelberg_peg::mpcc::{assemble, HorizonProblem, MpccSettings};
use stackelberg_peg::nlp::NlpProblem;
use stackelberg_peg::objectives::ForecastBundle;
use stackelberg_peg::state::{ProtocolParams, SpeculatorParams, SystemState};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let horizon = 3;
    let problem = HorizonProblem {
        state: SystemState::new(98.0, 24.0, 1.01)?,
        forecasts: ForecastBundle::new(
            vec![100.0, 103.0, 99.0, 101.0],
            vec![10.0, 10.4, 9.7, 10.1],
            vec![1.02; horizon + 1],
        )?,
        protocol: ProtocolParams {
            horizon,
            ..ProtocolParams::default()
        },
        speculator: SpeculatorParams::default(),
    };
    let nlp = assemble(&problem, &MpccSettings::default(), 0.25)?;
    let l = nlp.layout();
    let n = l.num_vars();
    // A point away from the solution, with positive multipliers and slacks.
    let z: Vec<f64> = (0..n).map(|i| 0.3 + 0.01 * (i % 7) as f64).collect();

    let mut grad = vec![0.0; n];
    nlp.upper_gradient(&z, &mut grad);
    let fd = fdcheck::gradient(|v| nlp.upper_objective(v), &z, 1e-6);
    println!("leader gradient     {:.2e}", fdcheck::max_relative_error(&grad, &fd));

    nlp.lower_gradient(&z, &mut grad);
    let fd = fdcheck::gradient(|v| nlp.lower_objective(v), &z, 1e-6);
    println!("follower gradient   {:.2e}", fdcheck::max_relative_error(&grad, &fd));

    let mut jac = Vec::new();
    nlp.eq_jacobian(&z, &mut jac);
    let fd = fdcheck::jacobian(|v, o| nlp.eq_constraints(v, o), &z, l.num_eq(), 1e-6);
    println!(
        "equality Jacobian   {:.2e}",
        fdcheck::max_matrix_error(&fdcheck::densify(&jac, l.num_eq(), n, false), &fd)
    );

    jac.clear();
    nlp.ineq_jacobian(&z, &mut jac);
    let fd = fdcheck::jacobian(|v, o| nlp.ineq_constraints(v, o), &z, l.num_h(), 1e-6);
    println!(
        "inequality Jacobian {:.2e}",
        fdcheck::max_matrix_error(&fdcheck::densify(&jac, l.num_h(), n, false), &fd)
    );
    Ok(())
}
