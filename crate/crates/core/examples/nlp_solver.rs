//! The interior-point solver on a small constrained problem:
//! min (x₀ − 2)² + (x₁ − 1)² s.t. x₀² ≤ x₁, x₀ + x₁ ≤ 2, 0 ≤ x.

use stackelberg_peg::nlp::{solve, IpmOptions, IpmStart, NlpProblem, Triplet};

struct Example;

impl NlpProblem for Example {
    fn num_vars(&self) -> usize {
        2
    }
    fn num_eq(&self) -> usize {
        0
    }
    fn num_ineq(&self) -> usize {
        2
    }
    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; 2], vec![f64::INFINITY; 2])
    }
    fn objective(&self, x: &[f64]) -> f64 {
        (x[0] - 2.0).powi(2) + (x[1] - 1.0).powi(2)
    }
    fn gradient(&self, x: &[f64], grad: &mut [f64]) {
        grad[0] = 2.0 * (x[0] - 2.0);
        grad[1] = 2.0 * (x[1] - 1.0);
    }
    fn eq_constraints(&self, _x: &[f64], _out: &mut [f64]) {}
    fn ineq_constraints(&self, x: &[f64], out: &mut [f64]) {
        out[0] = x[1] - x[0] * x[0];
        out[1] = 2.0 - x[0] - x[1];
    }
    fn eq_jacobian(&self, _x: &[f64], _jac: &mut Vec<Triplet>) {}
    fn ineq_jacobian(&self, x: &[f64], jac: &mut Vec<Triplet>) {
        jac.extend([(0, 0, -2.0 * x[0]), (0, 1, 1.0), (1, 0, -1.0), (1, 1, -1.0)]);
    }
    fn hessian(&self, _x: &[f64], obj_factor: f64, _y_eq: &[f64], y_ineq: &[f64], hess: &mut Vec<Triplet>) {
        hess.extend([(0, 0, 2.0 * obj_factor + 2.0 * y_ineq[0]), (1, 1, 2.0 * obj_factor)]);
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sol = solve(&Example, &IpmStart::primal(vec![0.5, 0.5]), &IpmOptions::default())?;
    println!("status     {:?} after {} iterations", sol.status, sol.iterations);
    println!("x          [{:.8}, {:.8}]", sol.x[0], sol.x[1]);
    println!("objective  {:.10}", sol.objective);
    println!("multipliers {:?}", sol.y_ineq);
    println!("KKT error  {:.2e}", sol.kkt_error);
    Ok(())
}
