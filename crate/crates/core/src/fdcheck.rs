//! Central finite-difference checks for analytic derivatives.

use crate::nlp::Triplet;

/// Step used for coordinate `x`: `base · max(1, |x|)`.
pub fn step_size(base: f64, x: f64) -> f64 {
    base * x.abs().max(1.0)
}

/// Central-difference gradient of a scalar function.
pub fn gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], base: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let h = step_size(base, x[i]);
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Central-difference Jacobian of a vector function, row-major `rows × x.len()`.
pub fn jacobian(f: impl Fn(&[f64], &mut [f64]), x: &[f64], rows: usize, base: f64) -> Vec<Vec<f64>> {
    let n = x.len();
    let mut jac = vec![vec![0.0; n]; rows];
    let mut probe = x.to_vec();
    let mut up = vec![0.0; rows];
    let mut down = vec![0.0; rows];
    for j in 0..n {
        let h = step_size(base, x[j]);
        probe[j] = x[j] + h;
        f(&probe, &mut up);
        probe[j] = x[j] - h;
        f(&probe, &mut down);
        probe[j] = x[j];
        for r in 0..rows {
            jac[r][j] = (up[r] - down[r]) / (2.0 * h);
        }
    }
    jac
}

/// Densifies triplets, summing duplicates. With `symmetric`, off-diagonal
/// entries are mirrored.
pub fn densify(triplets: &[Triplet], rows: usize, cols: usize, symmetric: bool) -> Vec<Vec<f64>> {
    let mut m = vec![vec![0.0; cols]; rows];
    for &(i, j, v) in triplets {
        m[i][j] += v;
        if symmetric && i != j {
            m[j][i] += v;
        }
    }
    m
}

/// `|a − b| / max(1, |a|, |b|)`: relative for large entries, absolute near zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Largest entrywise [`relative_error`] between two matrices or vectors.
pub fn max_relative_error<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter()
        .zip(b)
        .fold(0.0, |m, (x, y)| m.max(relative_error(*x, *y)))
}

pub fn max_matrix_error(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .fold(0.0, |m, (ra, rb)| m.max(max_relative_error(ra, rb)))
}
