//! Thomas algorithm for tridiagonal systems.
//!
//! Row `i` reads `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]`;
//! `lower[0]` and `upper[m-1]` are ignored.

/// Solves the system, returning `None` on a zero pivot or non-finite output.
pub fn solve(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Option<Vec<f64>> {
    let mut work = vec![0.0; diag.len()];
    let mut x = rhs.to_vec();
    solve_in_place(lower, diag, upper, &mut x, &mut work).then_some(x)
}

/// In-place variant: `x` holds the right-hand side on entry and the
/// solution on exit; `work` must have the system's length.
pub fn solve_in_place(lower: &[f64], diag: &[f64], upper: &[f64], x: &mut [f64], work: &mut [f64]) -> bool {
    let m = diag.len();
    if m == 0 {
        return true;
    }
    let mut beta = diag[0];
    if beta == 0.0 {
        return false;
    }
    x[0] /= beta;
    for i in 1..m {
        work[i] = upper[i - 1] / beta;
        beta = diag[i] - lower[i] * work[i];
        if beta == 0.0 {
            return false;
        }
        x[i] = (x[i] - lower[i] * x[i - 1]) / beta;
    }
    for i in (0..m - 1).rev() {
        x[i] -= work[i + 1] * x[i + 1];
    }
    x.iter().all(|v| v.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_system() {
        let lower = [0.0, -1.0, -1.0];
        let diag = [2.0, 2.0, 2.0];
        let upper = [-1.0, -1.0, 0.0];
        let x = solve(&lower, &diag, &upper, &[1.0, 0.0, 1.0]).unwrap();
        for v in x {
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_pivot() {
        assert!(solve(&[0.0], &[0.0], &[0.0], &[1.0]).is_none());
    }
}
