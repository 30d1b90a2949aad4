//! Exhaustive active-set reference solver.
//!
//! Ground truth for [`correct`](super::correct): enumerates all `2^C` active
//! sets, solves each equality-constrained least-squares subproblem by dense
//! elimination, filters by primal feasibility and returns the feasible
//! candidate of minimum distance to `p`. The projection objective is
//! strictly convex, so that candidate is the unique optimum. Deliberately
//! shares no code with the coordinate-descent path.

use super::{QpError, QpInstance};
use crate::vecops;

pub const ORACLE_MAX_CONSTRAINTS: usize = 12;

const PIVOT_EPS: f64 = 1e-12;
const FEAS_EPS: f64 = 1e-9;

/// Gaussian elimination with partial pivoting; `None` on (near-)singular
/// systems, which the caller skips (a rank-deficient active set is always
/// shadowed by one of its independent subsets).
#[allow(clippy::needless_range_loop)]
fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    let scale = a
        .iter()
        .flat_map(|row| row.iter().map(|v| v.abs()))
        .fold(1.0, f64::max);
    for k in 0..n {
        let (piv, pmax) = (k..n)
            .map(|i| (i, a[i][k].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))?;
        if pmax <= PIVOT_EPS * scale {
            return None;
        }
        a.swap(k, piv);
        b.swap(k, piv);
        for i in k + 1..n {
            let f = a[i][k] / a[k][k];
            if f != 0.0 {
                for j in k..n {
                    a[i][j] -= f * a[k][j];
                }
                b[i] -= f * b[k];
            }
        }
    }
    let mut x = vec![0.0; n];
    for k in (0..n).rev() {
        let mut s = b[k];
        for j in k + 1..n {
            s -= a[k][j] * x[j];
        }
        x[k] = s / a[k][k];
    }
    Some(x)
}

pub fn oracle_solve(inst: &QpInstance) -> Result<Vec<f64>, QpError> {
    let c = inst.num_constraints();
    if c > ORACLE_MAX_CONSTRAINTS {
        return Err(QpError::TooManyConstraints {
            got: c,
            max: ORACLE_MAX_CONSTRAINTS,
        });
    }
    if c == 0 {
        return Ok(inst.p().to_vec());
    }

    let col_norms: Vec<f64> = (0..c).map(|j| vecops::norm(inst.col(j))).collect();
    let mut best: Option<(f64, Vec<f64>)> = None;

    for mask in 0u32..(1 << c) {
        let active: Vec<usize> = (0..c).filter(|j| mask & (1 << j) != 0).collect();
        let candidate = if active.is_empty() {
            inst.p().to_vec()
        } else {
            // Solve <p + sum_k z_k M_k, M_j> = 0 for j active:
            // (Gram_active) z = -(M'p)_active
            let k = active.len();
            let mut gram = vec![vec![0.0; k]; k];
            let mut rhs = vec![0.0; k];
            for (r, &i) in active.iter().enumerate() {
                for (s, &j) in active.iter().enumerate() {
                    gram[r][s] = vecops::dot(inst.col(i), inst.col(j));
                }
                rhs[r] = -vecops::dot(inst.p(), inst.col(i));
            }
            let Some(z) = solve_linear(gram, rhs) else {
                continue;
            };
            let mut cand = inst.p().to_vec();
            for (r, &j) in active.iter().enumerate() {
                vecops::axpy(&mut cand, z[r], inst.col(j));
            }
            cand
        };

        let cand_norm = vecops::norm(&candidate);
        let feasible = (0..c).all(|j| {
            vecops::dot(&candidate, inst.col(j)) >= -FEAS_EPS * (1.0 + cand_norm * col_norms[j])
        });
        if !feasible {
            continue;
        }
        let dist = {
            let diff = vecops::sub(&candidate, inst.p());
            vecops::dot(&diff, &diff)
        };
        if best.as_ref().is_none_or(|(d, _)| dist < *d) {
            best = Some((dist, candidate));
        }
    }

    best.map(|(_, cand)| cand)
        .ok_or(QpError::NoFeasibleCandidate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn inst<'a>(p: &'a [f64], cols: &'a [Vec<f64>]) -> QpInstance<'a> {
        QpInstance::new(p, cols.iter().map(|c| c.as_slice()).collect()).unwrap()
    }

    #[test]
    fn refuses_large_instances() {
        let p = vec![0.0; 2];
        let cols: Vec<Vec<f64>> = (0..13).map(|_| vec![1.0, 0.0]).collect();
        match oracle_solve(&inst(&p, &cols)) {
            Err(QpError::TooManyConstraints { got: 13, max }) => {
                assert_eq!(max, ORACLE_MAX_CONSTRAINTS);
            }
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn feasible_input_is_returned_unchanged() {
        let p = [1.0, 1.0];
        let cols = vec![vec![1.0, 0.0]];
        assert_eq!(oracle_solve(&inst(&p, &cols)).unwrap(), p.to_vec());
    }

    #[test]
    fn scalar_projection() {
        let p = [-1.0];
        let cols = vec![vec![1.0]];
        let got = oracle_solve(&inst(&p, &cols)).unwrap();
        assert!((got[0]).abs() <= 1e-12);
    }

    #[test]
    fn duplicated_columns_do_not_break_enumeration() {
        // the pair {0,1} is singular and skipped; the singletons carry it
        let p = [-2.0, 1.0];
        let cols = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
        let got = oracle_solve(&inst(&p, &cols)).unwrap();
        assert!((got[0]).abs() <= 1e-9);
        assert!((got[1] - 1.0).abs() <= 1e-9);
    }
}
