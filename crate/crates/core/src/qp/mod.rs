//! Constrained projection QP solved through its non-negative dual.
//!
//! Primal: given a vector `p` and constraint columns `M[0..C]`, find the
//! `p~` closest to `p` (least squares) with `<p~, M[j]> >= 0` for all `j`.
//! The dual in `z >= 0` is `min 1/2 z' (M'M) z + (M'p)' z`, a C-dimensional
//! problem (C is 3 on the worker side and at most the memory size on the
//! server side, while the primal dimension is the model size). The primal
//! solution is recovered as `p~ = M z* + p`.
//!
//! The dual is solved by cyclic coordinate descent with per-coordinate
//! clamping, `z_j <- max(0, z_j - (Az + b)_j / A[j][j])`, which is exact per
//! coordinate. Zero columns (`A[j][j] = 0`) impose no constraint and their
//! coordinate is pinned at zero; this happens structurally at local step 0
//! where the iterate-difference column is identically zero.

mod oracle;

pub use oracle::{oracle_solve, ORACLE_MAX_CONSTRAINTS};

use thiserror::Error;

use crate::vecops;

/// Default KKT residual tolerance.
pub const DEFAULT_TOL: f64 = 1e-8;
/// Default sweep budget per constraint; the dual dimension is tiny so the
/// cost is negligible next to gradient computation.
pub const SWEEPS_PER_CONSTRAINT: usize = 1000;

pub fn default_max_sweeps(num_constraints: usize) -> usize {
    SWEEPS_PER_CONSTRAINT * num_constraints.max(1)
}

#[derive(Debug, Error)]
pub enum QpError {
    #[error("constraint column {index} has dimension {got}, expected {expected}")]
    DimensionMismatch {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("non-finite entry in {what}")]
    NonFinite { what: &'static str },
    #[error("dual solve did not reach tolerance within {sweeps} sweeps (residual {residual:.3e})",
            sweeps = best.sweeps, residual = best.kkt_residual)]
    NonConvergence { best: DualSolution },
    #[error("oracle refuses {got} constraints (max {max})")]
    TooManyConstraints { got: usize, max: usize },
    #[error("oracle found no feasible active-set candidate")]
    NoFeasibleCandidate,
}

/// The `(p, M)` pair: the vector to correct and the constraint columns.
#[derive(Debug, Clone)]
pub struct QpInstance<'a> {
    p: &'a [f64],
    cols: Vec<&'a [f64]>,
}

impl<'a> QpInstance<'a> {
    /// `C = 0` (no columns) is permitted and means "no correction".
    pub fn new(p: &'a [f64], cols: Vec<&'a [f64]>) -> Result<Self, QpError> {
        if !vecops::all_finite(p) {
            return Err(QpError::NonFinite { what: "p" });
        }
        for (index, col) in cols.iter().enumerate() {
            if col.len() != p.len() {
                return Err(QpError::DimensionMismatch {
                    index,
                    got: col.len(),
                    expected: p.len(),
                });
            }
            if !vecops::all_finite(col) {
                return Err(QpError::NonFinite { what: "M" });
            }
        }
        Ok(Self { p, cols })
    }

    pub fn dim(&self) -> usize {
        self.p.len()
    }

    pub fn num_constraints(&self) -> usize {
        self.cols.len()
    }

    pub fn p(&self) -> &[f64] {
        self.p
    }

    pub fn col(&self, j: usize) -> &[f64] {
        self.cols[j]
    }
}

/// Dual system: `a = M'M` (C x C, symmetric PSD), `b = M'p`.
#[derive(Debug, Clone, PartialEq)]
pub struct GramSystem {
    pub a: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl GramSystem {
    pub fn num_constraints(&self) -> usize {
        self.b.len()
    }

    /// `Az + b`, the dual gradient. Uses row `j` for column `j`; `a` is
    /// symmetric by construction.
    pub fn gradient(&self, z: &[f64]) -> Vec<f64> {
        let mut g = self.b.clone();
        for (j, &zj) in z.iter().enumerate() {
            if zj != 0.0 {
                for (gi, &aji) in g.iter_mut().zip(&self.a[j]) {
                    *gi += aji * zj;
                }
            }
        }
        g
    }
}

/// Each pair is computed once and mirrored, so `a` is symmetric by
/// construction.
#[allow(clippy::needless_range_loop)]
pub fn build_gram(inst: &QpInstance) -> GramSystem {
    let c = inst.num_constraints();
    let mut a = vec![vec![0.0; c]; c];
    let mut b = vec![0.0; c];
    for i in 0..c {
        for j in i..c {
            let v = vecops::dot(inst.col(i), inst.col(j));
            a[i][j] = v;
            a[j][i] = v;
        }
        b[i] = vecops::dot(inst.p(), inst.col(i));
    }
    GramSystem { a, b }
}

#[derive(Debug, Clone)]
pub struct DualSolution {
    /// Non-negative dual variable; clamped, never merely "close to" zero.
    pub z: Vec<f64>,
    pub kkt_residual: f64,
    pub sweeps: usize,
}

/// Residual `max_j |min(z_j, g_j)|` where `g = Az + b`. Covers primal
/// feasibility (g_j < 0 at z_j = 0), dual feasibility (g_j < 0 at z_j > 0)
/// and complementary slackness (both positive) in one number.
pub fn kkt_residual(z: &[f64], g: &[f64]) -> f64 {
    z.iter()
        .zip(g)
        .map(|(&zj, &gj)| zj.min(gj).abs())
        .fold(0.0, f64::max)
}

pub fn solve_dual(sys: &GramSystem, tol: f64, max_sweeps: usize) -> Result<DualSolution, QpError> {
    let c = sys.num_constraints();
    solve_dual_warm(sys, &vec![0.0; c], tol, max_sweeps)
}

/// Coordinate descent from a caller-supplied starting point (the server-side
/// solve is warm-started from the previous round).
///
/// Convergence is declared at `residual <= tol * max_j |b_j|`: the residual
/// carries the units of `b`, so the tolerance is relative to the instance
/// scale, and the whole iteration is exactly covariant under scaling of
/// `(p, M)`. A zero `b` means the uncorrected point is already feasible and
/// `z = 0` is returned outright.
pub fn solve_dual_warm(
    sys: &GramSystem,
    z0: &[f64],
    tol: f64,
    max_sweeps: usize,
) -> Result<DualSolution, QpError> {
    assert!(tol > 0.0, "tolerance must be positive");
    let c = sys.num_constraints();
    assert_eq!(z0.len(), c);
    if c == 0 {
        return Ok(DualSolution {
            z: vec![],
            kkt_residual: 0.0,
            sweeps: 0,
        });
    }
    let b_scale = sys.b.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    if b_scale == 0.0 {
        return Ok(DualSolution {
            z: vec![0.0; c],
            kkt_residual: 0.0,
            sweeps: 0,
        });
    }
    let threshold = tol * b_scale;

    let mut z: Vec<f64> = z0.iter().map(|&v| v.max(0.0)).collect();
    for (j, zj) in z.iter_mut().enumerate() {
        if sys.a[j][j] <= 0.0 {
            *zj = 0.0; // zero column carries no constraint
        }
    }
    let mut g = sys.gradient(&z);
    let mut sweeps = 0;

    while sweeps < max_sweeps {
        for j in 0..c {
            let ajj = sys.a[j][j];
            if ajj <= 0.0 {
                continue;
            }
            let znew = (z[j] - g[j] / ajj).max(0.0);
            let delta = znew - z[j];
            if delta != 0.0 {
                z[j] = znew;
                for (gi, &aji) in g.iter_mut().zip(&sys.a[j]) {
                    *gi += delta * aji;
                }
            }
        }
        sweeps += 1;
        // The incrementally maintained gradient drifts; refresh before any
        // convergence claim and periodically in between.
        if sweeps % 64 == 0 {
            g = sys.gradient(&z);
        }
        if kkt_residual(&z, &g) <= threshold {
            let exact = sys.gradient(&z);
            let res = kkt_residual(&z, &exact);
            if res <= threshold {
                return Ok(DualSolution {
                    z,
                    kkt_residual: res,
                    sweeps,
                });
            }
            g = exact;
        }
    }

    let exact = sys.gradient(&z);
    let res = kkt_residual(&z, &exact);
    if res <= threshold {
        return Ok(DualSolution {
            z,
            kkt_residual: res,
            sweeps,
        });
    }
    Err(QpError::NonConvergence {
        best: DualSolution {
            z,
            kkt_residual: res,
            sweeps,
        },
    })
}

/// `p~ = M z + p`.
pub fn recover_primal(inst: &QpInstance, z: &[f64]) -> Vec<f64> {
    let mut out = inst.p().to_vec();
    for (j, &zj) in z.iter().enumerate() {
        if zj != 0.0 {
            vecops::axpy(&mut out, zj, inst.col(j));
        }
    }
    out
}

/// Solve the dual and recover the corrected vector. With no columns the
/// input is returned unchanged. Non-convergence is propagated with the best
/// iterate attached; callers decide whether to use it or fall back.
pub fn correct(inst: &QpInstance, tol: f64, max_sweeps: usize) -> Result<Vec<f64>, QpError> {
    if inst.num_constraints() == 0 {
        return Ok(inst.p().to_vec());
    }
    let sys = build_gram(inst);
    let sol = solve_dual(&sys, tol, max_sweeps)?;
    Ok(recover_primal(inst, &sol.z))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{derive, rng_from};
    use rand::Rng;

    fn inst<'a>(p: &'a [f64], cols: &'a [Vec<f64>]) -> QpInstance<'a> {
        QpInstance::new(p, cols.iter().map(|c| c.as_slice()).collect()).unwrap()
    }

    #[test]
    fn gram_orthogonal_column() {
        let p = [1.0, 0.0];
        let cols = vec![vec![0.0, 1.0]];
        let sys = build_gram(&inst(&p, &cols));
        assert_eq!(sys.a, vec![vec![1.0]]);
        assert_eq!(sys.b, vec![0.0]);
    }

    #[test]
    fn gram_one_dimensional() {
        let p = [-1.0];
        let cols = vec![vec![1.0]];
        let sys = build_gram(&inst(&p, &cols));
        assert_eq!(sys.a, vec![vec![1.0]]);
        assert_eq!(sys.b, vec![-1.0]);
    }

    #[test]
    fn gram_hand_checked() {
        let p = [1.0, 2.0, 3.0];
        let cols = vec![vec![1.0, 0.0, 0.0], vec![1.0, 1.0, 0.0]];
        let sys = build_gram(&inst(&p, &cols));
        assert_eq!(sys.a, vec![vec![1.0, 1.0], vec![1.0, 2.0]]);
        assert_eq!(sys.b, vec![1.0, 3.0]);
    }

    #[test]
    fn gram_is_symmetric_and_psd_at_test_scale() {
        let mut rng = rng_from(derive(11, &[99]));
        for _ in 0..50 {
            let d = rng.gen_range(1..6);
            let c = rng.gen_range(1..5);
            let cols: Vec<Vec<f64>> = (0..c)
                .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let p: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let sys = build_gram(&inst(&p, &cols));
            for i in 0..c {
                assert!(sys.a[i][i] >= 0.0);
                for j in 0..c {
                    let scale = sys.a[i][j].abs().max(1.0);
                    assert!((sys.a[i][j] - sys.a[j][i]).abs() <= 1e-12 * scale);
                }
            }
            // brute-force 2x2 principal minors
            for i in 0..c {
                for j in i + 1..c {
                    let minor = sys.a[i][i] * sys.a[j][j] - sys.a[i][j] * sys.a[j][i];
                    assert!(minor >= -1e-10);
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let p = [1.0, 2.0];
        let cols = [vec![1.0, 0.0], vec![1.0]];
        let err = QpInstance::new(&p, cols.iter().map(|c| c.as_slice()).collect()).unwrap_err();
        match err {
            QpError::DimensionMismatch {
                index,
                got,
                expected,
            } => {
                assert_eq!((index, got, expected), (1, 1, 2));
            }
            other => panic!("unexpected error: {other}"),
        }
    }

    #[test]
    fn dual_inactive_when_b_nonnegative() {
        let sys = GramSystem {
            a: vec![vec![1.0]],
            b: vec![0.0],
        };
        let sol = solve_dual(&sys, 1e-10, 100).unwrap();
        assert_eq!(sol.z, vec![0.0]);
        assert_eq!(sol.kkt_residual, 0.0);
    }

    #[test]
    fn dual_scalar_analytic() {
        // min over z >= 0 of z^2/2 - z has the optimum z = 1
        let sys = GramSystem {
            a: vec![vec![1.0]],
            b: vec![-1.0],
        };
        let sol = solve_dual(&sys, 1e-12, 100).unwrap();
        assert!((sol.z[0] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn dual_matches_oracle_on_random_instance() {
        let mut rng = rng_from(derive(17, &[4, 3]));
        let d = 4;
        let c = 3;
        let cols: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let p: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let instance = inst(&p, &cols);
        let got = correct(&instance, 1e-10, 10_000).unwrap();
        let want = oracle_solve(&instance).unwrap();
        assert!(vecops::max_abs_diff(&got, &want) <= 1e-6);
    }

    #[test]
    fn nonconvergence_carries_best_iterate() {
        // nearly parallel columns make coordinate descent zigzag; two sweeps
        // cannot reach the tolerance
        let e = 1e-9;
        let sys = GramSystem {
            a: vec![vec![1.0, 1.0 - e], vec![1.0 - e, 1.0]],
            b: vec![-1.0, -1.0],
        };
        match solve_dual(&sys, 1e-14, 2) {
            Err(QpError::NonConvergence { best }) => {
                assert_eq!(best.z.len(), 2);
                assert!(best.kkt_residual > 1e-14);
                assert!(best.z.iter().all(|&z| z >= 0.0));
                assert_eq!(best.sweeps, 2);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn correct_is_identity_on_feasible_input() {
        // <p, col> >= 0 for every column, so z* = 0 and p is untouched
        let p = [2.0, 1.0];
        let cols = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        let instance = inst(&p, &cols);
        let got = correct(&instance, 1e-8, 1000).unwrap();
        assert!(vecops::max_abs_diff(&got, &p) <= 1e-12);
    }

    #[test]
    fn correct_scalar_hand_derived() {
        let p = [-1.0];
        let cols = vec![vec![1.0]];
        let got = correct(&inst(&p, &cols), 1e-12, 1000).unwrap();
        assert!((got[0] - 0.0).abs() <= 1e-12);
    }

    #[test]
    fn correct_with_no_columns_returns_input() {
        let p = [3.0, -4.0];
        let instance = QpInstance::new(&p, vec![]).unwrap();
        assert_eq!(correct(&instance, 1e-8, 100).unwrap(), p.to_vec());
    }

    #[test]
    fn zero_column_is_pinned() {
        let p = [1.0, -2.0];
        let cols = vec![vec![0.0, 0.0]];
        let instance = inst(&p, &cols);
        let sys = build_gram(&instance);
        let sol = solve_dual(&sys, 1e-10, 100).unwrap();
        assert_eq!(sol.z, vec![0.0]);
        let got = correct(&instance, 1e-10, 100).unwrap();
        assert_eq!(got, p.to_vec());
        assert_eq!(oracle_solve(&instance).unwrap(), p.to_vec());
    }

    #[test]
    fn warm_start_agrees_with_cold_start() {
        let p = [-1.0, 0.5, -0.25, 2.0];
        let cols = vec![
            vec![1.0, 0.0, 1.0, 0.0],
            vec![0.5, -1.0, 0.0, 1.0],
            vec![0.0, 0.0, 2.0, -1.0],
        ];
        let instance = inst(&p, &cols);
        let sys = build_gram(&instance);
        let cold = solve_dual(&sys, 1e-12, 10_000).unwrap();
        let warm = solve_dual_warm(&sys, &[5.0, 0.0, 1.0], 1e-12, 10_000).unwrap();
        let pc = recover_primal(&instance, &cold.z);
        let pw = recover_primal(&instance, &warm.z);
        assert!(vecops::max_abs_diff(&pc, &pw) <= 1e-9);
    }
}
