//! Property tests for the projection QP and the data partition.

use flsim_core::data::{dirichlet_partition, gen_synthetic, partition_is_exact};
use flsim_core::qp::{self, build_gram, correct, oracle_solve, solve_dual, QpError, QpInstance};
use flsim_core::rng::rng_from;
use flsim_core::vecops;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

fn instance_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<Vec<f64>>)> {
    (1usize..6, 0usize..5).prop_flat_map(|(d, c)| {
        (
            prop::collection::vec(-2.0..2.0f64, d),
            prop::collection::vec(prop::collection::vec(-2.0..2.0f64, d), c),
        )
    })
}

fn make<'a>(p: &'a [f64], cols: &'a [Vec<f64>]) -> QpInstance<'a> {
    QpInstance::new(p, cols.iter().map(|c| c.as_slice()).collect()).unwrap()
}

proptest! {
    #[test]
    fn corrected_vector_is_feasible_and_complementary((p, cols) in instance_strategy()) {
        let inst = make(&p, &cols);
        let sys = build_gram(&inst);
        let sol = match solve_dual(&sys, 1e-10, 100_000) {
            Ok(s) => s,
            Err(QpError::NonConvergence { .. }) => return Ok(()), // pathological conditioning
            Err(e) => panic!("{e}"),
        };
        let fixed = qp::recover_primal(&inst, &sol.z);
        let fixed_norm = vecops::norm(&fixed);
        for (j, col) in cols.iter().enumerate() {
            let ip = vecops::dot(&fixed, col);
            let scale = 1.0 + fixed_norm * vecops::norm(col);
            prop_assert!(ip >= -1e-6 * scale, "constraint {j} violated: {ip}");
            let slack = (sol.z[j] * ip).abs();
            prop_assert!(slack <= 1e-6 * (1.0 + sol.z[j] * scale), "slackness {j}: {slack}");
        }
    }

    #[test]
    fn correction_is_scale_covariant((p, cols) in instance_strategy(), alpha in 0.1..10.0f64) {
        let inst = make(&p, &cols);
        let base = match correct(&inst, 1e-12, 100_000) {
            Ok(v) => v,
            Err(QpError::NonConvergence { .. }) => return Ok(()),
            Err(e) => panic!("{e}"),
        };
        let ps: Vec<f64> = p.iter().map(|v| alpha * v).collect();
        let colss: Vec<Vec<f64>> = cols
            .iter()
            .map(|c| c.iter().map(|v| alpha * v).collect())
            .collect();
        let scaled_inst = make(&ps, &colss);
        let scaled = match correct(&scaled_inst, 1e-12, 100_000) {
            Ok(v) => v,
            Err(QpError::NonConvergence { .. }) => return Ok(()),
            Err(e) => panic!("{e}"),
        };
        let want: Vec<f64> = base.iter().map(|v| alpha * v).collect();
        let tol = 1e-10 * (1.0 + vecops::norm(&want));
        prop_assert!(vecops::max_abs_diff(&scaled, &want) <= tol);
    }

    #[test]
    fn correction_fixes_feasible_points((p, cols) in instance_strategy()) {
        let feasible = cols
            .iter()
            .all(|c| vecops::dot(&p, c) >= 0.0);
        prop_assume!(feasible);
        let inst = make(&p, &cols);
        let got = correct(&inst, 1e-10, 100_000).unwrap();
        prop_assert!(vecops::max_abs_diff(&got, &p) <= 1e-12);
    }

    #[test]
    fn partition_stays_exact(n_workers in 1usize..25, omega in 0.01..10.0f64, seed in any::<u64>()) {
        let ds = gen_synthetic(4, 3, 30, 17);
        let p = dirichlet_partition(&ds, n_workers, omega, seed).unwrap();
        prop_assert!(partition_is_exact(&p, ds.len()));
    }
}

/// Seeded random instances in the acceptance regime (entries ~ N(0,1), a
/// tenth of the columns zeroed): the coordinate-descent path must agree with
/// the exhaustive oracle.
#[test]
fn random_instances_agree_with_oracle() {
    let mut rng = rng_from(0xFEED);
    for case in 0..300 {
        let d = rng.gen_range(1..=8);
        let c = rng.gen_range(0..=4);
        let p: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let cols: Vec<Vec<f64>> = (0..c)
            .map(|_| {
                if rng.gen_bool(0.1) {
                    vec![0.0; d]
                } else {
                    (0..d).map(|_| StandardNormal.sample(&mut rng)).collect()
                }
            })
            .collect();
        let inst = make(&p, &cols);
        let got = correct(&inst, 1e-10, 1_000_000).expect("solver converges on generic instances");
        let want = oracle_solve(&inst).expect("oracle finds the optimum");
        let tol = 1e-6 * (1.0 + vecops::norm(&p));
        let diff = vecops::max_abs_diff(&got, &want);
        assert!(diff <= tol, "case {case}: d={d} c={c} diff={diff}");
    }
}
