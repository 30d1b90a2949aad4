//! Fast invariant suite behind the `selftest` subcommand: a desk-check of
//! the solver, gradients, partitioning, memory bounds and determinism that
//! runs in seconds. The full acceptance suite lives in the test targets.

use flsim_core::data::{
    dirichlet_partition, gen_synthetic, mean_shard_label_entropy, partition_is_exact, Dataset,
};
use flsim_core::flcore::{mem_red, run, sample_active, MemoryState, RunConfig, Simulation};
use flsim_core::model::{self, Architecture};
use flsim_core::qp::{correct, oracle_solve, QpInstance};
use flsim_core::rng::rng_from;
use flsim_core::strategies::StrategyKind;
use flsim_core::vecops;
use rand::Rng;

type Check = (&'static str, fn() -> Result<(), String>);

pub const CHECKS: &[Check] = &[
    ("qp_oracle_agreement", qp_oracle_agreement),
    ("gradient_finite_differences", gradient_finite_differences),
    ("partition_exactness", partition_exactness),
    ("memory_bound_fuzz", memory_bound_fuzz),
    ("run_determinism", run_determinism),
    ("communication_accounting", communication_accounting),
    ("reduction_equivalence", reduction_equivalence),
];

/// Run every check, printing one line each; returns `true` when all pass.
pub fn run_selftest() -> bool {
    let mut ok = true;
    for (name, check) in CHECKS {
        match check() {
            Ok(()) => println!("selftest {name}: PASS"),
            Err(msg) => {
                ok = false;
                println!("selftest {name}: FAIL ({msg})");
            }
        }
    }
    ok
}

fn qp_oracle_agreement() -> Result<(), String> {
    let mut rng = rng_from(0xA11CE);
    for case in 0..200 {
        let d = rng.gen_range(1..=6);
        let c = rng.gen_range(0..=4);
        let p: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let cols: Vec<Vec<f64>> = (0..c)
            .map(|_| (0..d).map(|_| rng.gen_range(-1.5..1.5)).collect())
            .collect();
        let inst = QpInstance::new(&p, cols.iter().map(|v| v.as_slice()).collect())
            .map_err(|e| e.to_string())?;
        // near-degenerate cones make coordinate descent contract very
        // slowly; the generous budget keeps this a correctness check rather
        // than a speed check
        let got = correct(&inst, 1e-10, 5_000_000).map_err(|e| e.to_string())?;
        let want = oracle_solve(&inst).map_err(|e| e.to_string())?;
        let diff = vecops::max_abs_diff(&got, &want);
        let tol = 1e-6 * (1.0 + vecops::norm(&p));
        if diff > tol {
            return Err(format!("case {case}: diff {diff} > {tol}"));
        }
    }
    Ok(())
}

fn gradient_finite_differences() -> Result<(), String> {
    for arch in [
        Architecture::logistic(8, 4),
        Architecture::mlp(8, vec![10, 6], 4),
    ] {
        let params = model::init_params(&arch, 3);
        let ds = gen_synthetic(4, 8, 4, 5);
        let idx: Vec<usize> = (0..ds.len()).collect();
        let batch = ds.gather(&idx).map_err(|e| e.to_string())?;
        let (_, grad) = model::loss_and_grad(&arch, &params, &batch).map_err(|e| e.to_string())?;
        let mut rng = rng_from(8);
        let h = 1e-5;
        for _ in 0..30 {
            let k = rng.gen_range(0..params.len());
            let mut plus = params.clone();
            plus[k] += h;
            let mut minus = params.clone();
            minus[k] -= h;
            let (lp, _) = model::loss_and_grad(&arch, &plus, &batch).map_err(|e| e.to_string())?;
            let (lm, _) = model::loss_and_grad(&arch, &minus, &batch).map_err(|e| e.to_string())?;
            let fd = (lp - lm) / (2.0 * h);
            if (grad[k] - fd).abs() > 1e-5 * (grad[k].abs() + fd.abs() + 1e-8) {
                return Err(format!("coordinate {k}: analytic {} vs fd {fd}", grad[k]));
            }
        }
    }
    Ok(())
}

fn partition_exactness() -> Result<(), String> {
    let ds = gen_synthetic(10, 3, 60, 2);
    let mut entropies = Vec::new();
    for &omega in &[1.0, 0.1, 0.01] {
        let mut acc = 0.0;
        for seed in 0..3 {
            let p = dirichlet_partition(&ds, 30, omega, seed).map_err(|e| e.to_string())?;
            if !partition_is_exact(&p, ds.len()) {
                return Err(format!("omega {omega} seed {seed}: partition not exact"));
            }
            acc += mean_shard_label_entropy(&ds, &p);
        }
        entropies.push(acc / 3.0);
    }
    if !(entropies[0] >= entropies[1] && entropies[1] >= entropies[2]) {
        return Err(format!("entropy not monotone: {entropies:?}"));
    }
    Ok(())
}

fn memory_bound_fuzz() -> Result<(), String> {
    let (n, s, m) = (50, 5, 10);
    let mut mem = MemoryState::new(n);
    for t in 0..2000 {
        let sampled = sample_active(n, s, 7, t);
        let evicted = mem_red(&mut mem, m, &sampled);
        if mem.buf().len() > m {
            return Err(format!("round {t}: buffer exceeded {m}"));
        }
        for v in evicted {
            if sampled.binary_search(&v).is_ok() {
                return Err(format!("round {t}: evicted active worker {v}"));
            }
            if mem.counters()[v] != 0 {
                return Err(format!("round {t}: evicted counter not reset"));
            }
        }
        let updates: std::collections::BTreeMap<usize, &[f64]> = sampled
            .iter()
            .map(|&i| (i, [1.0, 2.0].as_slice()))
            .collect();
        mem.absorb_round(&updates, 0.5);
        mem.clear_new_buf();
        if mem.column_ids() != mem.buf().iter().copied().collect::<Vec<_>>() {
            return Err(format!("round {t}: column keyset != buffer"));
        }
    }
    Ok(())
}

fn tiny_cfg(strategy: StrategyKind) -> RunConfig {
    RunConfig {
        eta_l: 0.05,
        eta_g: 1.0,
        beta1: 0.5,
        beta2: 0.5,
        sync_interval: 2,
        active_workers: 3,
        num_workers: 10,
        memory_size: if strategy.uses_memory() { 5 } else { 0 },
        rounds: 4,
        omega: 0.5,
        batch_size: 8,
        seed: 11,
        eval_every: 1,
        ..RunConfig::defaults(Architecture::logistic(6, 3), strategy)
    }
}

fn tiny_data() -> (Dataset, Dataset) {
    (gen_synthetic(3, 6, 30, 1), gen_synthetic(3, 6, 8, 2))
}

fn run_determinism() -> Result<(), String> {
    let (train, test) = tiny_data();
    let a = run(tiny_cfg(StrategyKind::Gradma), train.clone(), test.clone())
        .map_err(|e| e.to_string())?;
    let b = run(tiny_cfg(StrategyKind::Gradma), train, test).map_err(|e| e.to_string())?;
    if !crate::metrics::rows_identical(&a, &b) {
        return Err("identical configs produced different metric streams".into());
    }
    Ok(())
}

fn communication_accounting() -> Result<(), String> {
    let (train, test) = tiny_data();
    for strategy in [
        StrategyKind::FedAvg,
        StrategyKind::Mifam,
        StrategyKind::Gradma,
    ] {
        let cfg = tiny_cfg(strategy);
        let per_dir = (cfg.active_workers * cfg.architecture.param_count() * 8) as u64;
        let rows = run(cfg, train.clone(), test.clone()).map_err(|e| e.to_string())?;
        for row in rows {
            if row.uplink_bytes != per_dir || row.downlink_bytes != per_dir {
                return Err(format!(
                    "{strategy}: round {} bytes {}/{} != {per_dir}",
                    row.round, row.uplink_bytes, row.downlink_bytes
                ));
            }
        }
    }
    Ok(())
}

fn reduction_equivalence() -> Result<(), String> {
    let (train, test) = tiny_data();
    let mut gs = tiny_cfg(StrategyKind::GradmaS);
    gs.memory_size = 0;
    let favgm = tiny_cfg(StrategyKind::FedAvgM);
    let mut a = Simulation::new(gs, train.clone(), test.clone()).map_err(|e| e.to_string())?;
    let mut b = Simulation::new(favgm, train, test).map_err(|e| e.to_string())?;
    for t in 0..4 {
        a.round().map_err(|e| e.to_string())?;
        b.round().map_err(|e| e.to_string())?;
        let diff = vecops::max_abs_diff(a.params(), b.params());
        if diff > 1e-12 {
            return Err(format!("round {t}: trajectories differ by {diff}"));
        }
    }
    Ok(())
}
