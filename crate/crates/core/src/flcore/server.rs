//! Momentum-corrected server update.
//!
//! One round: average the received updates, fold them into the momentum,
//! refresh the memory columns, then project the momentum onto the cone
//! positively correlated with every memorized column (the server QP) and
//! descend. With an empty memory the correction is the identity and the
//! step reduces exactly to the FedAvgM server step.

use std::collections::BTreeMap;

use crate::qp::{self, QpError};
use crate::vecops;

use super::memory::MemoryState;

/// How often (in rounds) the Gram cache is audited against a recompute.
pub const GRAM_CHECK_EVERY: usize = 100;

#[derive(Debug, Clone)]
pub struct ServerState {
    pub x: Vec<f64>,
    /// Corrected momentum; zero at round 0.
    pub m_tilde: Vec<f64>,
    pub round: usize,
    pub memory: MemoryState,
    /// Previous round's dual solution keyed by worker id, used to warm-start
    /// the server QP (the memory changes slowly between rounds).
    warm_z: BTreeMap<usize, f64>,
}

impl ServerState {
    pub fn new(x0: Vec<f64>, num_workers: usize) -> Self {
        let d = x0.len();
        Self {
            x: x0,
            m_tilde: vecops::zeros(d),
            round: 0,
            memory: MemoryState::new(num_workers),
            warm_z: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ServerOpts {
    pub eta_g: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub qp_tol: f64,
}

/// Per-round quantities the caller needs for metrics and identity checks.
#[derive(Debug, Clone)]
pub struct ServerRoundInfo {
    /// Mean of the received updates.
    pub d_mean: Vec<f64>,
    /// Momentum before correction, `beta1 * m~_t + d`.
    pub m_pre: Vec<f64>,
    /// Momentum actually applied.
    pub m_tilde: Vec<f64>,
    pub qp_sweeps: Option<u64>,
    pub qp_fell_back: bool,
}

/// One memory-corrected server round over `updates` (ascending worker id;
/// every sender must already be buffered by `mem_red`). Advances `x` and
/// `m_tilde`, clears `new_buf`, and leaves the round counter to the caller.
/// On QP non-convergence the uncorrected momentum is applied and the event
/// is logged.
pub fn server_update(
    server: &mut ServerState,
    updates: &[(usize, Vec<f64>)],
    opts: &ServerOpts,
) -> ServerRoundInfo {
    let slices: Vec<&[f64]> = updates.iter().map(|(_, v)| v.as_slice()).collect();
    let d_mean = vecops::mean(&slices);
    vecops::momentum_step(&mut server.m_tilde, opts.beta1, &d_mean);
    let m_pre = server.m_tilde.clone();

    let mut qp_sweeps = None;
    let mut qp_fell_back = false;
    if !server.memory.is_empty() {
        let active: BTreeMap<usize, &[f64]> =
            updates.iter().map(|(i, v)| (*i, v.as_slice())).collect();
        server.memory.absorb_round(&active, opts.beta2);
        if (server.round + 1).is_multiple_of(GRAM_CHECK_EVERY) {
            server.memory.refresh_gram();
        }

        let ids: Vec<usize> = server.memory.buf().iter().copied().collect();
        let sys = server.memory.gram_system(&m_pre);
        let z0: Vec<f64> = ids
            .iter()
            .map(|i| server.warm_z.get(i).copied().unwrap_or(0.0))
            .collect();
        match qp::solve_dual_warm(&sys, &z0, opts.qp_tol, qp::default_max_sweeps(ids.len())) {
            Ok(sol) => {
                let mut corrected = m_pre.clone();
                for (&id, &zj) in ids.iter().zip(&sol.z) {
                    if zj != 0.0 {
                        vecops::axpy(&mut corrected, zj, server.memory.column(id));
                    }
                }
                server.m_tilde = corrected;
                server.warm_z = ids.iter().copied().zip(sol.z.iter().copied()).collect();
                qp_sweeps = Some(sol.sweeps as u64);
            }
            Err(QpError::NonConvergence { best }) => {
                log::warn!(
                    "server QP stalled at residual {:.3e} after {} sweeps; using uncorrected momentum",
                    best.kkt_residual,
                    best.sweeps
                );
                server.warm_z = ids.iter().copied().zip(best.z.iter().copied()).collect();
                qp_sweeps = Some(best.sweeps as u64);
                qp_fell_back = true;
            }
            Err(e) => {
                log::warn!("server QP failed ({e}); using uncorrected momentum");
                qp_fell_back = true;
            }
        }
    }

    let m_tilde = server.m_tilde.clone();
    vecops::axpy(&mut server.x, -opts.eta_g, &m_tilde);
    server.memory.clear_new_buf();
    ServerRoundInfo {
        d_mean,
        m_pre,
        m_tilde,
        qp_sweeps,
        qp_fell_back,
    }
}
