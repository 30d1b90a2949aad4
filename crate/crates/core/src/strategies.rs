//! Strategy lattice: every baseline is one combination of a local rule and a
//! server rule over the shared round engine, which is what makes the
//! equivalences (FedProx at mu = 0 vs FedAvg, memory size 0 vs FedAvgM, and
//! so on) hold bit-for-bit under a shared seed.

use std::fmt;
use std::str::FromStr;

use crate::flcore::RunConfig;
use crate::vecops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyKind {
    FedAvg,
    FedProx,
    FedAvgM,
    FedProxM,
    Mifa,
    Mifam,
    GradmaW,
    GradmaS,
    Gradma,
}

pub const ALL_STRATEGIES: [StrategyKind; 9] = [
    StrategyKind::FedAvg,
    StrategyKind::FedProx,
    StrategyKind::FedAvgM,
    StrategyKind::FedProxM,
    StrategyKind::Mifa,
    StrategyKind::Mifam,
    StrategyKind::GradmaW,
    StrategyKind::GradmaS,
    StrategyKind::Gradma,
];

impl StrategyKind {
    pub fn tag(&self) -> &'static str {
        match self {
            StrategyKind::FedAvg => "fedavg",
            StrategyKind::FedProx => "fedprox",
            StrategyKind::FedAvgM => "fedavgm",
            StrategyKind::FedProxM => "fedproxm",
            StrategyKind::Mifa => "mifa",
            StrategyKind::Mifam => "mifam",
            StrategyKind::GradmaW => "gradma_w",
            StrategyKind::GradmaS => "gradma_s",
            StrategyKind::Gradma => "gradma",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        ALL_STRATEGIES.iter().copied().find(|s| s.tag() == tag)
    }

    /// Resolve the round behavior for a config. The momentum-free members
    /// pin `beta1 = 0` regardless of the configured value; MIFA is the
    /// `beta1 = 0` point of the MIFAM path by definition.
    pub fn plan(&self, cfg: &RunConfig) -> RoundPlan {
        use ServerRule::*;
        let (local, server) = match self {
            StrategyKind::FedAvg => (LocalRule::Sgd { mu: 0.0 }, Momentum { beta1: 0.0 }),
            StrategyKind::FedProx => (LocalRule::Sgd { mu: cfg.mu }, Momentum { beta1: 0.0 }),
            StrategyKind::FedAvgM => (LocalRule::Sgd { mu: 0.0 }, Momentum { beta1: cfg.beta1 }),
            StrategyKind::FedProxM => {
                (LocalRule::Sgd { mu: cfg.mu }, Momentum { beta1: cfg.beta1 })
            }
            StrategyKind::Mifa => (LocalRule::Sgd { mu: 0.0 }, MifaMomentum { beta1: 0.0 }),
            StrategyKind::Mifam => (
                LocalRule::Sgd { mu: 0.0 },
                MifaMomentum { beta1: cfg.beta1 },
            ),
            StrategyKind::GradmaW => (LocalRule::QpCorrected, Average),
            StrategyKind::GradmaS => (
                LocalRule::Sgd { mu: 0.0 },
                MemoryQp {
                    beta1: cfg.beta1,
                    beta2: cfg.beta2,
                },
            ),
            StrategyKind::Gradma => (
                LocalRule::QpCorrected,
                MemoryQp {
                    beta1: cfg.beta1,
                    beta2: cfg.beta2,
                },
            ),
        };
        RoundPlan { local, server }
    }

    pub fn uses_memory(&self) -> bool {
        matches!(self, StrategyKind::GradmaS | StrategyKind::Gradma)
    }

    pub fn uses_mifa_state(&self) -> bool {
        matches!(self, StrategyKind::Mifa | StrategyKind::Mifam)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::from_tag(s).ok_or_else(|| {
            let known: Vec<&str> = ALL_STRATEGIES.iter().map(|s| s.tag()).collect();
            format!("unknown strategy `{s}` (known: {})", known.join(", "))
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub enum LocalRule {
    /// Plain SGD, with an optional proximal pull toward the broadcast point.
    Sgd { mu: f64 },
    /// QP-corrected steps.
    QpCorrected,
}

#[derive(Debug, Clone, Copy)]
pub enum ServerRule {
    /// `x <- x - eta_g * mean(d_i)`.
    Average,
    /// `m <- beta1 m + mean(d_i); x <- x - eta_g m`.
    Momentum { beta1: f64 },
    /// Running all-worker mean of latest updates, then momentum.
    MifaMomentum { beta1: f64 },
    /// Memory-corrected momentum (the gradient-memory server).
    MemoryQp { beta1: f64, beta2: f64 },
}

impl ServerRule {
    pub fn effective_beta1(&self) -> f64 {
        match self {
            ServerRule::Average => 0.0,
            ServerRule::Momentum { beta1 }
            | ServerRule::MifaMomentum { beta1 }
            | ServerRule::MemoryQp { beta1, .. } => *beta1,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RoundPlan {
    pub local: LocalRule,
    pub server: ServerRule,
}

/// Per-worker latest transmitted update plus the running all-worker mean.
/// Storage is deliberately N x d, as the method is defined; the memory-
/// bounded alternative is what the gradient-memory server provides.
#[derive(Debug, Clone)]
pub struct MifaState {
    pub g_old: Vec<Vec<f64>>,
    pub d_running: Vec<f64>,
}

impl MifaState {
    pub fn new(num_workers: usize, dim: usize) -> Self {
        Self {
            g_old: vec![vecops::zeros(dim); num_workers],
            d_running: vecops::zeros(dim),
        }
    }

    pub fn mean_g_old(&self) -> Vec<f64> {
        let slices: Vec<&[f64]> = self.g_old.iter().map(|v| v.as_slice()).collect();
        vecops::mean(&slices)
    }
}

/// Replace each worker's transmitted update `u_i` by the difference from its
/// last transmission and remember `u_i`; the wire size is unchanged.
pub fn mifa_transform(state: &mut MifaState, updates: &mut [(usize, Vec<f64>)]) {
    for (id, delta) in updates.iter_mut() {
        let u = delta.clone();
        let mut sent = u.clone();
        vecops::axpy(&mut sent, -1.0, &state.g_old[*id]);
        state.g_old[*id] = u;
        *delta = sent;
    }
}

/// Fold the received differences into the running mean:
/// `d <- d + (1/N) sum_i delta_i`.
pub fn mifa_accumulate(state: &mut MifaState, updates: &[(usize, Vec<f64>)], num_workers: usize) {
    let d = state.d_running.len();
    let mut inc = vecops::zeros(d);
    for (_, delta) in updates {
        vecops::axpy(&mut inc, 1.0, delta);
    }
    vecops::axpy(&mut state.d_running, 1.0 / num_workers as f64, &inc);
}
