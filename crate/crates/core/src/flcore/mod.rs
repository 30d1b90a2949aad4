//! Federated round machinery: worker-side corrected updates, the server's
//! gradient-memory state, and the deterministic outer loop.
//!
//! Within a round the sampled workers run independently on an immutable
//! snapshot of the global parameters (they may execute in parallel); memory
//! reduction and the server update are strictly sequential. All randomness
//! is counter-derived from the run seed, so trajectories are pure functions
//! of `(config, seed)`.

mod memory;
mod server;
mod sim;

pub use memory::{mem_red, MemoryState};
pub use server::{server_update, ServerOpts, ServerRoundInfo, ServerState};
pub use sim::{run, LemmaRecord, MetricsRow, Simulation};

use rand::seq::index::sample as index_sample;
use thiserror::Error;

use crate::data::{batch_iter, DataError, Dataset};
use crate::model::{self, Architecture, ModelError};
use crate::qp::{self, QpError, QpInstance};
use crate::rng::{derive, rng_from, TAG_ANCHOR, TAG_SAMPLE};
use crate::strategies::StrategyKind;
use crate::vecops;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid config value for `{key}`: {reason}")]
    InvalidConfig { key: &'static str, reason: String },
    #[error("run diverged (non-finite loss) at round {round}")]
    Diverged { round: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Qp(#[from] QpError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMode {
    /// Seeded minibatches of `batch_size` (the normal experiment path).
    Minibatch,
    /// Deterministic full-shard gradients, used by invariant tests.
    Full,
}

/// All hyperparameters of one run.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub eta_l: f64,
    pub eta_g: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Local steps per communication round.
    pub sync_interval: usize,
    /// Sampled active workers per round.
    pub active_workers: usize,
    pub num_workers: usize,
    /// Server memory columns; 0 disables the memory entirely, otherwise
    /// `active_workers <= memory_size <= min(d, num_workers)`.
    pub memory_size: usize,
    pub rounds: usize,
    /// Dirichlet concentration for the data partition.
    pub omega: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub strategy: StrategyKind,
    /// Proximal coefficient for the FedProx family.
    pub mu: f64,
    pub architecture: Architecture,
    pub eval_every: usize,
    pub gradient_mode: GradientMode,
    /// Samples used for the round-anchor gradient; larger shards are
    /// seed-subsampled down to this.
    pub anchor_cap: usize,
    /// Ablation switch: run the corrected-update code path without the QP.
    pub disable_worker_qp: bool,
    pub track_lemma1: bool,
    /// Record wall-clock seconds in metrics. Off by default so re-runs of
    /// the same spec produce byte-identical output.
    pub timed: bool,
}

impl RunConfig {
    pub fn defaults(architecture: Architecture, strategy: StrategyKind) -> Self {
        Self {
            eta_l: 0.1,
            eta_g: 1.0,
            beta1: 0.0,
            beta2: 0.0,
            sync_interval: 5,
            active_workers: 1,
            num_workers: 1,
            memory_size: 0,
            rounds: 10,
            omega: 1.0,
            batch_size: 64,
            seed: 1,
            strategy,
            mu: 0.0,
            architecture,
            eval_every: 5,
            gradient_mode: GradientMode::Minibatch,
            anchor_cap: 2048,
            disable_worker_qp: false,
            track_lemma1: false,
            timed: false,
        }
    }

    pub fn validate(&self) -> Result<(), RunError> {
        fn bad(key: &'static str, reason: String) -> RunError {
            RunError::InvalidConfig { key, reason }
        }
        if self.eta_l <= 0.0 || !self.eta_l.is_finite() {
            return Err(bad(
                "eta_l",
                format!("must be positive, got {}", self.eta_l),
            ));
        }
        if self.eta_g <= 0.0 || !self.eta_g.is_finite() {
            return Err(bad(
                "eta_g",
                format!("must be positive, got {}", self.eta_g),
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return Err(bad(
                "beta1",
                format!("must be in [0, 1), got {}", self.beta1),
            ));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(bad(
                "beta2",
                format!("must be in [0, 1), got {}", self.beta2),
            ));
        }
        if self.sync_interval < 1 {
            return Err(bad("sync_interval", "must be >= 1".into()));
        }
        if self.active_workers < 1 || self.active_workers > self.num_workers {
            return Err(bad(
                "active_workers",
                format!(
                    "need 1 <= S <= N, got S={} N={}",
                    self.active_workers, self.num_workers
                ),
            ));
        }
        self.architecture
            .validate()
            .map_err(|e| bad("architecture", e.to_string()))?;
        let d = self.architecture.param_count();
        let m_max = d.min(self.num_workers);
        if self.memory_size != 0
            && (self.memory_size < self.active_workers || self.memory_size > m_max)
        {
            return Err(bad(
                "memory_size",
                format!(
                    "need m = 0 or S <= m <= min(d, N) = {}, got m={}",
                    m_max, self.memory_size
                ),
            ));
        }
        if self.omega.is_nan() || self.omega <= 0.0 {
            return Err(bad(
                "omega",
                format!("must be positive, got {}", self.omega),
            ));
        }
        if self.batch_size < 1 {
            return Err(bad("batch_size", "must be >= 1".into()));
        }
        if self.eval_every < 1 {
            return Err(bad("eval_every", "must be >= 1".into()));
        }
        if self.mu < 0.0 || !self.mu.is_finite() {
            return Err(bad("mu", format!("must be >= 0, got {}", self.mu)));
        }
        Ok(())
    }
}

/// Persistent per-worker state: the last local final iterate (`x'` handed to
/// the next corrected update) and the minibatch step counter.
#[derive(Debug, Clone)]
pub struct WorkerState {
    pub id: usize,
    pub x_prev: Vec<f64>,
    pub step: u64,
}

impl WorkerState {
    pub fn new(id: usize, x0: &[f64]) -> Self {
        Self {
            id,
            x_prev: x0.to_vec(),
            step: 0,
        }
    }
}

/// Uniform sample of `count` distinct worker ids, ascending. Deterministic
/// in `(seed, round)`.
pub fn sample_active(num_workers: usize, count: usize, seed: u64, round: usize) -> Vec<usize> {
    assert!(count <= num_workers);
    let mut rng = rng_from(derive(seed, &[TAG_SAMPLE, round as u64]));
    let mut ids = index_sample(&mut rng, num_workers, count).into_vec();
    ids.sort_unstable();
    ids
}

/// A worker's local loss surface, abstracted so the round machinery can be
/// exercised against closed-form objectives in tests.
pub trait LocalObjective: Sync {
    fn dim(&self) -> usize;
    fn is_empty(&self) -> bool;
    /// Loss and gradient at `x` on the minibatch selected by `step`.
    fn step_grad(&self, x: &[f64], step: u64) -> Result<(f64, Vec<f64>), RunError>;
    /// Gradient at a different point on the same minibatch as `step`.
    fn grad_at(&self, x: &[f64], step: u64) -> Result<Vec<f64>, RunError>;
    /// Round-anchor gradient: the local gradient at the broadcast point,
    /// computed once per round over the anchor scope.
    fn anchor_grad(&self, x: &[f64]) -> Result<Vec<f64>, RunError>;
}

/// The concrete objective: a model over one shard of a dataset.
pub struct ShardObjective<'a> {
    pub arch: &'a Architecture,
    pub data: &'a Dataset,
    pub shard: &'a [usize],
    /// Seed for this worker's minibatch stream.
    pub batch_seed: u64,
    pub batch_size: usize,
    pub mode: GradientMode,
    pub anchor_cap: usize,
    /// Seed for the anchor subsample; varies per (worker, round).
    pub anchor_seed: u64,
}

impl LocalObjective for ShardObjective<'_> {
    fn dim(&self) -> usize {
        self.arch.param_count()
    }

    fn is_empty(&self) -> bool {
        self.shard.is_empty()
    }

    fn step_grad(&self, x: &[f64], step: u64) -> Result<(f64, Vec<f64>), RunError> {
        match self.mode {
            GradientMode::Minibatch => {
                let batch = batch_iter(
                    self.data,
                    self.shard,
                    self.batch_size,
                    self.batch_seed,
                    step,
                )?;
                Ok(model::loss_and_grad(self.arch, x, &batch)?)
            }
            GradientMode::Full => Ok(model::full_loss_and_grad(
                self.arch, x, self.data, self.shard,
            )?),
        }
    }

    fn grad_at(&self, x: &[f64], step: u64) -> Result<Vec<f64>, RunError> {
        match self.mode {
            GradientMode::Minibatch => {
                let batch = batch_iter(
                    self.data,
                    self.shard,
                    self.batch_size,
                    self.batch_seed,
                    step,
                )?;
                Ok(model::loss_and_grad(self.arch, x, &batch)?.1)
            }
            GradientMode::Full => Ok(model::full_grad(self.arch, x, self.data, self.shard)?),
        }
    }

    fn anchor_grad(&self, x: &[f64]) -> Result<Vec<f64>, RunError> {
        if self.shard.len() <= self.anchor_cap {
            return Ok(model::full_grad(self.arch, x, self.data, self.shard)?);
        }
        let mut rng = rng_from(self.anchor_seed);
        let mut picked: Vec<usize> = index_sample(&mut rng, self.shard.len(), self.anchor_cap)
            .into_iter()
            .map(|k| self.shard[k])
            .collect();
        picked.sort_unstable();
        Ok(model::full_grad(self.arch, x, self.data, &picked)?)
    }
}

pub fn worker_anchor_seed(seed: u64, worker: usize, round: usize) -> u64 {
    derive(seed, &[TAG_ANCHOR, worker as u64, round as u64])
}

/// Sweep budget for the worker-side 3-column dual. Thin-angle constraint
/// pairs (the drift column runs nearly opposite the gradient columns during
/// steady descent) make coordinate descent contract slowly, so the budget is
/// well above the generic-case need; one sweep costs a few dozen flops.
pub const WORKER_QP_MAX_SWEEPS: usize = 100_000;

#[derive(Debug, Clone, Copy)]
pub struct WorkerOpts {
    pub eta_l: f64,
    pub local_steps: usize,
    pub qp_tol: f64,
    pub qp_max_sweeps: usize,
    pub disable_qp: bool,
}

/// What a worker hands back to the server.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub x_final: Vec<f64>,
    /// Transmitted update `d = x_t - x_I`.
    pub delta: Vec<f64>,
    /// Mean minibatch loss over the round; `None` for an empty shard.
    pub train_loss: Option<f64>,
    pub qp_fallbacks: u32,
}

fn idle_outcome(ws: &mut WorkerState, x_global: &[f64]) -> LocalOutcome {
    ws.x_prev = x_global.to_vec();
    LocalOutcome {
        x_final: x_global.to_vec(),
        delta: vecops::zeros(x_global.len()),
        train_loss: None,
        qp_fallbacks: 0,
    }
}

/// QP-corrected local training: at each step the minibatch gradient is
/// projected so it stays non-negatively correlated with the previous-iterate
/// gradient, the round anchor, and the drift from the broadcast point; the
/// corrected direction is the conical combination recovered from the dual.
/// On QP non-convergence the uncorrected gradient is used for that step.
pub fn worker_update(
    ws: &mut WorkerState,
    x_global: &[f64],
    obj: &impl LocalObjective,
    opts: &WorkerOpts,
) -> Result<LocalOutcome, RunError> {
    if obj.is_empty() {
        return Ok(idle_outcome(ws, x_global));
    }
    let anchor = if opts.disable_qp {
        None
    } else {
        Some(obj.anchor_grad(x_global)?)
    };
    let mut x = x_global.to_vec();
    let mut prev_iterate = ws.x_prev.clone();
    let mut loss_sum = 0.0;
    let mut fallbacks = 0;
    for _ in 0..opts.local_steps {
        let step = ws.step;
        let (loss, g) = obj.step_grad(&x, step)?;
        loss_sum += loss;
        let direction = match &anchor {
            None => g,
            Some(anchor) => {
                let prev_grad = obj.grad_at(&prev_iterate, step)?;
                let drift = vecops::sub(&x, x_global);
                let inst = QpInstance::new(
                    &g,
                    vec![prev_grad.as_slice(), anchor.as_slice(), drift.as_slice()],
                )?;
                match qp::correct(&inst, opts.qp_tol, opts.qp_max_sweeps) {
                    Ok(corrected) => corrected,
                    Err(QpError::NonConvergence { best }) => {
                        log::debug!(
                            "worker {}: local QP stalled at residual {:.3e}; using uncorrected gradient",
                            ws.id,
                            best.kkt_residual
                        );
                        fallbacks += 1;
                        g.clone()
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        };
        let old_x = x.clone();
        vecops::axpy(&mut x, -opts.eta_l, &direction);
        prev_iterate = old_x;
        ws.step += 1;
    }
    ws.x_prev = x.clone();
    let delta = vecops::sub(x_global, &x);
    Ok(LocalOutcome {
        x_final: x,
        delta,
        train_loss: Some(loss_sum / opts.local_steps as f64),
        qp_fallbacks: fallbacks,
    })
}

/// Plain local SGD; `mu > 0` adds the proximal pull `mu * (x - x_t)` to
/// every gradient (the FedProx family).
pub fn local_sgd(
    ws: &mut WorkerState,
    x_global: &[f64],
    obj: &impl LocalObjective,
    eta_l: f64,
    local_steps: usize,
    mu: f64,
) -> Result<LocalOutcome, RunError> {
    if obj.is_empty() {
        return Ok(idle_outcome(ws, x_global));
    }
    let mut x = x_global.to_vec();
    let mut loss_sum = 0.0;
    for _ in 0..local_steps {
        let (loss, mut g) = obj.step_grad(&x, ws.step)?;
        loss_sum += loss;
        if mu != 0.0 {
            for ((gk, xk), x0k) in g.iter_mut().zip(&x).zip(x_global) {
                *gk += mu * (xk - x0k);
            }
        }
        vecops::axpy(&mut x, -eta_l, &g);
        ws.step += 1;
    }
    ws.x_prev = x.clone();
    let delta = vecops::sub(x_global, &x);
    Ok(LocalOutcome {
        x_final: x,
        delta,
        train_loss: Some(loss_sum / local_steps as f64),
        qp_fallbacks: 0,
    })
}
