//! Deterministic outer loop: sample, (optionally) reduce memory, run the
//! sampled workers in parallel on a parameter snapshot, apply the strategy's
//! server rule, evaluate on the held-out set.

use std::time::Instant;

use rayon::prelude::*;

use crate::data::{dirichlet_partition, Dataset, Partition};
use crate::model::{self, ModelError};
use crate::qp;
use crate::rng::{derive, TAG_WORKER};
use crate::strategies::{
    mifa_accumulate, mifa_transform, LocalRule, MifaState, RoundPlan, ServerRule,
};
use crate::vecops;

use super::memory::mem_red;
use super::server::{server_update, ServerOpts, ServerRoundInfo, ServerState};
use super::{
    local_sgd, sample_active, worker_anchor_seed, worker_update, LocalOutcome, RunConfig, RunError,
    ShardObjective, WorkerOpts, WorkerState,
};

/// One evaluation record. Byte counters are per round, one direction each.
#[derive(Debug, Clone)]
pub struct MetricsRow {
    pub round: usize,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub train_loss: f64,
    pub wall_time: f64,
    pub uplink_bytes: u64,
    pub downlink_bytes: u64,
    pub lemma1_residual: Option<f64>,
    pub qp_g_iterations: Option<u64>,
}

/// Residual of the momentum-unrolled identity
/// `u_{t+1} - u_t = -(eta_g / (1 - beta1)) * d~_{t+1}` where
/// `u_t = (x_t - beta1 x_{t-1}) / (1 - beta1)`, `u_0 = x_0`, and
/// `d~ = d + m~ - m`. Holds along every trajectory up to rounding, so it is
/// tracked as a runtime self-check.
#[derive(Debug, Clone, Copy)]
pub struct LemmaRecord {
    pub round: usize,
    pub residual: f64,
    /// `||u_t||` before the round, the scale the residual is bounded by.
    pub u_norm: f64,
}

struct LemmaTracker {
    beta1: f64,
    eta_g: f64,
    u_prev: Vec<f64>,
    x_prev: Vec<f64>,
    history: Vec<LemmaRecord>,
}

impl LemmaTracker {
    fn new(x0: &[f64], beta1: f64, eta_g: f64) -> Self {
        Self {
            beta1,
            eta_g,
            u_prev: x0.to_vec(),
            x_prev: x0.to_vec(),
            history: Vec::new(),
        }
    }

    fn record(&mut self, round: usize, x_new: &[f64], info: &ServerRoundInfo) -> LemmaRecord {
        let s = 1.0 / (1.0 - self.beta1);
        let c = self.eta_g * s;
        let u_norm = vecops::norm(&self.u_prev);
        let mut acc = 0.0;
        let mut u_new = vec![0.0; x_new.len()];
        for k in 0..x_new.len() {
            u_new[k] = s * (x_new[k] - self.beta1 * self.x_prev[k]);
            let dtilde = info.d_mean[k] + info.m_tilde[k] - info.m_pre[k];
            let r = u_new[k] - self.u_prev[k] + c * dtilde;
            acc += r * r;
        }
        self.u_prev = u_new;
        self.x_prev = x_new.to_vec();
        let rec = LemmaRecord {
            round,
            residual: acc.sqrt(),
            u_norm,
        };
        self.history.push(rec);
        rec
    }
}

pub struct Simulation {
    cfg: RunConfig,
    plan: RoundPlan,
    train: Dataset,
    test: Dataset,
    partition: Partition,
    workers: Vec<WorkerState>,
    server: ServerState,
    mifa: Option<MifaState>,
    lemma: Option<LemmaTracker>,
    rows: Vec<MetricsRow>,
    start: Instant,
    dim: usize,
    qp_fallback_steps: u64,
}

impl Simulation {
    pub fn new(cfg: RunConfig, train: Dataset, test: Dataset) -> Result<Self, RunError> {
        cfg.validate()?;
        let arch = &cfg.architecture;
        if train.dim() != arch.input_dim || test.dim() != arch.input_dim {
            return Err(RunError::InvalidConfig {
                key: "architecture",
                reason: format!(
                    "input_dim {} does not match dataset dims {}/{}",
                    arch.input_dim,
                    train.dim(),
                    test.dim()
                ),
            });
        }
        if train.num_classes > arch.num_classes || test.num_classes > arch.num_classes {
            return Err(RunError::InvalidConfig {
                key: "architecture",
                reason: "dataset has more classes than the model".into(),
            });
        }
        let partition = dirichlet_partition(&train, cfg.num_workers, cfg.omega, cfg.seed)?;
        let x0 = model::init_params(arch, cfg.seed);
        let dim = x0.len();
        let workers = (0..cfg.num_workers)
            .map(|i| WorkerState::new(i, &x0))
            .collect();
        let server = ServerState::new(x0, cfg.num_workers);
        let plan = cfg.strategy.plan(&cfg);
        let mifa = cfg
            .strategy
            .uses_mifa_state()
            .then(|| MifaState::new(cfg.num_workers, dim));
        let lemma = cfg
            .track_lemma1
            .then(|| LemmaTracker::new(&server.x, plan.server.effective_beta1(), cfg.eta_g));
        Ok(Self {
            cfg,
            plan,
            train,
            test,
            partition,
            workers,
            server,
            mifa,
            lemma,
            rows: Vec::new(),
            start: Instant::now(),
            dim,
            qp_fallback_steps: 0,
        })
    }

    pub fn cfg(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[f64] {
        &self.server.x
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    pub fn mifa(&self) -> Option<&MifaState> {
        self.mifa.as_ref()
    }

    pub fn rows(&self) -> &[MetricsRow] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<MetricsRow> {
        self.rows
    }

    pub fn lemma1_history(&self) -> &[LemmaRecord] {
        self.lemma
            .as_ref()
            .map(|l| l.history.as_slice())
            .unwrap_or(&[])
    }

    /// Execute one communication round.
    pub fn round(&mut self) -> Result<(), RunError> {
        let t = self.server.round;
        let d = self.dim;
        let sampled = sample_active(
            self.cfg.num_workers,
            self.cfg.active_workers,
            self.cfg.seed,
            t,
        );

        // broadcast x_t to every sampled worker
        let mut downlink: u64 = 0;
        for _ in &sampled {
            downlink += (d * 8) as u64;
        }

        if self.cfg.strategy.uses_memory() && self.cfg.memory_size > 0 {
            mem_red(&mut self.server.memory, self.cfg.memory_size, &sampled);
        }

        let x_snapshot = self.server.x.clone();

        let mut worker_refs: Vec<&mut WorkerState> = Vec::with_capacity(sampled.len());
        {
            let mut iter = self.workers.iter_mut();
            let mut consumed = 0usize;
            for &id in &sampled {
                let ws = iter.nth(id - consumed).expect("worker id in range");
                consumed = id + 1;
                worker_refs.push(ws);
            }
        }

        let cfg = &self.cfg;
        let plan = self.plan;
        let train = &self.train;
        let partition = &self.partition;
        let w_opts = WorkerOpts {
            eta_l: cfg.eta_l,
            local_steps: cfg.sync_interval,
            qp_tol: qp::DEFAULT_TOL,
            qp_max_sweeps: super::WORKER_QP_MAX_SWEEPS,
            disable_qp: cfg.disable_worker_qp,
        };
        let outcomes: Vec<LocalOutcome> = worker_refs
            .into_par_iter()
            .map(|ws| {
                let obj = ShardObjective {
                    arch: &cfg.architecture,
                    data: train,
                    shard: &partition.shards[ws.id],
                    batch_seed: derive(cfg.seed, &[TAG_WORKER, ws.id as u64]),
                    batch_size: cfg.batch_size,
                    mode: cfg.gradient_mode,
                    anchor_cap: cfg.anchor_cap,
                    anchor_seed: worker_anchor_seed(cfg.seed, ws.id, t),
                };
                match plan.local {
                    LocalRule::Sgd { mu } => {
                        local_sgd(ws, &x_snapshot, &obj, cfg.eta_l, cfg.sync_interval, mu)
                    }
                    LocalRule::QpCorrected => worker_update(ws, &x_snapshot, &obj, &w_opts),
                }
            })
            .collect::<Result<_, _>>()
            .map_err(|e| match e {
                RunError::Model(ModelError::NonFinite) => RunError::Diverged { round: t },
                other => other,
            })?;

        for o in &outcomes {
            if let Some(l) = o.train_loss {
                if !l.is_finite() {
                    return Err(RunError::Diverged { round: t });
                }
            }
            self.qp_fallback_steps += o.qp_fallbacks as u64;
        }

        // each worker sends one d-dimensional update back
        let mut uplink: u64 = 0;
        for _ in &sampled {
            uplink += (d * 8) as u64;
        }

        let losses: Vec<f64> = outcomes.iter().filter_map(|o| o.train_loss).collect();
        let train_loss = if losses.is_empty() {
            f64::NAN
        } else {
            losses.iter().sum::<f64>() / losses.len() as f64
        };

        let mut updates: Vec<(usize, Vec<f64>)> = sampled
            .iter()
            .copied()
            .zip(outcomes.into_iter().map(|o| o.delta))
            .collect();

        let eta_g = self.cfg.eta_g;
        let info: ServerRoundInfo = match plan.server {
            ServerRule::Average => {
                let slices: Vec<&[f64]> = updates.iter().map(|(_, v)| v.as_slice()).collect();
                let d_mean = vecops::mean(&slices);
                self.server.m_tilde = d_mean.clone();
                vecops::axpy(&mut self.server.x, -eta_g, &d_mean);
                ServerRoundInfo {
                    d_mean: d_mean.clone(),
                    m_pre: d_mean.clone(),
                    m_tilde: d_mean,
                    qp_sweeps: None,
                    qp_fell_back: false,
                }
            }
            ServerRule::Momentum { beta1 } => {
                let slices: Vec<&[f64]> = updates.iter().map(|(_, v)| v.as_slice()).collect();
                let d_mean = vecops::mean(&slices);
                vecops::momentum_step(&mut self.server.m_tilde, beta1, &d_mean);
                let m = self.server.m_tilde.clone();
                vecops::axpy(&mut self.server.x, -eta_g, &m);
                ServerRoundInfo {
                    d_mean,
                    m_pre: m.clone(),
                    m_tilde: m,
                    qp_sweeps: None,
                    qp_fell_back: false,
                }
            }
            ServerRule::MifaMomentum { beta1 } => {
                let mifa = self.mifa.as_mut().expect("mifa state allocated");
                mifa_transform(mifa, &mut updates);
                mifa_accumulate(mifa, &updates, self.cfg.num_workers);
                let d_running = mifa.d_running.clone();
                vecops::momentum_step(&mut self.server.m_tilde, beta1, &d_running);
                let m = self.server.m_tilde.clone();
                vecops::axpy(&mut self.server.x, -eta_g, &m);
                ServerRoundInfo {
                    d_mean: d_running,
                    m_pre: m.clone(),
                    m_tilde: m,
                    qp_sweeps: None,
                    qp_fell_back: false,
                }
            }
            ServerRule::MemoryQp { beta1, beta2 } => {
                let s_opts = ServerOpts {
                    eta_g,
                    beta1,
                    beta2,
                    qp_tol: qp::DEFAULT_TOL,
                };
                server_update(&mut self.server, &updates, &s_opts)
            }
        };
        self.server.round = t + 1;

        let lemma_rec = self
            .lemma
            .as_mut()
            .map(|tr| tr.record(t, &self.server.x, &info));

        let due = (t + 1).is_multiple_of(self.cfg.eval_every) || t + 1 == self.cfg.rounds;
        if due {
            let (acc, loss) = model::evaluate(&self.cfg.architecture, &self.server.x, &self.test)
                .map_err(|e| match e {
                ModelError::NonFinite => RunError::Diverged { round: t },
                other => RunError::Model(other),
            })?;
            let wall_time = if self.cfg.timed {
                self.start.elapsed().as_secs_f64()
            } else {
                0.0
            };
            self.rows.push(MetricsRow {
                round: t,
                test_accuracy: acc,
                test_loss: loss,
                train_loss,
                wall_time,
                uplink_bytes: uplink,
                downlink_bytes: downlink,
                lemma1_residual: lemma_rec.map(|r| r.residual),
                qp_g_iterations: info.qp_sweeps,
            });
        }
        Ok(())
    }

    /// Local steps that used the uncorrected gradient because the worker QP
    /// hit its sweep budget.
    pub fn qp_fallback_steps(&self) -> u64 {
        self.qp_fallback_steps
    }

    pub fn run_all(&mut self) -> Result<(), RunError> {
        while self.server.round < self.cfg.rounds {
            self.round()?;
        }
        if self.qp_fallback_steps > 0 {
            log::warn!(
                "{} local steps fell back to uncorrected gradients (QP sweep budget)",
                self.qp_fallback_steps
            );
        }
        Ok(())
    }
}

/// Run a full experiment and return the metric rows.
pub fn run(cfg: RunConfig, train: Dataset, test: Dataset) -> Result<Vec<MetricsRow>, RunError> {
    let mut sim = Simulation::new(cfg, train, test)?;
    sim.run_all()?;
    Ok(sim.into_rows())
}
