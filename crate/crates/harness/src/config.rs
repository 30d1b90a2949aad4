//! Experiment specification: a flat, typed key-value file (TOML) merged with
//! CLI overrides. Unknown keys are rejected, and the fully resolved spec is
//! echoed into the output directory so a run is reproducible from its own
//! artifacts: `parse(echo(spec)) == spec`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use flsim_core::data::{gen_synthetic, load_gmlb, load_mnist_idx, split_per_class, Dataset};
use flsim_core::flcore::{GradientMode, RunConfig};
use flsim_core::model::Architecture;
use flsim_core::strategies::StrategyKind;

use crate::HarnessError;

/// Environment variable naming the dataset root directory (MNIST IDX files).
pub const DATA_DIR_ENV: &str = "FLSIM_DATA_DIR";

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    /// IDX files under the dataset root directory.
    Mnist,
    /// Seeded Gaussian mixture.
    Synthetic,
    /// Flat binary dumps (`train_file` / `test_file`).
    File,
}

fn default_beta() -> f64 {
    0.0
}
fn default_mu() -> f64 {
    0.0
}
fn default_sync_interval() -> usize {
    5
}
fn default_batch_size() -> usize {
    64
}
fn default_memory_size() -> usize {
    0
}
fn default_eval_every() -> usize {
    5
}
fn default_hidden() -> Vec<usize> {
    vec![]
}
fn default_anchor_cap() -> usize {
    2048
}
fn default_synth_classes() -> usize {
    10
}
fn default_synth_dim() -> usize {
    32
}
fn default_synth_per_class() -> usize {
    100
}
fn default_synth_seed() -> u64 {
    7
}

/// One experiment: a run configuration, a dataset selector, and the seeds to
/// replicate over. Strategy grids are expressed through `strategies`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    // what to run
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategies: Option<Vec<String>>,
    pub seeds: Vec<u64>,
    pub dataset: DatasetKind,

    // model
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,

    // optimization
    pub eta_l: f64,
    pub eta_g: f64,
    #[serde(default = "default_beta")]
    pub beta1: f64,
    #[serde(default = "default_beta")]
    pub beta2: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default = "default_sync_interval")]
    pub sync_interval: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,

    // federation
    pub num_workers: usize,
    pub active_workers: usize,
    #[serde(default = "default_memory_size")]
    pub memory_size: usize,
    pub rounds: usize,
    pub omega: f64,

    // bookkeeping
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub track_lemma1: bool,
    #[serde(default)]
    pub timed: bool,
    #[serde(default)]
    pub parallel_seeds: bool,
    #[serde(default = "default_anchor_cap")]
    pub anchor_cap: usize,

    // synthetic dataset knobs
    #[serde(default = "default_synth_classes")]
    pub synthetic_classes: usize,
    #[serde(default = "default_synth_dim")]
    pub synthetic_dim: usize,
    #[serde(default = "default_synth_per_class")]
    pub synthetic_per_class: usize,
    #[serde(default = "default_synth_seed")]
    pub synthetic_seed: u64,

    // file dataset paths
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_file: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_file: Option<PathBuf>,
}

/// CLI overrides applied on top of the parsed file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub strategy: Option<String>,
    pub eval_every: Option<usize>,
}

pub fn parse_config(path: &Path, overrides: &Overrides) -> Result<ExperimentSpec, HarnessError> {
    let text = fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    parse_config_str(&text, overrides)
}

pub fn parse_config_str(text: &str, overrides: &Overrides) -> Result<ExperimentSpec, HarnessError> {
    let mut spec: ExperimentSpec =
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
    if let Some(seed) = overrides.seed {
        spec.seeds = vec![seed];
    }
    if let Some(strategy) = &overrides.strategy {
        spec.strategy = None;
        spec.strategies = Some(vec![strategy.clone()]);
    }
    if let Some(k) = overrides.eval_every {
        spec.eval_every = k;
    }
    spec.validate()?;
    Ok(spec)
}

impl ExperimentSpec {
    pub fn architecture(&self) -> Architecture {
        Architecture::mlp(self.input_dim, self.hidden_dims.clone(), self.num_classes)
    }

    pub fn strategy_list(&self) -> Result<Vec<StrategyKind>, HarnessError> {
        let tags: Vec<String> = match (&self.strategy, &self.strategies) {
            (_, Some(list)) if !list.is_empty() => list.clone(),
            (Some(one), _) => vec![one.clone()],
            _ => {
                return Err(HarnessError::Config(
                    "missing field `strategy` (or a non-empty `strategies` list)".into(),
                ))
            }
        };
        tags.iter()
            .map(|t| t.parse::<StrategyKind>().map_err(HarnessError::Config))
            .collect()
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let strategies = self.strategy_list()?;
        if self.seeds.is_empty() {
            return Err(HarnessError::Config(
                "`seeds` must list at least one seed".into(),
            ));
        }
        if self.dataset == DatasetKind::File
            && (self.train_file.is_none() || self.test_file.is_none())
        {
            return Err(HarnessError::Config(
                "dataset = \"file\" requires `train_file` and `test_file`".into(),
            ));
        }
        // constraint checks are delegated to the run config, which names the key
        let probe = self.run_config(strategies[0], self.seeds[0]);
        probe.validate()?;
        Ok(())
    }

    pub fn run_config(&self, strategy: StrategyKind, seed: u64) -> RunConfig {
        RunConfig {
            eta_l: self.eta_l,
            eta_g: self.eta_g,
            beta1: self.beta1,
            beta2: self.beta2,
            sync_interval: self.sync_interval,
            active_workers: self.active_workers,
            num_workers: self.num_workers,
            memory_size: if strategy.uses_memory() {
                self.memory_size
            } else {
                0
            },
            rounds: self.rounds,
            omega: self.omega,
            batch_size: self.batch_size,
            seed,
            strategy,
            mu: self.mu,
            architecture: self.architecture(),
            eval_every: self.eval_every,
            gradient_mode: GradientMode::Minibatch,
            anchor_cap: self.anchor_cap,
            disable_worker_qp: false,
            track_lemma1: self.track_lemma1,
            timed: self.timed,
        }
    }

    pub fn data_dir() -> PathBuf {
        std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("data"))
    }

    /// Load (train, test) for the selected dataset. Synthetic test data uses
    /// a derived seed and a quarter of the per-class training count.
    pub fn load_datasets(&self) -> Result<(Dataset, Dataset), HarnessError> {
        match self.dataset {
            DatasetKind::Mnist => {
                let root = Self::data_dir();
                let train = load_mnist_idx(
                    &root.join(MNIST_TRAIN_IMAGES),
                    &root.join(MNIST_TRAIN_LABELS),
                )?;
                let test =
                    load_mnist_idx(&root.join(MNIST_TEST_IMAGES), &root.join(MNIST_TEST_LABELS))?;
                Ok((train, test))
            }
            DatasetKind::Synthetic => {
                // one mixture, split per class, so train and test share the
                // class means
                let test_per_class = (self.synthetic_per_class / 4).max(1);
                let full = gen_synthetic(
                    self.synthetic_classes,
                    self.synthetic_dim,
                    self.synthetic_per_class + test_per_class,
                    self.synthetic_seed,
                );
                Ok(split_per_class(&full, self.synthetic_per_class)?)
            }
            DatasetKind::File => {
                let train = load_gmlb(self.train_file.as_ref().expect("validated"))?;
                let test = load_gmlb(self.test_file.as_ref().expect("validated"))?;
                Ok((train, test))
            }
        }
    }

    /// Serialize the resolved spec; written into the output directory.
    pub fn echo(&self) -> String {
        toml::to_string_pretty(self).expect("spec serializes")
    }
}
