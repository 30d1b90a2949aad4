//! Experiment orchestration: seed replication, per-(strategy, seed) CSVs,
//! and the cross-seed summary.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use flsim_core::flcore::{run, MetricsRow};
use flsim_core::strategies::StrategyKind;

use crate::config::ExperimentSpec;
use crate::metrics::write_csv;
use crate::HarnessError;

#[derive(Debug, Clone)]
pub struct SeedOutcome {
    pub strategy: StrategyKind,
    pub seed: u64,
    pub csv_path: PathBuf,
    /// Highest test accuracy over the recorded rounds; `None` if the run
    /// failed or recorded nothing.
    pub top_accuracy: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct SummaryRow {
    pub strategy: StrategyKind,
    pub seeds: usize,
    pub failed: usize,
    pub mean_top_accuracy: f64,
    pub std_top_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub outcomes: Vec<SeedOutcome>,
    pub summary: Vec<SummaryRow>,
    pub out_dir: PathBuf,
}

pub fn csv_file_name(strategy: StrategyKind, seed: u64) -> String {
    format!("{}_seed{}.csv", strategy.tag(), seed)
}

pub fn top_accuracy(rows: &[MetricsRow]) -> Option<f64> {
    rows.iter()
        .map(|r| r.test_accuracy)
        .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
}

fn run_one(
    spec: &ExperimentSpec,
    strategy: StrategyKind,
    seed: u64,
    out_dir: &Path,
    train: &flsim_core::data::Dataset,
    test: &flsim_core::data::Dataset,
) -> SeedOutcome {
    let cfg = spec.run_config(strategy, seed);
    let csv_path = out_dir.join(csv_file_name(strategy, seed));
    match run(cfg, train.clone(), test.clone()) {
        Ok(rows) => {
            let top = top_accuracy(&rows);
            match fs::write(&csv_path, write_csv(&rows)) {
                Ok(()) => SeedOutcome {
                    strategy,
                    seed,
                    csv_path,
                    top_accuracy: top,
                    error: None,
                },
                Err(e) => SeedOutcome {
                    strategy,
                    seed,
                    csv_path,
                    top_accuracy: top,
                    error: Some(e.to_string()),
                },
            }
        }
        Err(e) => SeedOutcome {
            strategy,
            seed,
            csv_path,
            top_accuracy: None,
            error: Some(e.to_string()),
        },
    }
}

/// Execute every (strategy, seed) cell, echo the resolved config, write one
/// CSV per cell plus `summary.csv`. Failed seeds are recorded in the summary
/// rather than aborting the grid.
pub fn run_experiment(
    spec: &ExperimentSpec,
    out_dir: &Path,
) -> Result<ExperimentReport, HarnessError> {
    spec.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("config.toml"), spec.echo())?;
    let strategies = spec.strategy_list()?;
    let (train, test) = spec.load_datasets()?;

    let cells: Vec<(StrategyKind, u64)> = strategies
        .iter()
        .flat_map(|&s| spec.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    let outcomes: Vec<SeedOutcome> = if spec.parallel_seeds {
        cells
            .par_iter()
            .map(|&(s, seed)| run_one(spec, s, seed, out_dir, &train, &test))
            .collect()
    } else {
        cells
            .iter()
            .map(|&(s, seed)| run_one(spec, s, seed, out_dir, &train, &test))
            .collect()
    };

    let mut summary = Vec::new();
    for &strategy in &strategies {
        let cell: Vec<&SeedOutcome> = outcomes.iter().filter(|o| o.strategy == strategy).collect();
        let tops: Vec<f64> = cell.iter().filter_map(|o| o.top_accuracy).collect();
        let failed = cell.iter().filter(|o| o.error.is_some()).count();
        let (mean, std) = mean_std(&tops);
        summary.push(SummaryRow {
            strategy,
            seeds: cell.len(),
            failed,
            mean_top_accuracy: mean,
            std_top_accuracy: std,
        });
    }
    fs::write(out_dir.join("summary.csv"), summary_csv(&summary))?;

    for o in &outcomes {
        if let Some(e) = &o.error {
            log::warn!("{} seed {} failed: {e}", o.strategy, o.seed);
        }
    }
    Ok(ExperimentReport {
        outcomes,
        summary,
        out_dir: out_dir.to_path_buf(),
    })
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from("strategy,seeds,failed,mean_top_accuracy,std_top_accuracy\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{:.16e},{:.16e}\n",
            r.strategy.tag(),
            r.seeds,
            r.failed,
            r.mean_top_accuracy,
            r.std_top_accuracy
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_accuracy_is_max_over_rounds() {
        let mk = |acc: f64| MetricsRow {
            round: 0,
            test_accuracy: acc,
            test_loss: 0.0,
            train_loss: 0.0,
            wall_time: 0.0,
            uplink_bytes: 0,
            downlink_bytes: 0,
            lemma1_residual: None,
            qp_g_iterations: None,
        };
        assert_eq!(top_accuracy(&[]), None);
        assert_eq!(top_accuracy(&[mk(0.1), mk(0.9), mk(0.5)]), Some(0.9));
    }

    #[test]
    fn single_value_std_is_zero() {
        let (mean, std) = mean_std(&[0.7]);
        assert_eq!(mean, 0.7);
        assert_eq!(std, 0.0);
    }
}
