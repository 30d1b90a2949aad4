//! Communication-efficiency reporting: first round reaching a target test
//! accuracy, tabulated over the CSVs in an output directory.

use std::fs;
use std::path::Path;

use flsim_core::flcore::MetricsRow;

use crate::metrics::parse_csv;
use crate::HarnessError;

/// Smallest recorded round whose test accuracy reaches `target`; `None`
/// means the run never got there.
pub fn rounds_to_accuracy(rows: &[MetricsRow], target: f64) -> Option<usize> {
    rows.iter()
        .find(|r| r.test_accuracy >= target)
        .map(|r| r.round)
}

/// Plain-text table of rounds-to-accuracy for every `*_seed*.csv` in `dir`.
/// Unreached targets print as `--`.
pub fn report_table(dir: &Path, targets: &[f64]) -> Result<String, HarnessError> {
    let mut files: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv")
                && p.file_stem()
                    .and_then(|s| s.to_str())
                    .is_some_and(|s| s.contains("_seed"))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(HarnessError::Csv(format!(
            "no run CSVs found under {}",
            dir.display()
        )));
    }
    let mut out = String::from("run");
    for t in targets {
        out.push_str(&format!("\trounds_to_{:.4}", t));
    }
    out.push('\n');
    for path in files {
        let rows = parse_csv(&fs::read_to_string(&path)?)?;
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("?")
            .to_string();
        out.push_str(&name);
        for &t in targets {
            match rounds_to_accuracy(&rows, t) {
                Some(round) => out.push_str(&format!("\t{round}")),
                None => out.push_str("\t--"),
            }
        }
        out.push('\n');
    }
    Ok(out)
}
