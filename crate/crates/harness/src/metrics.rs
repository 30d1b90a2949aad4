//! Lossless CSV persistence of metric rows.
//!
//! Floats are written in scientific notation with 17 significant digits, so
//! `parse(write(rows))` reproduces the exact bit patterns. Optional columns
//! are empty when absent.

use flsim_core::flcore::MetricsRow;

use crate::HarnessError;

pub const CSV_HEADER: &str = "round,test_accuracy,test_loss,train_loss,wall_time,uplink_bytes,downlink_bytes,lemma1_residual,qp_g_iterations";

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.round,
            fmt_f64(r.test_accuracy),
            fmt_f64(r.test_loss),
            fmt_f64(r.train_loss),
            fmt_f64(r.wall_time),
            r.uplink_bytes,
            r.downlink_bytes,
            r.lemma1_residual.map(fmt_f64).unwrap_or_default(),
            r.qp_g_iterations.map(|v| v.to_string()).unwrap_or_default(),
        ));
    }
    out
}

fn field_err(line: usize, what: &str) -> HarnessError {
    HarnessError::Csv(format!("line {line}: bad {what}"))
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>, HarnessError> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == CSV_HEADER => {}
        other => {
            return Err(HarnessError::Csv(format!(
                "unexpected header: {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let n = i + 2;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 9 {
            return Err(HarnessError::Csv(format!(
                "line {n}: expected 9 columns, got {}",
                cols.len()
            )));
        }
        let f = |s: &str, what| s.parse::<f64>().map_err(|_| field_err(n, what));
        let u = |s: &str, what| s.parse::<u64>().map_err(|_| field_err(n, what));
        rows.push(MetricsRow {
            round: cols[0].parse().map_err(|_| field_err(n, "round"))?,
            test_accuracy: f(cols[1], "test_accuracy")?,
            test_loss: f(cols[2], "test_loss")?,
            train_loss: f(cols[3], "train_loss")?,
            wall_time: f(cols[4], "wall_time")?,
            uplink_bytes: u(cols[5], "uplink_bytes")?,
            downlink_bytes: u(cols[6], "downlink_bytes")?,
            lemma1_residual: if cols[7].is_empty() {
                None
            } else {
                Some(f(cols[7], "lemma1_residual")?)
            },
            qp_g_iterations: if cols[8].is_empty() {
                None
            } else {
                Some(u(cols[8], "qp_g_iterations")?)
            },
        });
    }
    Ok(rows)
}

/// Bitwise row equality (NaN-safe), the identity `parse . write` preserves.
pub fn rows_identical(a: &[MetricsRow], b: &[MetricsRow]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.round == y.round
                && x.test_accuracy.to_bits() == y.test_accuracy.to_bits()
                && x.test_loss.to_bits() == y.test_loss.to_bits()
                && x.train_loss.to_bits() == y.train_loss.to_bits()
                && x.wall_time.to_bits() == y.wall_time.to_bits()
                && x.uplink_bytes == y.uplink_bytes
                && x.downlink_bytes == y.downlink_bytes
                && x.lemma1_residual.map(f64::to_bits) == y.lemma1_residual.map(f64::to_bits)
                && x.qp_g_iterations == y.qp_g_iterations
        })
}
