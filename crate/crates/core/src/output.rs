//! CSV emission. Floats are printed with 17 significant digits so that
//! identical runs produce identical bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str =
    "round,strategy,dp_enabled,epsilon,clip,mean_loss,global_delta_norm,expectation_diff,total_variance,wall_ms";
pub const NOISE_STATS_HEADER: &str = "sweep_key,sweep_value,mean_diff,std_error,mc_variance,exact_variance,paper_bound";
pub const TRIALS_HEADER: &str = "trial,true_bit,score";
pub const ROC_HEADER: &str = "threshold,fpr,tpr";

/// `{:.16e}`: 17 significant digits, round-trips every `f64`.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

/// Parses what [`num`] prints.
pub fn parse_num(s: &str) -> Option<f64> {
    match s.trim() {
        "nan" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        t => t.parse().ok(),
    }
}

/// Writes `header` then one line per row.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut buf = Vec::with_capacity(64 * (rows.len() + 1));
    writeln!(buf, "{header}").expect("writing to a Vec");
    for r in rows {
        writeln!(buf, "{r}").expect("writing to a Vec");
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Reads a CSV written by [`write_csv`], checking the header.
pub fn read_csv(path: &Path, header: &str) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == header => {}
        other => {
            return Err(Error::Format {
                path: path.into(),
                reason: format!("expected header '{header}', found {other:?}"),
            })
        }
    }
    let width = header.split(',').count();
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            let cells: Vec<String> = l.split(',').map(|c| c.trim().to_string()).collect();
            if cells.len() != width {
                return Err(Error::Format {
                    path: path.into(),
                    reason: format!("row {} has {} cells, expected {width}", i + 1, cells.len()),
                });
            }
            Ok(cells)
        })
        .collect()
}
