//! Result persistence and aggregation.
//!
//! Runs append to a JSON-lines file — one self-contained row per run, no
//! timestamps — so repeated invocations accumulate and re-running a seed
//! writes an identical row. Aggregation groups rows by arm label and
//! reports mean and sample standard deviation per summary metric.

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::Error;
use crate::harness::run::RunResult;
use crate::Result;

/// Appends one row per result. The file is created if missing.
pub fn append_results(path: &Path, results: &[RunResult]) -> Result<()> {
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    for result in results {
        let line = serde_json::to_string(result)
            .map_err(|e| Error::InvalidConfig(format!("serializing result row: {e}")))?;
        writeln!(file, "{line}")
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(())
}

/// Reads every row back.
pub fn read_results(path: &Path) -> Result<Vec<RunResult>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: RunResult = serde_json::from_str(&line).map_err(|e| Error::ConfigParse {
            line: i + 1,
            reason: format!("bad result row: {e}"),
        })?;
        out.push(row);
    }
    Ok(out)
}

/// Per-arm aggregate over seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesSummary {
    pub label: String,
    pub runs: usize,
    pub a_last_mean: f64,
    pub a_last_std: f64,
    pub f_last_mean: f64,
    pub f_last_std: f64,
    pub a_auc_mean: f64,
    pub a_auc_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups results by label (sorted) and aggregates the summary metrics.
pub fn summarize(results: &[RunResult]) -> Vec<SeriesSummary> {
    let mut by_label: std::collections::BTreeMap<&str, Vec<&RunResult>> =
        std::collections::BTreeMap::new();
    for r in results {
        by_label.entry(&r.label).or_default().push(r);
    }
    by_label
        .into_iter()
        .map(|(label, rows)| {
            let a_last: Vec<f64> = rows.iter().map(|r| r.a_last).collect();
            let f_last: Vec<f64> = rows.iter().map(|r| r.f_last).collect();
            let a_auc: Vec<f64> = rows.iter().map(|r| r.a_auc).collect();
            let (a_last_mean, a_last_std) = mean_std(&a_last);
            let (f_last_mean, f_last_std) = mean_std(&f_last);
            let (a_auc_mean, a_auc_std) = mean_std(&a_auc);
            SeriesSummary {
                label: label.to_string(),
                runs: rows.len(),
                a_last_mean,
                a_last_std,
                f_last_mean,
                f_last_std,
                a_auc_mean,
                a_auc_std,
            }
        })
        .collect()
}

/// Anytime curves flattened to CSV: `step,accuracy,series,seed`.
pub fn anytime_csv(results: &[RunResult]) -> String {
    let mut out = String::from("step,accuracy,series,seed\n");
    for r in results {
        for point in r.anytime.entries() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                point.samples_seen, point.accuracy, r.label, r.seed
            ));
        }
    }
    out
}

/// Session-one retention curves flattened to CSV with the same schema as
/// [`anytime_csv`]; `step` is the evaluation row index and undefined rows
/// (the column not yet measured) are skipped.
pub fn retention_csv(results: &[RunResult]) -> String {
    let mut out = String::from("step,accuracy,series,seed\n");
    for r in results {
        for (row, cell) in r.session1_retention.iter().enumerate() {
            if let Some(accuracy) = cell {
                out.push_str(&format!("{},{},{},{}\n", row, accuracy, r.label, r.seed));
            }
        }
    }
    out
}

/// Plain-text mean ± std table over all summary metrics.
pub fn summary_table(summaries: &[SeriesSummary]) -> String {
    let mut out = String::from(
        "series                      runs  a_last           f_last           a_auc\n",
    );
    for s in summaries {
        out.push_str(&format!(
            "{:<28}{:>4}  {:.3} ± {:.3}    {:.3} ± {:.3}    {:.3} ± {:.3}\n",
            s.label, s.runs, s.a_last_mean, s.a_last_std, s.f_last_mean, s.f_last_std,
            s.a_auc_mean, s.a_auc_std
        ));
    }
    out
}
