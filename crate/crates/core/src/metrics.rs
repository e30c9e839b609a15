//! Accuracy bookkeeping for session-structured evaluation.
//!
//! The evaluation matrix holds one row per completed training session and
//! one column per session's newly introduced classes. `a_last` reads the
//! final row; `f_last` measures, per column, how far the final accuracy
//! sits below its historical peak. The anytime log tracks accuracy at a
//! fixed sample cadence regardless of session boundaries, and its mean is
//! the area under that curve on an even grid.

use crate::error::Error;
use crate::Result;

/// Row-per-session accuracy matrix with undefined cells for class groups
/// that have not appeared yet (or sessions introducing no new classes).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalMatrix {
    width: usize,
    rows: Vec<Vec<Option<f64>>>,
}

impl EvalMatrix {
    pub fn new(width: usize) -> Self {
        EvalMatrix { width, rows: Vec::new() }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rows(&self) -> &[Vec<Option<f64>>] {
        &self.rows
    }

    pub fn push_row(&mut self, row: Vec<Option<f64>>) -> Result<()> {
        if row.len() != self.width {
            return Err(Error::InvalidMatrix(format!(
                "row has {} cells, matrix width is {}",
                row.len(),
                self.width
            )));
        }
        for (j, cell) in row.iter().enumerate() {
            if let Some(v) = cell {
                if !v.is_finite() || !(0.0..=1.0).contains(v) {
                    return Err(Error::InvalidMatrix(format!(
                        "cell {j} holds {v}, accuracies must lie in [0, 1]"
                    )));
                }
            }
        }
        self.rows.push(row);
        Ok(())
    }

    /// Mean accuracy over the defined cells of the final row.
    pub fn a_last(&self) -> Result<f64> {
        let last = self
            .rows
            .last()
            .ok_or_else(|| Error::InvalidMatrix("matrix has no rows".into()))?;
        let defined: Vec<f64> = last.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::InvalidMatrix("final row has no defined cells".into()));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// Mean, over columns defined in the final row, of the drop from the
    /// column's best accuracy to its final accuracy. Zero means nothing was
    /// forgotten; columns never evaluated are skipped.
    pub fn f_last(&self) -> Result<f64> {
        let last = self
            .rows
            .last()
            .ok_or_else(|| Error::InvalidMatrix("matrix has no rows".into()))?;
        let mut drops = Vec::new();
        for j in 0..self.width {
            let final_acc = match last[j] {
                Some(v) => v,
                None => continue,
            };
            let peak = self
                .rows
                .iter()
                .filter_map(|row| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            drops.push(peak - final_acc);
        }
        if drops.is_empty() {
            return Err(Error::InvalidMatrix("no column is defined in the final row".into()));
        }
        Ok(drops.iter().sum::<f64>() / drops.len() as f64)
    }

    /// Accuracy trajectory of one column across the rows, for retention
    /// plots of an early session's classes.
    pub fn retention_curve(&self, column: usize) -> Result<Vec<Option<f64>>> {
        if column >= self.width {
            return Err(Error::InvalidMatrix(format!(
                "column {column} out of range for width {}",
                self.width
            )));
        }
        Ok(self.rows.iter().map(|row| row[column]).collect())
    }
}

/// One anytime evaluation point.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnytimePoint {
    /// Training samples consumed when the evaluation ran.
    pub samples_seen: usize,
    pub accuracy: f64,
}

/// Accuracy measured on a fixed sample cadence, independent of sessions.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AnytimeLog {
    entries: Vec<AnytimePoint>,
}

impl AnytimeLog {
    pub fn new() -> Self {
        AnytimeLog::default()
    }

    pub fn push(&mut self, samples_seen: usize, accuracy: f64) -> Result<()> {
        if !accuracy.is_finite() || !(0.0..=1.0).contains(&accuracy) {
            return Err(Error::InvalidMatrix(format!(
                "anytime accuracy {accuracy} must lie in [0, 1]"
            )));
        }
        if let Some(last) = self.entries.last() {
            if samples_seen <= last.samples_seen {
                return Err(Error::InvalidMatrix(format!(
                    "anytime points must advance: {} after {}",
                    samples_seen, last.samples_seen
                )));
            }
        }
        self.entries.push(AnytimePoint { samples_seen, accuracy });
        Ok(())
    }

    pub fn entries(&self) -> &[AnytimePoint] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Mean of the anytime accuracies — the area under the accuracy curve
    /// when evaluations are evenly spaced in samples.
    pub fn a_auc(&self) -> Result<f64> {
        if self.entries.is_empty() {
            return Err(Error::InvalidMatrix("anytime log is empty".into()));
        }
        Ok(self.entries.iter().map(|p| p.accuracy).sum::<f64>() / self.entries.len() as f64)
    }
}

/// Fraction of predictions matching their labels.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidMatrix(format!(
            "{} predictions against {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::InvalidMatrix("cannot score an empty prediction set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}
