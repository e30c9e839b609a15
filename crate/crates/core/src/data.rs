//! The data atom shared by streams, losses, and the replay buffer, plus
//! the text-file ingestion hook for external datasets.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::Error;
use crate::Result;

/// One labelled feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Vec<f64>,
    pub label: usize,
}

impl Example {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Example { features, label }
    }
}

/// Distinct labels present in a slice of examples, ascending.
pub fn label_set(examples: &[Example]) -> Vec<usize> {
    let mut labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    labels.sort_unstable();
    labels.dedup();
    labels
}

/// Parses delimited numeric text: one example per line, `label,f1,...,fd`.
/// Blank lines and lines starting with `#` are skipped. Every example must
/// have the same number of features and all values must be finite.
pub fn parse_delimited(text: &str) -> Result<Vec<Example>> {
    let mut examples = Vec::new();
    let mut feature_dim = None;
    for (index, raw) in text.lines().enumerate() {
        let line_no = index + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(',').map(str::trim);
        let label_field = fields.next().unwrap_or("");
        let label: usize = label_field.parse().map_err(|_| {
            Error::InvalidDataset(format!("line {line_no}: bad label {label_field:?}"))
        })?;
        let mut features = Vec::new();
        for field in fields {
            let value: f64 = field.parse().map_err(|_| {
                Error::InvalidDataset(format!("line {line_no}: bad feature {field:?}"))
            })?;
            if !value.is_finite() {
                return Err(Error::InvalidDataset(format!(
                    "line {line_no}: non-finite feature {value}"
                )));
            }
            features.push(value);
        }
        if features.is_empty() {
            return Err(Error::InvalidDataset(format!("line {line_no}: no features")));
        }
        match feature_dim {
            None => feature_dim = Some(features.len()),
            Some(expected) if expected != features.len() => {
                return Err(Error::InvalidDataset(format!(
                    "line {line_no}: {} features, earlier lines have {expected}",
                    features.len()
                )));
            }
            Some(_) => {}
        }
        examples.push(Example::new(features, label));
    }
    if examples.is_empty() {
        return Err(Error::InvalidDataset("no examples in delimited text".into()));
    }
    Ok(examples)
}

/// Reads a delimited dataset file (see [`parse_delimited`] for the format).
pub fn load_delimited(path: &Path) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("read {}", path.display()), e))?;
    parse_delimited(&text)
}

/// Splits examples into train/test per class: each class is shuffled with
/// the provided generator and the leading `round(train_fraction * n)`
/// examples (clamped to keep at least one in train) go to the train split.
pub fn split_per_class(
    examples: &[Example],
    train_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Example>, Vec<Example>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidDataset(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    let labels = label_set(examples);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for label in labels {
        let mut members: Vec<&Example> =
            examples.iter().filter(|e| e.label == label).collect();
        members.shuffle(rng);
        let n = members.len();
        let take = ((train_fraction * n as f64).round() as usize).clamp(1, n);
        for (i, member) in members.into_iter().enumerate() {
            if i < take {
                train.push(member.clone());
            } else {
                test.push(member.clone());
            }
        }
    }
    Ok((train, test))
}
