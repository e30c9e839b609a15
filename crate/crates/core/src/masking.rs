//! Non-parametric logit masks.
//!
//! A mask is a bit per class, set exactly when that class is present in the
//! data the policy looks at: the current training batch (replay included),
//! everything in the current session so far, or everything seen since the
//! stream began. Masks only ever touch the training loss; evaluation code
//! in this crate takes no mask anywhere.

use crate::error::Error;
use crate::tensor::{Tensor, MASK_FILL};
use crate::Result;
use std::fmt;

/// Which data defines the mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MaskPolicy {
    /// No masking; the loss sees every class.
    None,
    /// Classes present in the current batch (and replay half-batch).
    Batch,
    /// Classes accumulated since the current session began.
    Session,
    /// Classes seen since the start of the stream; never resets.
    Seen,
}

impl MaskPolicy {
    pub const ALL: [MaskPolicy; 4] = [
        MaskPolicy::None,
        MaskPolicy::Batch,
        MaskPolicy::Session,
        MaskPolicy::Seen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskPolicy::None => "none",
            MaskPolicy::Batch => "batch",
            MaskPolicy::Session => "session",
            MaskPolicy::Seen => "seen",
        }
    }
}

impl std::str::FromStr for MaskPolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MaskPolicy::None),
            "batch" => Ok(MaskPolicy::Batch),
            "session" => Ok(MaskPolicy::Session),
            "seen" => Ok(MaskPolicy::Seen),
            other => Err(Error::InvalidConfig(format!(
                "unknown mask policy {other:?} (expected none|batch|session|seen)"
            ))),
        }
    }
}

impl fmt::Display for MaskPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How a mask reaches the logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MaskApplication {
    /// Masked classes leave the softmax normalizer entirely.
    Exclude,
    /// Ablation: masked logits are multiplied by zero, so they still feed
    /// the normalizer at `e^0` each.
    Multiply,
}

impl std::str::FromStr for MaskApplication {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exclude" => Ok(MaskApplication::Exclude),
            "multiply" => Ok(MaskApplication::Multiply),
            other => Err(Error::InvalidConfig(format!(
                "unknown mask application {other:?} (expected exclude|multiply)"
            ))),
        }
    }
}

/// One bit per class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskVector {
    bits: Vec<bool>,
    policy: MaskPolicy,
}

impl MaskVector {
    pub fn ones(num_classes: usize, policy: MaskPolicy) -> Self {
        MaskVector { bits: vec![true; num_classes], policy }
    }

    pub fn from_bits(bits: Vec<bool>, policy: MaskPolicy) -> Self {
        MaskVector { bits, policy }
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn policy(&self) -> MaskPolicy {
        self.policy
    }

    pub fn width(&self) -> usize {
        self.bits.len()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.bits.get(class).copied().unwrap_or(false)
    }

    /// True when every class set here is also set in `other`.
    pub fn is_subset_of(&self, other: &MaskVector) -> bool {
        self.width() == other.width()
            && self.bits.iter().zip(other.bits()).all(|(&a, &b)| !a || b)
    }
}

/// Bit per class present in `labels`.
pub fn mask_from_labels(labels: &[usize], num_classes: usize) -> Result<MaskVector> {
    let mut bits = vec![false; num_classes];
    for &label in labels {
        if label >= num_classes {
            return Err(Error::LabelOutOfRange { label, classes: num_classes });
        }
        bits[label] = true;
    }
    Ok(MaskVector { bits, policy: MaskPolicy::Batch })
}

/// Session-scoped and seen-ever class accumulators.
///
/// The session set resets exactly at a session boundary; the seen set only
/// grows. Steps must arrive in stream order: the session index may repeat
/// or advance by one (with the start flag), never regress or skip.
#[derive(Debug, Clone)]
pub struct SessionMaskState {
    num_classes: usize,
    session: Option<usize>,
    current: Vec<bool>,
    seen: Vec<bool>,
}

impl SessionMaskState {
    pub fn new(num_classes: usize) -> Self {
        SessionMaskState {
            num_classes,
            session: None,
            current: vec![false; num_classes],
            seen: vec![false; num_classes],
        }
    }

    /// Folds one training step's labels (replay included) into the
    /// session-scoped set and returns the resulting mask.
    pub fn update_session_mask(
        &mut self,
        session_index: usize,
        is_session_start: bool,
        labels: &[usize],
    ) -> Result<MaskVector> {
        self.observe(session_index, is_session_start, labels)?;
        Ok(MaskVector { bits: self.current.clone(), policy: MaskPolicy::Session })
    }

    /// Folds one training step's labels into the seen-ever set and returns
    /// the resulting mask. Accepts the same ordering contract so callers
    /// can drive either policy from the same loop.
    pub fn update_seen_mask(
        &mut self,
        session_index: usize,
        is_session_start: bool,
        labels: &[usize],
    ) -> Result<MaskVector> {
        self.observe(session_index, is_session_start, labels)?;
        Ok(MaskVector { bits: self.seen.clone(), policy: MaskPolicy::Seen })
    }

    fn observe(
        &mut self,
        session_index: usize,
        is_session_start: bool,
        labels: &[usize],
    ) -> Result<()> {
        let expected_next = self.session.map_or(0, |s| s + 1);
        if is_session_start {
            if session_index != expected_next {
                return Err(Error::SessionOrder {
                    current: self.session.unwrap_or(0),
                    got: session_index,
                });
            }
            self.session = Some(session_index);
            self.current.iter_mut().for_each(|b| *b = false);
        } else if self.session != Some(session_index) {
            return Err(Error::SessionOrder {
                current: self.session.unwrap_or(0),
                got: session_index,
            });
        }
        for &label in labels {
            if label >= self.num_classes {
                return Err(Error::LabelOutOfRange { label, classes: self.num_classes });
            }
            self.current[label] = true;
            self.seen[label] = true;
        }
        Ok(())
    }

    pub fn session_mask(&self) -> MaskVector {
        MaskVector { bits: self.current.clone(), policy: MaskPolicy::Session }
    }

    pub fn seen_mask(&self) -> MaskVector {
        MaskVector { bits: self.seen.clone(), policy: MaskPolicy::Seen }
    }
}

/// Applies a mask to raw logits. `Exclude` substitutes a large negative
/// fill so masked classes vanish from any downstream softmax; `Multiply`
/// zeroes them instead (the ablation keeps them in the normalizer).
pub fn apply_mask(
    logits: &Tensor,
    mask: &MaskVector,
    application: MaskApplication,
) -> Result<Tensor> {
    let (rows, cols) = logits.rows_cols()?;
    if mask.width() != cols {
        return Err(Error::MaskWidthMismatch { got: mask.width(), expected: cols });
    }
    if mask.count_ones() == 0 {
        return Err(Error::EmptyMask { width: mask.width() });
    }
    let fill = match application {
        MaskApplication::Exclude => MASK_FILL,
        MaskApplication::Multiply => 0.0,
    };
    let mut out = logits.values().to_vec();
    for r in 0..rows {
        for j in 0..cols {
            if !mask.contains(j) {
                out[r * cols + j] = fill;
            }
        }
    }
    Ok(Tensor::raw(logits.shape().to_vec(), out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;
    use std::collections::HashSet;

    #[test]
    fn mask_from_labels_matches_set_oracle() {
        let mut rng = rng::stream(21, "mask-set-oracle");
        for _ in 0..200 {
            let n = rng.random_range(2..20);
            let count = rng.random_range(0..12);
            let labels: Vec<usize> = (0..count).map(|_| rng.random_range(0..n)).collect();
            let oracle: HashSet<usize> = labels.iter().copied().collect();
            let mask = mask_from_labels(&labels, n).unwrap();
            for class in 0..n {
                assert_eq!(mask.contains(class), oracle.contains(&class));
            }
            assert_eq!(mask.count_ones(), oracle.len());
        }
    }

    #[test]
    fn mask_from_labels_rejects_out_of_range() {
        match mask_from_labels(&[1, 5], 3) {
            Err(Error::LabelOutOfRange { label: 5, classes: 3 }) => {}
            other => panic!("expected LabelOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn batch_session_seen_chain_holds_over_a_random_stream() {
        let mut rng = rng::stream(22, "subset-chain");
        for _ in 0..50 {
            let n = rng.random_range(4..16);
            let sessions = rng.random_range(1..5);
            let mut state = SessionMaskState::new(n);
            for s in 0..sessions {
                let steps = rng.random_range(1..6);
                for step in 0..steps {
                    let labels: Vec<usize> =
                        (0..rng.random_range(1..5)).map(|_| rng.random_range(0..n)).collect();
                    let batch = mask_from_labels(&labels, n).unwrap();
                    let session = state
                        .update_session_mask(s, step == 0, &labels)
                        .unwrap();
                    let seen = state.update_seen_mask(s, false, &[]).unwrap();
                    assert!(batch.is_subset_of(&session));
                    assert!(session.is_subset_of(&seen));
                }
            }
        }
    }

    #[test]
    fn session_mask_resets_at_boundary_and_seen_does_not() {
        let mut state = SessionMaskState::new(6);
        state.update_session_mask(0, true, &[0, 1]).unwrap();
        let after_first = state.update_seen_mask(0, false, &[2]).unwrap();
        assert_eq!(after_first.count_ones(), 3);

        let fresh = state.update_session_mask(1, true, &[4]).unwrap();
        assert!(fresh.contains(4));
        assert!(!fresh.contains(0), "session mask must drop previous session classes");
        assert!(!fresh.contains(2));
        let seen = state.seen_mask();
        for class in [0, 1, 2, 4] {
            assert!(seen.contains(class), "seen mask is monotone");
        }
    }

    #[test]
    fn seen_mask_is_monotone_under_random_updates() {
        let mut rng = rng::stream(23, "seen-monotone");
        let n = 12;
        let mut state = SessionMaskState::new(n);
        let mut previous = vec![false; n];
        for s in 0..4 {
            for step in 0..5 {
                let labels: Vec<usize> =
                    (0..rng.random_range(0..4)).map(|_| rng.random_range(0..n)).collect();
                let seen = state.update_seen_mask(s, step == 0, &labels).unwrap();
                for class in 0..n {
                    assert!(!previous[class] || seen.contains(class));
                }
                previous = (0..n).map(|c| seen.contains(c)).collect();
            }
        }
    }

    #[test]
    fn out_of_order_sessions_are_rejected() {
        let mut state = SessionMaskState::new(4);
        state.update_session_mask(0, true, &[0]).unwrap();
        state.update_session_mask(1, true, &[1]).unwrap();
        assert!(matches!(
            state.update_session_mask(0, true, &[2]),
            Err(Error::SessionOrder { .. })
        ));
        assert!(matches!(
            state.update_session_mask(3, true, &[2]),
            Err(Error::SessionOrder { .. }),
        ), "skipping a session is an ordering error");
        assert!(matches!(
            state.update_session_mask(2, false, &[2]),
            Err(Error::SessionOrder { .. })
        ), "entering a session without its start flag is an ordering error");
    }

    #[test]
    fn apply_mask_fills_and_multiply_variant_differs_in_normalizer() {
        let logits = Tensor::from_vec(vec![1, 3], vec![-2.0, 1.0, 3.0]).unwrap();
        let mask = mask_from_labels(&[1, 2], 3).unwrap();

        let excluded = apply_mask(&logits, &mask, MaskApplication::Exclude).unwrap();
        assert_eq!(excluded.values()[0], MASK_FILL);
        assert_eq!(&excluded.values()[1..], &[1.0, 3.0]);

        let multiplied = apply_mask(&logits, &mask, MaskApplication::Multiply).unwrap();
        assert_eq!(multiplied.values()[0], 0.0);

        // Exclusion removes class 0 from the normalizer; the multiply
        // ablation keeps it at e^0 and therefore shifts the probabilities.
        let softmax = |v: &[f64]| {
            let z: f64 = v.iter().map(|x| x.exp()).sum();
            v.iter().map(|x| x.exp() / z).collect::<Vec<f64>>()
        };
        let p_excluded = softmax(excluded.values());
        let p_multiplied = softmax(multiplied.values());
        assert!(p_excluded[0] < 1e-300, "excluded class carries no probability");
        assert!(p_multiplied[0] > 0.01, "multiply ablation leaks probability");
        assert!((p_excluded[2] - p_multiplied[2]).abs() > 1e-3);
    }

    #[test]
    fn apply_mask_rejects_empty_and_mismatched_masks() {
        let logits = Tensor::from_vec(vec![1, 3], vec![0.0, 1.0, 2.0]).unwrap();
        let empty = MaskVector::from_bits(vec![false; 3], MaskPolicy::Batch);
        assert!(matches!(
            apply_mask(&logits, &empty, MaskApplication::Exclude),
            Err(Error::EmptyMask { width: 3 })
        ));
        let wrong = MaskVector::ones(5, MaskPolicy::Batch);
        assert!(matches!(
            apply_mask(&logits, &wrong, MaskApplication::Exclude),
            Err(Error::MaskWidthMismatch { got: 5, expected: 3 })
        ));
    }

    #[test]
    fn policy_none_mask_keeps_every_class() {
        let mask = MaskVector::ones(7, MaskPolicy::None);
        assert_eq!(mask.count_ones(), 7);
        let logits = Tensor::from_vec(vec![1, 7], (0..7).map(|i| i as f64).collect()).unwrap();
        let out = apply_mask(&logits, &mask, MaskApplication::Exclude).unwrap();
        assert_eq!(out.values(), logits.values());
    }
}
