//! Dense `f64` tensors, a named parameter store with a flat trainable view,
//! and a central-difference oracle for gradient verification.
//!
//! Everything is 64-bit: the point of this crate is verifiable numerics,
//! not throughput, and f64 keeps finite-difference checks tight.

pub mod tape;

pub use tape::{BackwardReport, MhsaWeights, NodeId, Tape};

use crate::error::Error;
use crate::Result;
use std::collections::BTreeMap;

/// Layer-norm stabilizer, shared by forward and backward.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Central-difference step used by gradient checks.
pub const FD_STEP: f64 = 1e-5;

/// Substituted for masked-out logits: drives the softmax term to zero
/// without leaving the finite range.
pub const MASK_FILL: f64 = -1e30;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, checking element count and finiteness.
    pub fn from_vec(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape,
                reason: "zero-sized dimension".into(),
            });
        }
        if n != values.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape,
                reason: format!("{} values for {} slots", values.len(), n),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "from_vec",
                index: i,
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            values: vec![v],
        }
    }

    /// Internal constructor for op outputs; skips the finiteness scan so a
    /// diverging loss surfaces as a typed error downstream, not a panic here.
    pub(crate) fn raw(shape: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        Tensor { shape, values }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Views this tensor as a matrix: 1-D `[n]` becomes `(1, n)`.
    pub fn rows_cols(&self) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::InvalidShape {
                op: "rows_cols",
                shape: self.shape.clone(),
                reason: "expected rank 1 or 2".into(),
            }),
        }
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        let (_, c) = self.rows_cols().expect("2-d access on higher-rank tensor");
        self.values[row * c + col]
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Named tensors with a per-entry trainable flag.
///
/// The flat trainable view concatenates trainable entries in name order
/// (the map is sorted), which fixes the coordinate layout shared by
/// [`GradVector`] and the optimizers. Frozen entries never appear in the
/// flat view, so no optimizer or perturbation step can reach them.
#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    entries: BTreeMap<String, Entry>,
}

#[derive(Debug, Clone)]
struct Entry {
    tensor: Tensor,
    trainable: bool,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParameter(name.into()));
        }
        self.entries.insert(name.into(), Entry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    /// Replaces the tensor under `name`; the shape must be unchanged.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let entry = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "set",
                lhs: entry.tensor.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        self.entries
            .get(name)
            .map(|e| e.trainable)
            .ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        self.entries
            .get_mut(name)
            .map(|e| e.trainable = trainable)
            .ok_or_else(|| Error::UnknownParameter(name.into()))
    }

    /// Marks every entry whose name starts with `prefix` as frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (name, entry) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                entry.trainable = false;
            }
        }
    }

    /// Drops every entry whose name starts with `prefix`; returns how many
    /// were removed. Used to discard phase-local parameters (warm-up heads,
    /// throwaway adapters) once a phase ends.
    pub fn remove_prefix(&mut self, prefix: &str) -> usize {
        let doomed: Vec<String> = self
            .entries
            .keys()
            .filter(|n| n.starts_with(prefix))
            .cloned()
            .collect();
        for name in &doomed {
            self.entries.remove(name);
        }
        doomed.len()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    /// Names of trainable entries in flat-view order.
    pub fn trainable_names(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(n, _)| n.as_str())
            .collect()
    }

    /// Total coordinates across trainable entries.
    pub fn trainable_len(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Flat-view offset and length of a trainable entry; `None` if frozen.
    pub fn flat_slot(&self, name: &str) -> Result<Option<(usize, usize)>> {
        let mut offset = 0;
        for (n, e) in &self.entries {
            if !e.trainable {
                continue;
            }
            if n == name {
                return Ok(Some((offset, e.tensor.len())));
            }
            offset += e.tensor.len();
        }
        if self.entries.contains_key(name) {
            Ok(None)
        } else {
            Err(Error::UnknownParameter(name.into()))
        }
    }

    /// Concatenation of trainable tensors in name order.
    pub fn flat_view(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for e in self.entries.values().filter(|e| e.trainable) {
            out.extend_from_slice(e.tensor.values());
        }
        out
    }

    /// Writes a flat vector back into the trainable tensors, bit for bit.
    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.trainable_len() {
            return Err(Error::FlatLengthMismatch {
                got: flat.len(),
                expected: self.trainable_len(),
            });
        }
        let mut offset = 0;
        for e in self.entries.values_mut().filter(|e| e.trainable) {
            let n = e.tensor.len();
            e.tensor
                .values_mut()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// In-place `theta += scale * v` over the trainable coordinates.
    pub fn add_flat(&mut self, v: &[f64], scale: f64) -> Result<()> {
        if v.len() != self.trainable_len() {
            return Err(Error::FlatLengthMismatch {
                got: v.len(),
                expected: self.trainable_len(),
            });
        }
        let mut offset = 0;
        for e in self.entries.values_mut().filter(|e| e.trainable) {
            for x in e.tensor.values_mut() {
                *x += scale * v[offset];
                offset += 1;
            }
        }
        Ok(())
    }

    /// Order-sensitive FNV-1a over the exact bits of frozen entries.
    /// Training must never change this.
    pub fn frozen_fingerprint(&self) -> u64 {
        self.fingerprint(|e| !e.trainable)
    }

    /// Fingerprint over every entry, frozen and trainable alike.
    pub fn full_fingerprint(&self) -> u64 {
        self.fingerprint(|_| true)
    }

    fn fingerprint(&self, keep: impl Fn(&Entry) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |b: u8| h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
        for (name, e) in &self.entries {
            if !keep(e) {
                continue;
            }
            for b in name.bytes() {
                eat(b);
            }
            for v in e.tensor.values() {
                for b in v.to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

/// Gradient over the flat trainable view, with its norm fixed at
/// construction so downstream perturbation math reuses one value.
#[derive(Debug, Clone)]
pub struct GradVector {
    values: Vec<f64>,
    l2_norm: f64,
}

impl GradVector {
    pub fn new(values: Vec<f64>) -> Self {
        let l2_norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        GradVector { values, l2_norm }
    }

    pub fn zeros(len: usize) -> Self {
        GradVector {
            values: vec![0.0; len],
            l2_norm: 0.0,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn l2_norm(&self) -> f64 {
        self.l2_norm
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Index of the first non-finite coordinate, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.values.iter().position(|v| !v.is_finite())
    }
}

/// Compares an analytic gradient against central differences of `loss`
/// over every trainable coordinate.
///
/// Returns `max_i |g_ad[i] - g_fd[i]| / max(1, |g_fd[i]|)`. The store is
/// restored bit-exactly before returning. A store with no trainable
/// coordinates vacuously passes with 0.
pub fn finite_diff_check<F>(
    store: &mut ParameterStore,
    mut loss: F,
    analytic: &GradVector,
    step: f64,
) -> Result<f64>
where
    F: FnMut(&ParameterStore) -> Result<f64>,
{
    let n = store.trainable_len();
    if analytic.len() != n {
        return Err(Error::FlatLengthMismatch {
            got: analytic.len(),
            expected: n,
        });
    }
    if n == 0 {
        return Ok(0.0);
    }
    let theta = store.flat_view();
    let mut probe = theta.clone();
    let mut worst: f64 = 0.0;
    for i in 0..n {
        probe[i] = theta[i] + step;
        store.set_flat(&probe)?;
        let up = loss(store)?;
        probe[i] = theta[i] - step;
        store.set_flat(&probe)?;
        let down = loss(store)?;
        probe[i] = theta[i];
        if !up.is_finite() || !down.is_finite() {
            store.set_flat(&theta)?;
            return Err(Error::NonFinite {
                op: "finite_diff_check",
                index: i,
            });
        }
        let fd = (up - down) / (2.0 * step);
        let rel = (analytic.values()[i] - fd).abs() / fd.abs().max(1.0);
        worst = worst.max(rel);
    }
    store.set_flat(&theta)?;
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng;

    fn store_with(entries: &[(&str, Vec<usize>, bool)]) -> ParameterStore {
        let mut rng = rng::stream(11, "store-test");
        let mut store = ParameterStore::new();
        for (name, shape, trainable) in entries {
            let n: usize = shape.iter().product();
            let values: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            store
                .insert(name, Tensor::from_vec(shape.clone(), values).unwrap(), *trainable)
                .unwrap();
        }
        store
    }

    #[test]
    fn from_vec_rejects_count_mismatch_and_non_finite() {
        assert!(Tensor::from_vec(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::from_vec(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::from_vec(vec![0], vec![]).is_err());
    }

    #[test]
    fn flat_view_skips_frozen_and_orders_by_name() {
        let store = store_with(&[
            ("b.second", vec![3], true),
            ("a.first", vec![2], true),
            ("c.frozen", vec![4], false),
        ]);
        assert_eq!(store.trainable_len(), 5);
        let flat = store.flat_view();
        assert_eq!(&flat[..2], store.get("a.first").unwrap().values());
        assert_eq!(&flat[2..], store.get("b.second").unwrap().values());
        assert_eq!(store.flat_slot("a.first").unwrap(), Some((0, 2)));
        assert_eq!(store.flat_slot("b.second").unwrap(), Some((2, 3)));
        assert_eq!(store.flat_slot("c.frozen").unwrap(), None);
    }

    #[test]
    fn flatten_unflatten_round_trips_bit_exactly() {
        let mut rng = rng::stream(3, "roundtrip");
        for _ in 0..50 {
            let mut store = ParameterStore::new();
            let entries = rng.random_range(1..5usize);
            for i in 0..entries {
                let len = rng.random_range(1..9usize);
                let values: Vec<f64> = (0..len)
                    .map(|_| f64::from_bits(rng.random::<u64>() >> 2))
                    .map(|v| if v.is_finite() { v } else { 0.5 })
                    .collect();
                store
                    .insert(
                        &format!("p{i}"),
                        Tensor::from_vec(vec![len], values).unwrap(),
                        rng.random_bool(0.7),
                    )
                    .unwrap();
            }
            let before = store.flat_view();
            let mut copy = store.clone();
            copy.set_flat(&before).unwrap();
            let after = copy.flat_view();
            let bits =
                |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&before), bits(&after));
            assert_eq!(store.full_fingerprint(), copy.full_fingerprint());
        }
    }

    #[test]
    fn set_flat_cannot_touch_frozen_entries() {
        let mut store = store_with(&[("frozen.w", vec![4], false), ("live.w", vec![2], true)]);
        let frozen_before = store.frozen_fingerprint();
        store.set_flat(&[9.0, -9.0]).unwrap();
        store.add_flat(&[1.0, 1.0], 0.25).unwrap();
        assert_eq!(store.frozen_fingerprint(), frozen_before);
        assert_eq!(store.get("live.w").unwrap().values(), &[9.25, -8.75]);
    }

    #[test]
    fn flat_length_mismatch_is_a_typed_error() {
        let mut store = store_with(&[("w", vec![3], true)]);
        match store.set_flat(&[1.0]) {
            Err(Error::FlatLengthMismatch { got: 1, expected: 3 }) => {}
            other => panic!("expected FlatLengthMismatch, got {other:?}"),
        }
    }

    #[test]
    fn grad_vector_norm_matches_direct_computation() {
        let mut rng = rng::stream(5, "gradnorm");
        for _ in 0..100 {
            let n = rng.random_range(1..64usize);
            let v: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
            let direct = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let g = GradVector::new(v);
            let rel = (g.l2_norm() - direct).abs() / direct.max(1e-300);
            assert!(rel <= 1e-12, "norm off by {rel}");
        }
    }

    #[test]
    fn finite_diff_matches_analytic_quadratic() {
        // L = sum_i c_i * x_i^2 has gradient 2 c_i x_i exactly.
        let mut store = store_with(&[("x", vec![6], true)]);
        let coef: Vec<f64> = (0..6).map(|i| 0.3 + i as f64).collect();
        let c = coef.clone();
        let loss = move |s: &ParameterStore| {
            let x = s.get("x")?;
            Ok(x.values().iter().zip(&c).map(|(v, c)| c * v * v).sum())
        };
        let analytic = GradVector::new(
            store
                .get("x")
                .unwrap()
                .values()
                .iter()
                .zip(&coef)
                .map(|(v, c)| 2.0 * c * v)
                .collect(),
        );
        let worst = finite_diff_check(&mut store, loss, &analytic, FD_STEP).unwrap();
        assert!(worst <= 1e-8, "quadratic check should be near-exact, got {worst}");
    }

    #[test]
    fn finite_diff_empty_store_returns_zero() {
        let mut store = store_with(&[("w", vec![4], false)]);
        let worst =
            finite_diff_check(&mut store, |_| Ok(1.0), &GradVector::zeros(0), FD_STEP).unwrap();
        assert_eq!(worst, 0.0);
    }

    #[test]
    fn finite_diff_restores_parameters_bit_exactly() {
        let mut store = store_with(&[("x", vec![5], true)]);
        let before = store.full_fingerprint();
        let analytic = GradVector::new(store.get("x").unwrap().values().to_vec());
        let loss = |s: &ParameterStore| {
            Ok(s.get("x")?.values().iter().map(|v| 0.5 * v * v).sum())
        };
        finite_diff_check(&mut store, loss, &analytic, FD_STEP).unwrap();
        assert_eq!(store.full_fingerprint(), before);
    }

    #[test]
    fn finite_diff_rejects_non_finite_loss() {
        let mut store = store_with(&[("x", vec![2], true)]);
        let analytic = GradVector::zeros(2);
        let res = finite_diff_check(&mut store, |_| Ok(f64::INFINITY), &analytic, FD_STEP);
        assert!(matches!(res, Err(Error::NonFinite { .. })));
    }

    #[test]
    fn seeded_init_is_identical_across_threads() {
        let build = || {
            let mut rng = rng::stream(42, "thread-check");
            (0..256)
                .map(|_| rng.random_range(-1.0..1.0f64).to_bits())
                .collect::<Vec<u64>>()
        };
        let here = build();
        let handles: Vec<_> = (0..4).map(|_| std::thread::spawn(build)).collect();
        for h in handles {
            assert_eq!(h.join().unwrap(), here);
        }
    }
}
