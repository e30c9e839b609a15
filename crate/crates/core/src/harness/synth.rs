//! Synthetic Gaussian-cluster datasets.
//!
//! Each class is an isotropic Gaussian around a centroid drawn uniformly in
//! the unit cube, re-drawn until it clears a minimum distance from every
//! earlier centroid. Datasets are fully determined by `(seed, label)`, so
//! distinct labels give distinct layouts at the same seed — the pretraining
//! corpus and the stream corpus deliberately use different labels to build
//! in a distribution shift.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Example;
use crate::error::Error;
use crate::harness::config::SyntheticDatasetSpec;
use crate::rng;
use crate::stream::Dataset;
use crate::Result;

const PLACEMENT_ATTEMPTS_PER_CLASS: usize = 200;

/// Rejection-samples `classes` centroids in `[-1, 1]^features` with all
/// pairwise distances at least `margin`.
pub fn place_centroids(
    classes: usize,
    features: usize,
    margin: f64,
    r: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    let budget = PLACEMENT_ATTEMPTS_PER_CLASS * classes;
    let mut attempts = 0;
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(classes);
    while centroids.len() < classes {
        if attempts >= budget {
            return Err(Error::MarginInfeasible { classes, margin, attempts });
        }
        attempts += 1;
        let candidate: Vec<f64> = (0..features).map(|_| r.random_range(-1.0..1.0)).collect();
        let clear = centroids.iter().all(|c| {
            let d2: f64 = c.iter().zip(&candidate).map(|(a, b)| (a - b) * (a - b)).sum();
            d2.sqrt() >= margin
        });
        if clear {
            centroids.push(candidate);
        }
    }
    Ok(centroids)
}

/// Generates a full train/test dataset matching the requested shape. The
/// `label` keys the random stream, so the same seed with different labels
/// yields unrelated cluster layouts.
pub fn generate_synthetic(
    spec: &SyntheticDatasetSpec,
    seed: u64,
    label: &str,
) -> Result<Dataset> {
    spec.validate()?;
    let mut r = rng::stream(seed, label);
    let centroids = place_centroids(spec.classes, spec.features, spec.margin, &mut r)?;
    let normal = Normal::new(0.0, spec.noise).expect("validated noise");
    let mut train = Vec::with_capacity(spec.classes * spec.train_per_class);
    let mut test = Vec::with_capacity(spec.classes * spec.test_per_class);
    for (c, centroid) in centroids.iter().enumerate() {
        for k in 0..spec.train_per_class + spec.test_per_class {
            let features: Vec<f64> =
                centroid.iter().map(|&m| m + normal.sample(&mut r)).collect();
            let ex = Example::new(features, c);
            if k < spec.train_per_class {
                train.push(ex);
            } else {
                test.push(ex);
            }
        }
    }
    Dataset::new(spec.classes, spec.features, train, test)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticDatasetSpec {
        SyntheticDatasetSpec {
            classes: 10,
            features: 16,
            train_per_class: 12,
            test_per_class: 4,
            margin: 1.0,
            noise: 0.1,
        }
    }

    #[test]
    fn centroids_respect_the_margin() {
        let mut r = rng::stream(1, "centroid-test");
        for _ in 0..10 {
            let cs = place_centroids(12, 8, 0.8, &mut r).unwrap();
            assert_eq!(cs.len(), 12);
            for i in 0..cs.len() {
                for j in 0..i {
                    let d: f64 = cs[i]
                        .iter()
                        .zip(&cs[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    assert!(d >= 0.8, "centroids {i},{j} at distance {d}");
                }
            }
        }
    }

    #[test]
    fn infeasible_margin_is_a_typed_error() {
        // 40 points pairwise 3 apart cannot fit in [-1,1]^2
        let mut r = rng::stream(2, "infeasible");
        match place_centroids(40, 2, 3.0, &mut r) {
            Err(Error::MarginInfeasible { classes: 40, margin, .. }) => {
                assert_eq!(margin, 3.0);
            }
            other => panic!("expected MarginInfeasible, got {other:?}"),
        }
    }

    #[test]
    fn dataset_has_requested_shape_and_is_deterministic() {
        let ds = generate_synthetic(&spec(), 7, "synth-test").unwrap();
        assert_eq!(ds.num_classes, 10);
        assert_eq!(ds.train.len(), 120);
        assert_eq!(ds.test.len(), 40);
        assert!(ds.train.iter().all(|e| e.features.len() == 16));
        for c in 0..10 {
            assert_eq!(ds.train.iter().filter(|e| e.label == c).count(), 12);
            assert_eq!(ds.test.iter().filter(|e| e.label == c).count(), 4);
        }
        let again = generate_synthetic(&spec(), 7, "synth-test").unwrap();
        let bits = |d: &Dataset| -> Vec<u64> {
            d.train.iter().flat_map(|e| e.features.iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(bits(&ds), bits(&again));
        let other_label = generate_synthetic(&spec(), 7, "other-corpus").unwrap();
        assert_ne!(bits(&ds), bits(&other_label), "labels must decorrelate layouts");
        let other_seed = generate_synthetic(&spec(), 8, "synth-test").unwrap();
        assert_ne!(bits(&ds), bits(&other_seed));
    }

    #[test]
    fn samples_cluster_around_their_centroid() {
        // With tiny noise, per-class means sit near the centroids, which
        // must in turn honor the margin — checked through the class means.
        let tight = SyntheticDatasetSpec { noise: 0.01, ..spec() };
        let ds = generate_synthetic(&tight, 3, "cluster-check").unwrap();
        let mut means = vec![vec![0.0; 16]; 10];
        for ex in &ds.train {
            for (m, v) in means[ex.label].iter_mut().zip(&ex.features) {
                *m += v / 12.0;
            }
        }
        for i in 0..10 {
            for j in 0..i {
                let d: f64 = means[i]
                    .iter()
                    .zip(&means[j])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!(d >= 0.9, "class means {i},{j} at distance {d}");
            }
        }
    }
}
