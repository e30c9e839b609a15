//! Bounded replay memory with reservoir admission.
//!
//! Every stream example is offered once; the reservoir rule keeps each of
//! the `t` examples seen so far with equal probability `capacity / t`, so
//! memory stays uniform over the past without storing it.

use rand::seq::index::sample as index_sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Example;

#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    seen: usize,
    items: Vec<Example>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity, seen: 0, items: Vec::with_capacity(capacity) }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Examples offered so far.
    pub fn seen(&self) -> usize {
        self.seen
    }

    /// Offers one example. Below capacity it is stored; afterwards it
    /// replaces a uniformly random slot with probability `capacity / seen`.
    pub fn observe(&mut self, example: &Example, r: &mut ChaCha8Rng) {
        self.seen += 1;
        if self.capacity == 0 {
            return;
        }
        if self.items.len() < self.capacity {
            self.items.push(example.clone());
        } else {
            let slot = r.random_range(0..self.seen);
            if slot < self.capacity {
                self.items[slot] = example.clone();
            }
        }
    }

    /// Up to `k` distinct stored examples, uniformly without replacement.
    pub fn sample(&self, k: usize, r: &mut ChaCha8Rng) -> Vec<Example> {
        let k = k.min(self.items.len());
        if k == 0 {
            return Vec::new();
        }
        index_sample(r, self.items.len(), k)
            .into_iter()
            .map(|i| self.items[i].clone())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn item(id: usize) -> Example {
        Example::new(vec![id as f64], id % 7)
    }

    #[test]
    fn never_exceeds_capacity_and_counts_offers() {
        let mut r = rng::stream(1, "buffer-cap");
        let mut buf = ReplayBuffer::new(8);
        for i in 0..100 {
            buf.observe(&item(i), &mut r);
            assert!(buf.len() <= 8);
        }
        assert_eq!(buf.len(), 8);
        assert_eq!(buf.seen(), 100);
    }

    #[test]
    fn zero_capacity_stores_nothing() {
        let mut r = rng::stream(2, "buffer-zero");
        let mut buf = ReplayBuffer::new(0);
        for i in 0..50 {
            buf.observe(&item(i), &mut r);
        }
        assert!(buf.is_empty());
        assert!(buf.sample(4, &mut r).is_empty());
        assert_eq!(buf.seen(), 50);
    }

    #[test]
    fn retention_is_uniform_over_the_stream() {
        // capacity 10 over 100 offers: each example should survive in
        // roughly 10% of independent trials.
        let capacity = 10;
        let stream_len = 100;
        let trials = 3000;
        let mut kept = vec![0usize; stream_len];
        for t in 0..trials {
            let mut r = rng::stream(t as u64, "buffer-freq");
            let mut buf = ReplayBuffer::new(capacity);
            for i in 0..stream_len {
                buf.observe(&item(i), &mut r);
            }
            for ex in buf.sample(capacity, &mut r) {
                kept[ex.features[0] as usize] += 1;
            }
        }
        let expected = trials as f64 * capacity as f64 / stream_len as f64;
        for (i, &n) in kept.iter().enumerate() {
            assert!(
                (n as f64 - expected).abs() <= 0.25 * expected,
                "item {i} retained {n} times, expected about {expected}"
            );
        }
    }

    #[test]
    fn sampling_is_distinct_and_bounded() {
        let mut r = rng::stream(3, "buffer-sample");
        let mut buf = ReplayBuffer::new(20);
        for i in 0..20 {
            buf.observe(&item(i), &mut r);
        }
        let s = buf.sample(50, &mut r);
        assert_eq!(s.len(), 20, "bounded by content");
        let s = buf.sample(5, &mut r);
        let mut ids: Vec<usize> = s.iter().map(|e| e.features[0] as usize).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 5, "samples must be distinct");
    }
}
