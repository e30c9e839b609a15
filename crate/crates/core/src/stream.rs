//! Stochastic blurry stream construction.
//!
//! A stream interleaves two class populations: *disjoint* classes, whose
//! samples all arrive inside one home session, and *blurry* classes, whose
//! samples mostly arrive in a home session but partially leak into the
//! others. Both populations are split across sessions with non-uniform
//! random partitions, so session sizes, class counts, and per-class counts
//! all vary. Every training example is emitted exactly once.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::data::Example;
use crate::error::Error;
use crate::rng;
use crate::Result;

const RELOCATION_ATTEMPTS: usize = 10;

/// A labeled dataset with a train/test split and dense class ids.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub train: Vec<Example>,
    pub test: Vec<Example>,
}

impl Dataset {
    /// Validates shape consistency, label ranges, and that every class has
    /// at least one training example.
    pub fn new(
        num_classes: usize,
        feature_dim: usize,
        train: Vec<Example>,
        test: Vec<Example>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidDataset("num_classes must be positive".into()));
        }
        if feature_dim == 0 {
            return Err(Error::InvalidDataset("feature_dim must be positive".into()));
        }
        if train.is_empty() {
            return Err(Error::InvalidDataset("train split is empty".into()));
        }
        let mut seen = vec![false; num_classes];
        for (split, examples) in [("train", &train), ("test", &test)] {
            for ex in examples.iter() {
                if ex.label >= num_classes {
                    return Err(Error::LabelOutOfRange { label: ex.label, classes: num_classes });
                }
                if ex.features.len() != feature_dim {
                    return Err(Error::InvalidDataset(format!(
                        "{split} example has {} features, expected {feature_dim}",
                        ex.features.len()
                    )));
                }
                if split == "train" {
                    seen[ex.label] = true;
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidDataset(format!(
                "class {missing} has no training examples"
            )));
        }
        Ok(Dataset { num_classes, feature_dim, train, test })
    }
}

/// Stream shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StreamConfig {
    /// Fraction of classes made disjoint (confined to one session).
    pub disjoint_ratio: f64,
    /// Fraction of blurry-class samples relocated outside their home session.
    pub blurry_ratio: f64,
    pub sessions: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        StreamConfig {
            disjoint_ratio: 0.5,
            blurry_ratio: 0.1,
            sessions: 5,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("disjoint_ratio", self.disjoint_ratio), ("blurry_ratio", self.blurry_ratio)] {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                return Err(Error::InvalidStreamConfig(format!(
                    "{name} must lie in [0, 1], got {v}"
                )));
            }
        }
        if self.sessions == 0 {
            return Err(Error::InvalidStreamConfig("sessions must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidStreamConfig("batch_size must be positive".into()));
        }
        Ok(())
    }
}

/// One unit of stream arrival.
#[derive(Debug, Clone)]
pub struct StreamBatch {
    pub session_index: usize,
    /// True only on the first batch of a session.
    pub is_session_start: bool,
    /// Batch counter across the whole stream, starting at 0.
    pub global_step: usize,
    pub examples: Vec<Example>,
}

/// Materialized composition of a stream: which classes went where.
#[derive(Debug, Clone)]
pub struct SessionPlan {
    pub num_classes: usize,
    pub sessions: usize,
    /// Sorted class ids confined to their home session.
    pub disjoint_classes: Vec<usize>,
    /// Sorted class ids whose samples may leak across sessions.
    pub blurry_classes: Vec<usize>,
    /// Home session per class id.
    pub home_session: Vec<usize>,
    /// `counts[s][c]` = samples of class `c` emitted during session `s`.
    pub session_class_counts: Vec<Vec<usize>>,
    /// Number of blurry samples emitted outside their home session.
    pub relocated: usize,
}

impl SessionPlan {
    /// Classes with at least one sample in session `s`.
    pub fn classes_in_session(&self, s: usize) -> Vec<usize> {
        self.session_class_counts[s]
            .iter()
            .enumerate()
            .filter(|(_, &n)| n > 0)
            .map(|(c, _)| c)
            .collect()
    }

    /// Earliest session in which class `c` is emitted.
    pub fn first_appearance(&self, c: usize) -> Option<usize> {
        (0..self.sessions).find(|&s| self.session_class_counts[s][c] > 0)
    }

    /// Classes whose earliest emission is session `s`, sorted.
    pub fn first_appearing_in(&self, s: usize) -> Vec<usize> {
        (0..self.num_classes)
            .filter(|&c| self.first_appearance(c) == Some(s))
            .collect()
    }

    /// Plain-text table of per-session class composition.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "sessions={} classes={} disjoint={:?} blurry={:?} relocated={}\n",
            self.sessions, self.num_classes, self.disjoint_classes, self.blurry_classes,
            self.relocated
        ));
        for s in 0..self.sessions {
            let present = self.classes_in_session(s);
            let total: usize = self.session_class_counts[s].iter().sum();
            out.push_str(&format!("session {s}: {total} samples, classes "));
            for (i, c) in present.iter().enumerate() {
                if i > 0 {
                    out.push(' ');
                }
                out.push_str(&format!("{c}x{}", self.session_class_counts[s][*c]));
            }
            out.push('\n');
        }
        out
    }
}

/// Splits class ids into disjoint and blurry populations.
/// `|disjoint| = round(ratio * num_classes)`, membership drawn at random.
pub fn split_classes(
    num_classes: usize,
    disjoint_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let n_disjoint = (disjoint_ratio * num_classes as f64).round() as usize;
    let mut ids: Vec<usize> = (0..num_classes).collect();
    ids.shuffle(rng);
    let mut disjoint: Vec<usize> = ids[..n_disjoint].to_vec();
    let mut blurry: Vec<usize> = ids[n_disjoint..].to_vec();
    disjoint.sort_unstable();
    blurry.sort_unstable();
    (disjoint, blurry)
}

/// Partitions `items` into `parts` groups of random, generally unequal
/// sizes: the shuffled list is cut at `parts - 1` distinct positions. Every
/// group is non-empty, so fewer items than parts is an error; an empty item
/// list yields all-empty groups.
pub fn partition_nonuniform(
    items: &[usize],
    parts: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    if parts == 0 {
        return Err(Error::InvalidStreamConfig("cannot partition into zero parts".into()));
    }
    if items.is_empty() {
        return Ok(vec![Vec::new(); parts]);
    }
    if items.len() < parts {
        return Err(Error::InfeasiblePartition { classes: items.len(), sessions: parts });
    }
    let mut shuffled = items.to_vec();
    shuffled.shuffle(rng);
    let mut positions: Vec<usize> = (1..shuffled.len()).collect();
    positions.shuffle(rng);
    let mut cuts: Vec<usize> = positions[..parts - 1].to_vec();
    cuts.sort_unstable();
    cuts.push(shuffled.len());
    let mut groups = Vec::with_capacity(parts);
    let mut start = 0;
    for cut in cuts {
        groups.push(shuffled[start..cut].to_vec());
        start = cut;
    }
    Ok(groups)
}

/// Picks `round(ratio * pool.len())` indices from `pool` without
/// replacement: the samples that will leave their home session.
pub fn choose_relocated(pool: &[usize], ratio: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let k = (ratio * pool.len() as f64).round() as usize;
    let mut shuffled = pool.to_vec();
    shuffled.shuffle(rng);
    shuffled.truncate(k);
    shuffled
}

fn loop_relocation(
    dataset: &Dataset,
    home_session: &[usize],
    moves: &[bool],
    t: usize,
    r: &mut ChaCha8Rng,
) -> Result<Vec<Vec<usize>>> {
    let mut attempts = 0;
    loop {
        attempts += 1;
        let mut sessions: Vec<Vec<usize>> = vec![Vec::new(); t];
        for (i, ex) in dataset.train.iter().enumerate() {
            let home = home_session[ex.label];
            let target = if moves[i] && t > 1 {
                // Uniform over every session except home.
                let mut draw = r.random_range(0..t - 1);
                if draw >= home {
                    draw += 1;
                }
                draw
            } else {
                home
            };
            sessions[target].push(i);
        }
        match sessions.iter().position(|s| s.is_empty()) {
            Some(empty) if attempts >= RELOCATION_ATTEMPTS => {
                return Err(Error::EmptySession { session: empty, attempts });
            }
            Some(_) => continue,
            None => return Ok(sessions),
        }
    }
}

/// Builds the full stream: session plan plus the batched arrival order.
pub fn build_stream(dataset: &Dataset, config: &StreamConfig) -> Result<(SessionPlan, Vec<StreamBatch>)> {
    config.validate()?;
    let t = config.sessions;
    let mut r = rng::stream(config.seed, "stream-plan");

    let (disjoint, blurry) = split_classes(dataset.num_classes, config.disjoint_ratio, &mut r);
    let disjoint_groups = partition_nonuniform(&disjoint, t, &mut r)?;
    let blurry_groups = partition_nonuniform(&blurry, t, &mut r)?;

    let mut home_session = vec![0usize; dataset.num_classes];
    for groups in [&disjoint_groups, &blurry_groups] {
        for (s, group) in groups.iter().enumerate() {
            for &c in group {
                home_session[c] = s;
            }
        }
    }

    let is_blurry = {
        let mut flags = vec![false; dataset.num_classes];
        for &c in &blurry {
            flags[c] = true;
        }
        flags
    };
    let blurry_pool: Vec<usize> = dataset
        .train
        .iter()
        .enumerate()
        .filter(|(_, ex)| is_blurry[ex.label])
        .map(|(i, _)| i)
        .collect();
    let relocated_ids = choose_relocated(&blurry_pool, config.blurry_ratio, &mut r);
    let mut moves = vec![false; dataset.train.len()];
    for &i in &relocated_ids {
        moves[i] = true;
    }

    // Draw relocation targets, re-drawing wholesale if a session ends up
    // with no samples at all (possible only in extreme configurations).
    let mut sessions_examples = loop_relocation(dataset, &home_session, &moves, t, &mut r)?;

    let mut session_class_counts = vec![vec![0usize; dataset.num_classes]; t];
    for (s, ids) in sessions_examples.iter().enumerate() {
        for &i in ids {
            session_class_counts[s][dataset.train[i].label] += 1;
        }
    }
    let relocated = relocated_ids.len();
    let plan = SessionPlan {
        num_classes: dataset.num_classes,
        sessions: t,
        disjoint_classes: disjoint,
        blurry_classes: blurry,
        home_session,
        session_class_counts,
        relocated,
    };

    let mut batches = Vec::new();
    let mut global_step = 0;
    for (s, ids) in sessions_examples.iter_mut().enumerate() {
        ids.shuffle(&mut r);
        for (b, chunk) in ids.chunks(config.batch_size).enumerate() {
            batches.push(StreamBatch {
                session_index: s,
                is_session_start: b == 0,
                global_step,
                examples: chunk.iter().map(|&i| dataset.train[i].clone()).collect(),
            });
            global_step += 1;
        }
    }
    Ok((plan, batches))
}
