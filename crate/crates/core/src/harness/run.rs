//! End-to-end experiment execution.
//!
//! A run is three phases. Preparation pretrains the backbone on its own
//! corpus and freezes it. Warm-up produces the prompt tensor. Streaming
//! then trains prompts and head on each batch exactly once — replay buffer
//! aside, no stream data is revisited — while masked cross-entropy limits
//! the loss to classes present in the step's data (per the configured
//! policy). Evaluation is interleaved on a fixed sample cadence and at
//! session boundaries, always with plain unmasked argmax inference.

use std::time::Instant;

use rand_chacha::ChaCha8Rng;

use crate::data::Example;
use crate::error::Error;
use crate::harness::buffer::ReplayBuffer;
use crate::harness::config::ExperimentConfig;
use crate::harness::synth::generate_synthetic;
use crate::isa::{isa_train, pretrain_backbone, IsaArtifacts, IsaConfig, IsaMode, IsaReport, PretrainReport};
use crate::masking::{mask_from_labels, MaskApplication, MaskPolicy, MaskVector, SessionMaskState};
use crate::metrics::{accuracy, AnytimeLog, EvalMatrix};
use crate::model::{predict, Backbone, BackboneConfig, OutputHead, PromptProvenance, PromptSet};
use crate::optim::BaseOptimizer;
use crate::rng;
use crate::stream::{build_stream, Dataset};
use crate::tensor::{ParameterStore, Tape};
use crate::Result;

const PRETRAIN_CORPUS_LABEL: &str = "pretrain-data";
const STREAM_CORPUS_LABEL: &str = "gcl-data";
const STREAM_HEAD: &str = "head";
const EVAL_CHUNK: usize = 64;

/// Frozen-backbone state shared by every arm that reuses a seed.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub store: ParameterStore,
    pub backbone: Backbone,
    pub pretrain_corpus: Dataset,
    pub report: PretrainReport,
}

/// Generates the pretraining corpus, trains the backbone on it, and
/// freezes the result.
pub fn prepare_backbone(config: &ExperimentConfig) -> Result<Prepared> {
    config.validate()?;
    let spec = crate::harness::config::SyntheticDatasetSpec {
        classes: config.pretrain_classes,
        features: config.dataset.features,
        train_per_class: config.pretrain_train_per_class,
        test_per_class: 0,
        margin: config.dataset.margin,
        noise: config.dataset.noise,
    };
    let corpus = generate_synthetic(&spec, config.seed, PRETRAIN_CORPUS_LABEL)?;
    let mut backbone = Backbone::new(BackboneConfig {
        input_dim: config.dataset.features,
        embed_dim: config.model.embed_dim,
        depth: config.model.depth,
        heads: config.model.heads,
        token_len: config.model.token_len,
    })?;
    let mut store = ParameterStore::new();
    backbone.init_params(&mut store, config.seed)?;
    let pretrain =
        crate::isa::PretrainConfig { seed: config.seed, ..config.pretrain };
    let started = Instant::now();
    let report = pretrain_backbone(&mut store, &backbone, &corpus, &pretrain)?;
    backbone.freeze(&mut store);
    log::info!(
        "backbone pretrained to {:.3} train accuracy in {:?}",
        report.final_accuracy,
        started.elapsed()
    );
    Ok(Prepared { store, backbone, pretrain_corpus: corpus, report })
}

/// Runs the configured warm-up against a prepared backbone.
pub fn warm_up(
    config: &ExperimentConfig,
    prepared: &Prepared,
) -> Result<(IsaArtifacts, IsaReport)> {
    let isa = IsaConfig {
        seed: config.seed,
        prompt_len: config.model.prompt_len,
        ..config.isa
    };
    isa_train(&prepared.store, &prepared.backbone, &prepared.pretrain_corpus, &isa)
}

/// Everything a finished run reports. Wall-clock time is deliberately
/// absent: rows must be identical across machines for the same seed.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunResult {
    /// Human-readable arm label, e.g. `mask=batch`.
    pub label: String,
    /// Condition identity (config hash without the seed).
    pub config_hash: String,
    pub seed: u64,
    pub provenance: PromptProvenance,
    pub a_last: f64,
    pub f_last: f64,
    pub a_auc: f64,
    pub matrix: EvalMatrix,
    pub anytime: AnytimeLog,
    /// First column of the matrix over time: retention of the classes
    /// introduced in session one.
    pub session1_retention: Vec<Option<f64>>,
    /// Stream samples consumed; equals the training-set size exactly once.
    pub samples_seen: usize,
    pub train_examples: usize,
    pub steps: usize,
    /// Largest replay buffer occupancy observed — never above capacity.
    pub max_buffer_len: usize,
}

/// The streaming corpus: synthetic clusters by default, or the delimited
/// text file named by `dataset.external_path`, split 80/20 per class with a
/// seed-keyed shuffle. External data must match the configured class count
/// and feature width so the head and masks line up.
fn stream_corpus(config: &ExperimentConfig) -> Result<crate::stream::Dataset> {
    match &config.external_data {
        None => generate_synthetic(&config.dataset, config.seed, STREAM_CORPUS_LABEL),
        Some(path) => {
            let examples = crate::data::load_delimited(std::path::Path::new(path))?;
            let mut split_rng = rng::stream(config.seed, "external-split");
            let (train, test) =
                crate::data::split_per_class(&examples, 0.8, &mut split_rng)?;
            crate::stream::Dataset::new(
                config.dataset.classes,
                config.dataset.features,
                train,
                test,
            )
        }
    }
}

fn expected_provenance(mode: IsaMode) -> PromptProvenance {
    match mode {
        IsaMode::Off => PromptProvenance::Random,
        IsaMode::Naive => PromptProvenance::IsaNaive,
        IsaMode::Sam => PromptProvenance::IsaSam,
        IsaMode::Fam => PromptProvenance::IsaFam,
    }
}

/// Streams the whole dataset through one pass of masked training.
/// `artifacts` must carry prompts whose provenance matches the configured
/// warm-up mode; with warm-up off they may be omitted and fresh random
/// prompts are used.
pub fn run_gcl(
    config: &ExperimentConfig,
    prepared: &Prepared,
    artifacts: Option<IsaArtifacts>,
) -> Result<RunResult> {
    config.validate()?;
    let started = Instant::now();
    let classes = config.dataset.classes;
    let artifacts = match artifacts {
        Some(a) => a,
        None if config.isa.mode == IsaMode::Off => {
            let mut scratch = ParameterStore::new();
            let set = PromptSet::init_random(
                config.model.prompt_len,
                config.model.embed_dim,
                &mut scratch,
                config.seed,
            )?;
            let values = set.values(&scratch)?.clone();
            IsaArtifacts { prompts: values, provenance: PromptProvenance::Random }
        }
        None => return Err(Error::MissingCheckpoint),
    };
    let expected = expected_provenance(config.isa.mode);
    if artifacts.provenance != expected {
        return Err(Error::ProvenanceMismatch {
            found: artifacts.provenance.as_str().to_string(),
            expected: expected.as_str().to_string(),
        });
    }

    let mut store = prepared.store.clone();
    let backbone = &prepared.backbone;
    let prompts = PromptSet::install(artifacts.prompts.clone(), artifacts.provenance, &mut store)?;
    let head = OutputHead::new(STREAM_HEAD, classes, config.model.embed_dim);
    head.init_params(&mut store, config.seed)?;

    let dataset = stream_corpus(config)?;
    let stream_config =
        crate::stream::StreamConfig { seed: config.seed, ..config.stream };
    let (plan, batches) = build_stream(&dataset, &stream_config)?;

    // Column groups: classes first appearing in each session, with their
    // test examples pre-extracted.
    let groups: Vec<Vec<usize>> =
        (0..plan.sessions).map(|s| plan.first_appearing_in(s)).collect();
    let test_by_group: Vec<Vec<Example>> = groups
        .iter()
        .map(|g| dataset.test.iter().filter(|e| g.contains(&e.label)).cloned().collect())
        .collect();

    let mut opt = BaseOptimizer::adam(config.gcl_learning_rate, store.trainable_len());
    let mut mask_state = SessionMaskState::new(classes);
    let mut buffer = ReplayBuffer::new(config.buffer_capacity);
    let mut buffer_rng = rng::stream(config.seed, "replay-buffer");
    let mut matrix = EvalMatrix::new(plan.sessions);
    let mut anytime = AnytimeLog::new();
    let mut observed = vec![false; classes];
    let mut samples_seen = 0usize;
    let mut next_eval = config.eval_period_samples;
    let mut steps = 0usize;
    let mut max_buffer_len = 0usize;
    let mut finished_session: Option<usize> = None;

    for batch in &batches {
        if batch.is_session_start {
            if let Some(done) = finished_session {
                push_session_row(
                    &mut matrix, &store, backbone, &prompts, &head, &test_by_group, done,
                )?;
            }
            finished_session = Some(batch.session_index);
        }
        train_step(
            config, &mut store, backbone, &head, batch.session_index, batch.is_session_start,
            &batch.examples, &mut mask_state, &mut buffer, &mut buffer_rng, &mut opt, steps,
        )?;
        for ex in &batch.examples {
            buffer.observe(ex, &mut buffer_rng);
            observed[ex.label] = true;
        }
        max_buffer_len = max_buffer_len.max(buffer.len());
        samples_seen += batch.examples.len();
        steps += 1;
        while samples_seen >= next_eval {
            let test_seen: Vec<Example> =
                dataset.test.iter().filter(|e| observed[e.label]).cloned().collect();
            let acc = evaluate(&store, backbone, &prompts, &head, &test_seen)?;
            anytime.push(next_eval, acc)?;
            next_eval += config.eval_period_samples;
        }
    }
    if let Some(done) = finished_session {
        push_session_row(&mut matrix, &store, backbone, &prompts, &head, &test_by_group, done)?;
    }

    if samples_seen != dataset.train.len() {
        return Err(Error::InvalidDataset(format!(
            "stream emitted {samples_seen} samples for {} training examples",
            dataset.train.len()
        )));
    }

    let a_last = matrix.a_last()?;
    let f_last = matrix.f_last()?;
    let a_auc = anytime.a_auc()?;
    let session1_retention = matrix.retention_curve(0)?;
    log::info!(
        "stream finished: {} steps, a_last {:.3}, f_last {:.3}, a_auc {:.3} in {:?}",
        steps,
        a_last,
        f_last,
        a_auc,
        started.elapsed()
    );
    Ok(RunResult {
        label: format!(
            "mask={},isa={},buffer={}",
            config.mask_policy.as_str(),
            config.isa.mode,
            config.buffer_capacity
        ),
        config_hash: config.hash(),
        seed: config.seed,
        provenance: artifacts.provenance,
        a_last,
        f_last,
        a_auc,
        matrix,
        anytime,
        session1_retention,
        samples_seen,
        train_examples: dataset.train.len(),
        steps,
        max_buffer_len,
    })
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    config: &ExperimentConfig,
    store: &mut ParameterStore,
    backbone: &Backbone,
    head: &OutputHead,
    session_index: usize,
    is_session_start: bool,
    stream_examples: &[Example],
    mask_state: &mut SessionMaskState,
    buffer: &mut ReplayBuffer,
    buffer_rng: &mut ChaCha8Rng,
    opt: &mut BaseOptimizer,
    step: usize,
) -> Result<()> {
    let classes = config.dataset.classes;
    let mut combined: Vec<Example> = stream_examples.to_vec();
    combined.extend(buffer.sample(config.replay_size, buffer_rng));
    let labels: Vec<usize> = combined.iter().map(|e| e.label).collect();

    // The state tracks both scopes regardless of policy so session
    // ordering stays enforced; the policy picks which bits to apply.
    mask_state.update_session_mask(session_index, is_session_start, &labels)?;
    let mask = match config.mask_policy {
        MaskPolicy::None => MaskVector::ones(classes, MaskPolicy::None),
        MaskPolicy::Batch => mask_from_labels(&labels, classes)?,
        MaskPolicy::Session => mask_state.session_mask(),
        MaskPolicy::Seen => mask_state.seen_mask(),
    };

    // Every step: batch bits are exactly the step's label set, and the
    // scopes nest batch ⊆ session ⊆ seen.
    #[cfg(debug_assertions)]
    {
        let batch_bits = mask_from_labels(&labels, classes)?;
        for c in 0..classes {
            debug_assert_eq!(
                batch_bits.contains(c),
                labels.contains(&c),
                "step {step}: batch mask bit {c} disagrees with the label set"
            );
        }
        let session_bits = mask_state.session_mask();
        debug_assert!(batch_bits.is_subset_of(&session_bits), "step {step}: batch ⊄ session");
        debug_assert!(
            session_bits.is_subset_of(&mask_state.seen_mask()),
            "step {step}: session ⊄ seen"
        );
    }

    let mut tape = Tape::new();
    let p = tape.leaf(store, crate::model::PROMPT_PARAM)?;
    let (tokens, block) = backbone.forward_tokens(&mut tape, store, &combined, Some(p))?;
    let pooled = tape.mean_pool_blocks(tokens, block)?;
    let logits = head.logits(&mut tape, store, pooled)?;
    let loss = match config.mask_application {
        MaskApplication::Exclude => {
            tape.masked_softmax_cross_entropy(logits, &labels, mask.bits())?
        }
        MaskApplication::Multiply => {
            let zeroed = tape.mul_mask(logits, mask.bits())?;
            tape.masked_softmax_cross_entropy(zeroed, &labels, &vec![true; classes])?
        }
    };
    if !tape.scalar(loss)?.is_finite() {
        return Err(Error::TrainingDiverged { step });
    }
    let grad = tape.backward(loss, store)?;
    opt.base_step(store, &grad)
}

fn push_session_row(
    matrix: &mut EvalMatrix,
    store: &ParameterStore,
    backbone: &Backbone,
    prompts: &PromptSet,
    head: &OutputHead,
    test_by_group: &[Vec<Example>],
    finished_session: usize,
) -> Result<()> {
    let mut row = Vec::with_capacity(test_by_group.len());
    for (j, group_test) in test_by_group.iter().enumerate() {
        if j > finished_session || group_test.is_empty() {
            row.push(None);
        } else {
            row.push(Some(evaluate(store, backbone, prompts, head, group_test)?));
        }
    }
    matrix.push_row(row)
}

/// Accuracy of unmasked argmax prediction over a test set, computed in
/// chunks. Evaluation must not move parameters; the fingerprint guard
/// catches any regression in debug and test builds.
pub fn evaluate(
    store: &ParameterStore,
    backbone: &Backbone,
    prompts: &PromptSet,
    head: &OutputHead,
    examples: &[Example],
) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::InvalidDataset("evaluation set is empty".into()));
    }
    let fingerprint = store.full_fingerprint();
    let mut predictions = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_CHUNK) {
        predictions.extend(predict(store, backbone, Some(prompts), head, chunk)?);
    }
    debug_assert_eq!(
        store.full_fingerprint(),
        fingerprint,
        "evaluation must be read-only"
    );
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    accuracy(&predictions, &labels)
}

/// Loss and gradient of one masked training batch against the current
/// parameters — the same computation `train_step` performs, exposed so
/// tests can check gradients and masking behavior in isolation.
pub fn batch_loss_grad(
    config: &ExperimentConfig,
    store: &ParameterStore,
    backbone: &Backbone,
    head: &OutputHead,
    examples: &[Example],
    mask: &MaskVector,
) -> Result<(f64, crate::tensor::GradVector)> {
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let mut tape = Tape::new();
    let p = tape.leaf(store, crate::model::PROMPT_PARAM)?;
    let (tokens, block) = backbone.forward_tokens(&mut tape, store, examples, Some(p))?;
    let pooled = tape.mean_pool_blocks(tokens, block)?;
    let logits = head.logits(&mut tape, store, pooled)?;
    let loss = match config.mask_application {
        MaskApplication::Exclude => {
            tape.masked_softmax_cross_entropy(logits, &labels, mask.bits())?
        }
        MaskApplication::Multiply => {
            let zeroed = tape.mul_mask(logits, mask.bits())?;
            tape.masked_softmax_cross_entropy(zeroed, &labels, &vec![true; mask.width()])?
        }
    };
    Ok((tape.scalar(loss)?, tape.backward(loss, store)?))
}

/// Small but complete configuration that runs in well under a second,
/// shared by harness tests.
#[cfg(test)]
pub(crate) fn fast_config() -> ExperimentConfig {
    let mut config = ExperimentConfig::default();
    config.dataset.classes = 8;
    config.dataset.train_per_class = 10;
    config.dataset.test_per_class = 4;
    config.dataset.features = 8;
    config.pretrain_classes = 4;
    config.pretrain_train_per_class = 20;
    config.pretrain.epochs = 6;
    config.pretrain.batch_size = 16;
    config.pretrain.learning_rate = 0.01;
    config.pretrain.min_train_accuracy = 0.6;
    config.model.embed_dim = 8;
    config.model.token_len = 2;
    config.stream.sessions = 3;
    config.stream.batch_size = 16;
    config.isa.epochs = 1;
    config.isa.batch_size = 16;
    config.isa.ood_fraction = 0.25;
    config.eval_period_samples = 40;
    config
}
