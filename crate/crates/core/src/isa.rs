//! Initial-session warm-up of prompt parameters.
//!
//! Before any stream data arrives, the backbone is trained on a pretraining
//! corpus and frozen. Prompts are then warmed up on that same corpus: each
//! step runs the prompts through a residual bottleneck adapter, prepends
//! them to the frozen backbone, and minimizes classification loss, with
//! optional sharpness-aware or forgetting-aware perturbation around the
//! update. At the end the adapter output is folded into the prompt values
//! and the adapter, warm-up head, and warm-up optimizer state are all
//! discarded; only the composed prompt tensor moves forward.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::Example;
use crate::error::Error;
use crate::model::{
    Backbone, OutputHead, PromptAugmentMlp, PromptProvenance, PromptSet, PROMPT_PARAM,
};
use crate::optim::{fam_step, sam_step, BaseOptimizer, StepReport};
use crate::rng;
use crate::stream::Dataset;
use crate::tensor::{ParameterStore, Tape, Tensor};
use crate::Result;

/// Which warm-up variant to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum IsaMode {
    /// Skip warm-up; prompts stay at their random initialization.
    Off,
    /// Plain gradient steps.
    Naive,
    /// Ascend along the batch gradient before each update.
    Sam,
    /// Descend along a held-out-class gradient before each update.
    Fam,
}

impl IsaMode {
    pub const ALL: [IsaMode; 4] = [IsaMode::Off, IsaMode::Naive, IsaMode::Sam, IsaMode::Fam];

    pub fn as_str(self) -> &'static str {
        match self {
            IsaMode::Off => "off",
            IsaMode::Naive => "naive",
            IsaMode::Sam => "sam",
            IsaMode::Fam => "fam",
        }
    }
}

impl std::str::FromStr for IsaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "off" => Ok(IsaMode::Off),
            "naive" => Ok(IsaMode::Naive),
            "sam" => Ok(IsaMode::Sam),
            "fam" => Ok(IsaMode::Fam),
            other => Err(Error::InvalidConfig(format!(
                "unknown warm-up mode {other:?} (expected off|naive|sam|fam)"
            ))),
        }
    }
}

impl std::fmt::Display for IsaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Backbone pretraining parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Sanity gate on final train accuracy; an undertrained backbone would
    /// make every downstream comparison meaningless.
    pub min_train_accuracy: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            min_train_accuracy: 0.8,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("pretrain batch_size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "pretrain learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.min_train_accuracy) {
            return Err(Error::InvalidConfig(format!(
                "min_train_accuracy must lie in [0, 1], got {}",
                self.min_train_accuracy
            )));
        }
        Ok(())
    }
}

/// Outcome of backbone pretraining.
#[derive(Debug, Clone)]
pub struct PretrainReport {
    /// Train accuracy measured after each epoch.
    pub accuracy_curve: Vec<f64>,
    pub final_accuracy: f64,
    pub steps: usize,
}

/// Warm-up parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct IsaConfig {
    pub mode: IsaMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Perturbation radius for the sam/fam modes.
    pub rho: f64,
    /// Fraction of pretraining classes held out as the out-of-distribution
    /// pool (fam only). Zero falls back to sam with a warning.
    pub ood_fraction: f64,
    /// Gaussian noise scale for input distortion during warm-up.
    pub noise_strength: f64,
    pub prompt_len: usize,
    pub seed: u64,
}

impl Default for IsaConfig {
    fn default() -> Self {
        IsaConfig {
            mode: IsaMode::Fam,
            epochs: 3,
            batch_size: 32,
            learning_rate: 1e-4,
            rho: 0.05,
            ood_fraction: 0.1,
            noise_strength: 0.1,
            prompt_len: PromptSet::DEFAULT_LEN,
            seed: 0,
        }
    }
}

impl IsaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("warm-up batch_size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("warm-up learning_rate must be finite".into()));
        }
        if !self.rho.is_finite() || self.rho < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "perturbation radius must be finite and non-negative, got {}",
                self.rho
            )));
        }
        if !(0.0..1.0).contains(&self.ood_fraction) {
            return Err(Error::InvalidConfig(format!(
                "ood_fraction must lie in [0, 1), got {}",
                self.ood_fraction
            )));
        }
        if !self.noise_strength.is_finite() || self.noise_strength < 0.0 {
            return Err(Error::InvalidConfig("noise_strength must be finite".into()));
        }
        if self.prompt_len == 0 {
            return Err(Error::InvalidConfig("prompt_len must be positive".into()));
        }
        Ok(())
    }
}

/// One logged warm-up step.
#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct IsaStepLog {
    pub step: usize,
    /// Loss whose gradient was applied.
    pub loss: f64,
    /// Norm of the applied gradient.
    pub grad_norm: f64,
    /// Realized perturbation radius (zero for naive steps and fallbacks).
    pub perturb_norm: f64,
}

/// Diagnostics from a warm-up run.
#[derive(Debug, Clone, Default)]
pub struct IsaReport {
    pub steps: Vec<IsaStepLog>,
    /// Set when fam was requested but no held-out pool could be formed.
    pub fell_back_to_sam: bool,
    /// Classes held out as the out-of-distribution pool.
    pub ood_classes: Vec<usize>,
}

/// What survives warm-up: the composed prompt tensor and its origin.
#[derive(Debug, Clone)]
pub struct IsaArtifacts {
    pub prompts: Tensor,
    pub provenance: PromptProvenance,
}

const WARMUP_HEAD: &str = "warmup_head";
const PRETRAIN_HEAD: &str = "pretrain_head";

/// Trains the backbone (plus a temporary linear head) on the pretraining
/// corpus with plain cross-entropy, verifies the accuracy gate, and removes
/// the temporary head. The caller freezes the backbone afterwards. With
/// zero epochs nothing is trained and the gate is skipped, which serves as
/// the no-pretraining ablation.
pub fn pretrain_backbone(
    store: &mut ParameterStore,
    backbone: &Backbone,
    dataset: &Dataset,
    config: &PretrainConfig,
) -> Result<PretrainReport> {
    config.validate()?;
    let head = OutputHead::new(PRETRAIN_HEAD, dataset.num_classes, backbone.config.embed_dim);
    head.init_params(store, config.seed)?;
    let mut opt = BaseOptimizer::adam(config.learning_rate, store.trainable_len());
    let mut order_rng = rng::stream(config.seed, "pretrain-order");
    let ones = vec![true; dataset.num_classes];
    let mut indices: Vec<usize> = (0..dataset.train.len()).collect();
    let mut curve = Vec::with_capacity(config.epochs);
    let mut steps = 0;
    for _ in 0..config.epochs {
        indices.shuffle(&mut order_rng);
        for chunk in indices.chunks(config.batch_size) {
            let batch: Vec<Example> =
                chunk.iter().map(|&i| dataset.train[i].clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
            let mut tape = Tape::new();
            let logits =
                crate::model::forward(&mut tape, store, backbone, None, &head, &batch)?;
            let loss = tape.masked_softmax_cross_entropy(logits, &labels, &ones)?;
            if !tape.scalar(loss)?.is_finite() {
                return Err(Error::TrainingDiverged { step: steps });
            }
            let grad = tape.backward(loss, store)?;
            opt.base_step(store, &grad)?;
            steps += 1;
        }
        curve.push(train_accuracy(store, backbone, &head, &dataset.train)?);
    }
    let final_accuracy = curve.last().copied().unwrap_or(0.0);
    let gate_failed = config.epochs > 0 && final_accuracy < config.min_train_accuracy;
    store.remove_prefix(&format!("{PRETRAIN_HEAD}."));
    if gate_failed {
        return Err(Error::PretrainingFailure {
            accuracy: final_accuracy,
            required: config.min_train_accuracy,
            curve,
        });
    }
    Ok(PretrainReport { accuracy_curve: curve, final_accuracy, steps })
}

fn train_accuracy(
    store: &ParameterStore,
    backbone: &Backbone,
    head: &OutputHead,
    examples: &[Example],
) -> Result<f64> {
    let mut hits = 0usize;
    for chunk in examples.chunks(64) {
        let preds = crate::model::predict(store, backbone, None, head, chunk)?;
        hits += preds.iter().zip(chunk).filter(|(p, e)| **p == e.label).count();
    }
    Ok(hits as f64 / examples.len() as f64)
}

/// Class-disjoint split of the pretraining corpus into in-distribution and
/// held-out out-of-distribution examples.
#[derive(Debug, Clone)]
pub struct IdOodSplit {
    pub id: Vec<Example>,
    pub ood: Vec<Example>,
    pub ood_classes: Vec<usize>,
}

/// Holds out `max(1, round(fraction * num_classes))` randomly chosen
/// classes. A zero fraction holds out nothing; holding out every class is
/// rejected.
pub fn split_id_ood(dataset: &Dataset, ood_fraction: f64, seed: u64) -> Result<IdOodSplit> {
    if ood_fraction == 0.0 {
        return Ok(IdOodSplit { id: dataset.train.clone(), ood: Vec::new(), ood_classes: Vec::new() });
    }
    let c = dataset.num_classes;
    let k = ((ood_fraction * c as f64).round() as usize).max(1);
    if k >= c {
        return Err(Error::InvalidConfig(format!(
            "holding out {k} of {c} classes leaves no in-distribution data"
        )));
    }
    let mut r = rng::stream(seed, "isa-ood-split");
    let mut ids: Vec<usize> = (0..c).collect();
    ids.shuffle(&mut r);
    let mut ood_classes: Vec<usize> = ids[..k].to_vec();
    ood_classes.sort_unstable();
    let is_ood = {
        let mut flags = vec![false; c];
        for &cl in &ood_classes {
            flags[cl] = true;
        }
        flags
    };
    let mut id = Vec::new();
    let mut ood = Vec::new();
    for ex in &dataset.train {
        if is_ood[ex.label] {
            ood.push(ex.clone());
        } else {
            id.push(ex.clone());
        }
    }
    Ok(IdOodSplit { id, ood, ood_classes })
}

/// One distortion pass: per-feature scaling drawn from `U[0.8, 1.2]` plus
/// Gaussian noise with the given standard deviation.
pub fn distort(features: &[f64], noise_strength: f64, r: &mut ChaCha8Rng) -> Vec<f64> {
    let normal = Normal::new(0.0, noise_strength).expect("validated noise scale");
    features
        .iter()
        .map(|&f| {
            let scale: f64 = r.random_range(0.8..1.2);
            f * scale + normal.sample(r)
        })
        .collect()
}

/// Applies `passes` distortion rounds to each example. Held-out batches get
/// two passes so they sit further from the training distribution than the
/// singly distorted in-distribution batches.
pub fn distort_examples(
    examples: &[Example],
    noise_strength: f64,
    passes: usize,
    r: &mut ChaCha8Rng,
) -> Vec<Example> {
    examples
        .iter()
        .map(|ex| {
            let mut f = ex.features.clone();
            for _ in 0..passes {
                f = distort(&f, noise_strength, r);
            }
            Example::new(f, ex.label)
        })
        .collect()
}

/// Composes the final prompt values: the adapter's residual output applied
/// to the raw prompt parameters, evaluated once with no gradient kept.
pub fn compose_prompts(store: &ParameterStore, mlp: &PromptAugmentMlp) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = tape.leaf(store, PROMPT_PARAM)?;
    let composed = mlp.augment(&mut tape, store, p)?;
    Ok(tape.value(composed).clone())
}

/// Runs the warm-up and returns the composed prompts. The input store is
/// only read: warm-up happens on a private copy that is dropped afterwards
/// together with the adapter and temporary head.
pub fn isa_train(
    base_store: &ParameterStore,
    backbone: &Backbone,
    dataset: &Dataset,
    config: &IsaConfig,
) -> Result<(IsaArtifacts, IsaReport)> {
    config.validate()?;
    let embed_dim = backbone.config.embed_dim;
    if config.mode == IsaMode::Off {
        let mut scratch = ParameterStore::new();
        let prompts =
            PromptSet::init_random(config.prompt_len, embed_dim, &mut scratch, config.seed)?;
        let values = prompts.values(&scratch)?.clone();
        return Ok((
            IsaArtifacts { prompts: values, provenance: PromptProvenance::Random },
            IsaReport::default(),
        ));
    }
    if !backbone.is_frozen() {
        return Err(Error::InvalidConfig(
            "warm-up requires a frozen backbone; freeze it after pretraining".into(),
        ));
    }

    let mut store = base_store.clone();
    let _ = PromptSet::init_random(config.prompt_len, embed_dim, &mut store, config.seed)?;
    let mlp = PromptAugmentMlp::new(embed_dim);
    mlp.init_params(&mut store, config.seed)?;
    let head = OutputHead::new(WARMUP_HEAD, dataset.num_classes, embed_dim);
    head.init_params(&mut store, config.seed)?;

    let mut report = IsaReport::default();
    let mut mode = config.mode;
    let split = if mode == IsaMode::Fam {
        let split = split_id_ood(dataset, config.ood_fraction, config.seed)?;
        if split.ood.is_empty() {
            log::warn!("no held-out pool available; warming up with sam instead of fam");
            report.fell_back_to_sam = true;
            mode = IsaMode::Sam;
        }
        split
    } else {
        IdOodSplit { id: dataset.train.clone(), ood: Vec::new(), ood_classes: Vec::new() }
    };
    report.ood_classes = split.ood_classes.clone();

    let ones = vec![true; dataset.num_classes];
    let mut loss_fn = |s: &ParameterStore, batch: &[Example]| {
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
        let mut tape = Tape::new();
        let p = tape.leaf(s, PROMPT_PARAM)?;
        let p_aug = mlp.augment(&mut tape, s, p)?;
        let (tokens, block) = backbone.forward_tokens(&mut tape, s, batch, Some(p_aug))?;
        let pooled = tape.mean_pool_blocks(tokens, block)?;
        let logits = head.logits(&mut tape, s, pooled)?;
        let loss = tape.masked_softmax_cross_entropy(logits, &labels, &ones)?;
        let value = tape.scalar(loss)?;
        let grad = tape.backward(loss, s)?;
        Ok((value, grad))
    };

    let mut opt = BaseOptimizer::adam(config.learning_rate, store.trainable_len());
    let mut data_rng = rng::stream(config.seed, "isa-data");
    let mut indices: Vec<usize> = (0..split.id.len()).collect();
    let mut step = 0usize;
    for _ in 0..config.epochs {
        indices.shuffle(&mut data_rng);
        for chunk in indices.chunks(config.batch_size) {
            let raw: Vec<Example> = chunk.iter().map(|&i| split.id[i].clone()).collect();
            let id_batch = distort_examples(&raw, config.noise_strength, 1, &mut data_rng);
            let info: StepReport = match mode {
                IsaMode::Fam => {
                    let ood_raw: Vec<Example> = (0..config.batch_size)
                        .map(|_| split.ood[data_rng.random_range(0..split.ood.len())].clone())
                        .collect();
                    let ood_batch =
                        distort_examples(&ood_raw, config.noise_strength, 2, &mut data_rng);
                    fam_step(&mut store, &mut loss_fn, &id_batch, &ood_batch, config.rho, &mut opt)?
                }
                IsaMode::Sam => {
                    sam_step(&mut store, &mut loss_fn, &id_batch, config.rho, &mut opt)?
                }
                IsaMode::Naive => {
                    let (value, grad) = loss_fn(&store, &id_batch)?;
                    let grad_norm = grad.l2_norm();
                    opt.base_step(&mut store, &grad)?;
                    StepReport {
                        first_loss: value,
                        first_grad_norm: grad_norm,
                        update_loss: value,
                        perturb_norm: 0.0,
                        applied_grad: grad,
                        backward_passes: 1,
                        fell_back_to_plain: false,
                    }
                }
                IsaMode::Off => unreachable!("handled above"),
            };
            if !info.update_loss.is_finite() {
                return Err(Error::TrainingDiverged { step });
            }
            report.steps.push(IsaStepLog {
                step,
                loss: info.update_loss,
                grad_norm: info.applied_grad.l2_norm(),
                perturb_norm: info.perturb_norm,
            });
            step += 1;
        }
    }

    let prompts = compose_prompts(&store, &mlp)?;
    let provenance = match mode {
        IsaMode::Naive => PromptProvenance::IsaNaive,
        IsaMode::Sam => PromptProvenance::IsaSam,
        IsaMode::Fam => PromptProvenance::IsaFam,
        IsaMode::Off => unreachable!("handled above"),
    };
    Ok((IsaArtifacts { prompts, provenance }, report))
}
