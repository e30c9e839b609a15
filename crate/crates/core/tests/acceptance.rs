//! End-to-end acceptance gate for the laboratory.
//!
//! Each test is one numbered check over the whole stack — gradients,
//! optimizer geometry, stream construction, mask semantics, metrics,
//! directional training effects, and protocol invariants — and prints a
//! single `[PASS]`/`[FAIL]` line (visible with `--nocapture`) before
//! asserting.

use std::time::Instant;

use rand::Rng;

use gcl_core::harness::{generate_synthetic, prepare_backbone, run_gcl, sweep, SweepAxis};
use gcl_core::masking::{mask_from_labels, MaskPolicy};
use gcl_core::metrics::{AnytimeLog, EvalMatrix};
use gcl_core::model::{forward, predict, Backbone, BackboneConfig, OutputHead, PromptSet};
use gcl_core::optim::{ascent_perturbation, descent_perturbation, fam_step, sam_step};
use gcl_core::rng;
use gcl_core::stream::build_stream;
use gcl_core::tensor::{finite_diff_check, FD_STEP};
use gcl_core::{
    BaseOptimizer, Dataset, Example, ExperimentConfig, GradVector, IsaMode, MaskApplication,
    ParameterStore, SessionMaskState, StreamConfig, SyntheticDatasetSpec, Tape, Tensor,
};

/// Prints the one-line verdict for a numbered check, then enforces it.
fn verdict(index: u32, name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {index:02} {name}: {detail}");
    assert!(pass, "check {index:02} {name}: {detail}");
}

/// A complete small experiment for the protocol checks.
fn small_config() -> ExperimentConfig {
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

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

// ---------------------------------------------------------------------
// 01 — reverse-mode gradients of the full prompted masked loss agree with
// central finite differences over every trainable coordinate.
// ---------------------------------------------------------------------
#[test]
fn a01_autodiff_matches_finite_differences_on_the_prompted_masked_loss() {
    let started = Instant::now();
    let mut worst_overall: f64 = 0.0;
    for seed in 0..100u64 {
        let mut r = rng::stream(seed, "acceptance-gradcheck");
        let classes = r.random_range(3..7);
        let input_dim = r.random_range(3..7);
        let token_len = r.random_range(1..3);

        let mut store = ParameterStore::new();
        let backbone = Backbone::new(BackboneConfig {
            input_dim,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            token_len,
        })
        .unwrap();
        // The backbone stays trainable here so the check covers attention,
        // layer norms, and the feed-forward block, not just prompts + head.
        backbone.init_params(&mut store, seed).unwrap();
        let prompts = PromptSet::init_random(2, 8, &mut store, seed).unwrap();
        let head = OutputHead::new("head", classes, 8);
        head.init_params(&mut store, seed).unwrap();

        let mut bits: Vec<bool> = (0..classes).map(|_| r.random_bool(0.6)).collect();
        if !bits.iter().any(|b| *b) {
            bits[0] = true;
        }
        let valid: Vec<usize> =
            bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect();
        let batch: Vec<Example> = (0..3)
            .map(|_| {
                Example::new(
                    (0..input_dim).map(|_| r.random_range(-1.0..1.0)).collect(),
                    valid[r.random_range(0..valid.len())],
                )
            })
            .collect();
        let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();

        let loss_of = |store: &ParameterStore| -> gcl_core::Result<f64> {
            let mut tape = Tape::new();
            let p = prompts.leaf(&mut tape, store)?;
            let logits = forward(&mut tape, store, &backbone, Some(p), &head, &batch)?;
            let loss = tape.masked_softmax_cross_entropy(logits, &labels, &bits)?;
            tape.scalar(loss)
        };

        let analytic = {
            let mut tape = Tape::new();
            let p = prompts.leaf(&mut tape, &store).unwrap();
            let logits = forward(&mut tape, &store, &backbone, Some(p), &head, &batch).unwrap();
            let loss = tape.masked_softmax_cross_entropy(logits, &labels, &bits).unwrap();
            tape.backward(loss, &store).unwrap()
        };

        let worst = finite_diff_check(&mut store, loss_of, &analytic, FD_STEP).unwrap();
        worst_overall = worst_overall.max(worst);
    }
    let elapsed = started.elapsed();
    verdict(
        1,
        "gradients-match-finite-differences",
        worst_overall <= 1e-4 && elapsed.as_secs_f64() < 60.0,
        &format!("max relative error {worst_overall:.3e} over 100 seeds in {elapsed:.1?}"),
    );
}

// ---------------------------------------------------------------------
// 02 — ascent and descent perturbations sit on the radius-rho sphere and
// are exact negations of each other for the same gradient.
// ---------------------------------------------------------------------
#[test]
fn a02_perturbations_have_radius_rho_and_opposite_signs() {
    let started = Instant::now();
    let mut r = rng::stream(2, "acceptance-perturbation");
    let mut worst: f64 = 0.0;
    let mut negation_exact = true;
    for _ in 0..1000 {
        let n = r.random_range(1..64);
        let mut values: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        if values.iter().all(|v| *v == 0.0) {
            values[0] = 1.0;
        }
        let grad = GradVector::new(values);
        let rho = r.random_range(1e-3..2.0);
        let up = ascent_perturbation(&grad, rho);
        let down = descent_perturbation(&grad, rho);
        let up_norm = up.iter().map(|x| x * x).sum::<f64>().sqrt();
        let down_norm = down.iter().map(|x| x * x).sum::<f64>().sqrt();
        worst = worst.max((up_norm - rho).abs()).max((down_norm - rho).abs());
        negation_exact &= up.iter().zip(&down).all(|(u, d)| *u == -*d);
    }
    verdict(
        2,
        "perturbation-geometry",
        worst <= 1e-9 && negation_exact,
        &format!(
            "worst radius error {worst:.3e} over 1000 gradients, negation exact: \
             {negation_exact}, {:.1?}",
            started.elapsed()
        ),
    );
}

// ---------------------------------------------------------------------
// 03 — the two optimizer steps reproduce hand-computed updates.
// ---------------------------------------------------------------------
#[test]
fn a03_sharpness_steps_match_hand_computed_updates() {
    let e = |label: usize| Example::new(vec![0.0], label);

    // Ascent-perturbed step on L = 0.5 * |theta|^2 from theta = (1, 0),
    // rho = 0.1, lr = 1: gradient (1,0) -> probe (1.1,0) -> gradient there
    // (1.1,0) -> final theta (-0.1, 0).
    let mut store = ParameterStore::new();
    store.insert("theta", Tensor::from_vec(vec![2], vec![1.0, 0.0]).unwrap(), true).unwrap();
    let mut quad =
        |store: &ParameterStore, _batch: &[Example]| -> gcl_core::Result<(f64, GradVector)> {
            let theta = store.flat_view();
            Ok((0.5 * theta.iter().map(|t| t * t).sum::<f64>(), GradVector::new(theta)))
        };
    let mut opt = BaseOptimizer::sgd(1.0, 2);
    let report = sam_step(&mut store, &mut quad, &[e(0)], 0.1, &mut opt).unwrap();
    let theta = store.flat_view();
    let sam_ok = (theta[0] - (-0.1)).abs() <= 1e-12
        && theta[1].abs() <= 1e-12
        && (report.perturb_norm - 0.1).abs() <= 1e-12;

    // Descent-perturbed step on paired quadratics from theta = (0, 0):
    // in-distribution target a = (1,0) on label 0, held-out target
    // b = (0,1) on label 1, rho = 0.1, lr = 1. The held-out gradient is
    // (0,-1), so the probe displacement is (0, 0.1); the in-distribution
    // gradient there is (-1, 0.1) and the final theta is (1, -0.1).
    let a = [1.0, 0.0];
    let b = [0.0, 1.0];
    let mut paired = move |store: &ParameterStore,
                           batch: &[Example]|
          -> gcl_core::Result<(f64, GradVector)> {
        let target = if batch[0].label == 0 { a } else { b };
        let theta = store.flat_view();
        let diff: Vec<f64> = theta.iter().zip(&target).map(|(t, c)| t - c).collect();
        Ok((0.5 * diff.iter().map(|d| d * d).sum::<f64>(), GradVector::new(diff)))
    };
    let ood_grad = GradVector::new(vec![0.0, -1.0]);
    let delta = descent_perturbation(&ood_grad, 0.1);
    let delta_ok = delta[0].abs() <= 1e-12 && (delta[1] - 0.1).abs() <= 1e-12;

    let mut store = ParameterStore::new();
    store.insert("theta", Tensor::from_vec(vec![2], vec![0.0, 0.0]).unwrap(), true).unwrap();
    let mut opt = BaseOptimizer::sgd(1.0, 2);
    let report = fam_step(&mut store, &mut paired, &[e(0)], &[e(1)], 0.1, &mut opt).unwrap();
    let theta = store.flat_view();
    let fam_ok = (theta[0] - 1.0).abs() <= 1e-12
        && (theta[1] - (-0.1)).abs() <= 1e-12
        && (report.perturb_norm - 0.1).abs() <= 1e-12;

    verdict(
        3,
        "hand-computed-optimizer-oracles",
        sam_ok && delta_ok && fam_ok,
        &format!(
            "ascent step ok: {sam_ok}, probe displacement ok: {delta_ok}, \
             descent step ok: {fam_ok} (all at 1e-12)"
        ),
    );
}

// ---------------------------------------------------------------------
// 04 — one hundred seeded streams keep every structural invariant.
// ---------------------------------------------------------------------
#[test]
fn a04_stream_invariants_hold_across_one_hundred_seeds() {
    let started = Instant::now();
    let per_class = 15usize;
    let classes = 20usize;
    let mut train = Vec::new();
    let mut id = 0.0;
    for c in 0..classes {
        for _ in 0..per_class {
            train.push(Example::new(vec![id], c));
            id += 1.0;
        }
    }
    let total = train.len();
    let dataset = Dataset::new(classes, 1, train, Vec::new()).unwrap();

    // Default stream shape: half the classes confined, a tenth of the
    // remaining samples relocated, five sessions.
    let (mut varied_counts, mut recurring, mut uneven) = (0u32, 0u32, 0u32);
    for seed in 0..100u64 {
        let config = StreamConfig { seed, ..StreamConfig::default() };
        let (plan, batches) = build_stream(&dataset, &config).unwrap();

        // Exact coverage and uniqueness via the examples' unique ids.
        let mut times_emitted = vec![0u32; total];
        for batch in &batches {
            for example in &batch.examples {
                times_emitted[example.features[0] as usize] += 1;
            }
        }
        assert!(
            times_emitted.iter().all(|&n| n == 1),
            "seed {seed}: multiset of emitted examples differs from the dataset"
        );

        // Confined classes never leave their home session.
        for batch in &batches {
            for example in &batch.examples {
                if plan.disjoint_classes.contains(&example.label) {
                    assert_eq!(
                        batch.session_index, plan.home_session[example.label],
                        "seed {seed}: confined class {} escaped",
                        example.label
                    );
                }
            }
        }

        // Relocation volume is the rounded fraction of the shared pool.
        let pool: usize =
            plan.blurry_classes.iter().map(|_| per_class).sum();
        let want = (config.blurry_ratio * pool as f64).round() as usize;
        assert_eq!(plan.relocated, want, "seed {seed}: relocation count off");

        // Structural variety witnesses.
        let class_counts: Vec<usize> =
            (0..plan.sessions).map(|s| plan.classes_in_session(s).len()).collect();
        if class_counts.windows(2).any(|w| w[0] != w[1]) {
            varied_counts += 1;
        }
        if (0..plan.num_classes).any(|c| {
            (0..plan.sessions).filter(|&s| plan.session_class_counts[s][c] > 0).count() > 1
        }) {
            recurring += 1;
        }
        if (0..plan.num_classes).any(|c| {
            let counts: Vec<usize> = (0..plan.sessions)
                .map(|s| plan.session_class_counts[s][c])
                .filter(|&n| n > 0)
                .collect();
            counts.windows(2).any(|w| w[0] != w[1])
        }) {
            uneven += 1;
        }
    }
    let elapsed = started.elapsed();
    verdict(
        4,
        "stream-invariants",
        varied_counts >= 1
            && recurring >= 1
            && uneven >= 1
            && elapsed.as_secs_f64() < 60.0,
        &format!(
            "coverage, confinement, and relocation volume exact on 100 streams; \
             witnesses: varied class counts {varied_counts}, recurring class {recurring}, \
             uneven splits {uneven}; {elapsed:.1?}"
        ),
    );
}

// ---------------------------------------------------------------------
// 05 — mask bits equal the step's available labels on every step of a
// full run, masked-out logits get exactly zero gradient, and the scope
// chain batch ⊆ session ⊆ seen never breaks.
// ---------------------------------------------------------------------
#[test]
fn a05_mask_bits_track_available_labels_and_nest_every_step() {
    // (a) + (c): a complete one-pass training run, checking each step.
    let classes = 20usize;
    let spec = SyntheticDatasetSpec {
        classes,
        features: 8,
        train_per_class: 16,
        test_per_class: 2,
        margin: 1.0,
        noise: 0.15,
    };
    let dataset = generate_synthetic(&spec, 11, "acceptance-mask-run").unwrap();
    let mut store = ParameterStore::new();
    let mut backbone = Backbone::new(BackboneConfig {
        input_dim: 8,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        token_len: 2,
    })
    .unwrap();
    backbone.init_params(&mut store, 11).unwrap();
    backbone.freeze(&mut store);
    let prompts = PromptSet::init_random(2, 8, &mut store, 11).unwrap();
    let head = OutputHead::new("head", classes, 8);
    head.init_params(&mut store, 11).unwrap();
    let mut opt = BaseOptimizer::adam(0.01, store.trainable_len());

    let (_, batches) =
        build_stream(&dataset, &StreamConfig { seed: 11, ..StreamConfig::default() }).unwrap();
    let mut mask_state = SessionMaskState::new(classes);
    let mut steps = 0usize;
    for batch in &batches {
        let labels: Vec<usize> = batch.examples.iter().map(|e| e.label).collect();
        let session_mask = mask_state
            .update_session_mask(batch.session_index, batch.is_session_start, &labels)
            .unwrap();
        let batch_mask = mask_from_labels(&labels, classes).unwrap();

        // Bit condition: set exactly for the labels available this step.
        for c in 0..classes {
            assert_eq!(
                batch_mask.contains(c),
                labels.contains(&c),
                "step {steps}: bit {c} disagrees with availability"
            );
        }
        // Scope chain.
        assert!(batch_mask.is_subset_of(&session_mask), "step {steps}: batch ⊄ session");
        assert!(
            session_mask.is_subset_of(&mask_state.seen_mask()),
            "step {steps}: session ⊄ seen"
        );

        // The actual masked training step.
        let mut tape = Tape::new();
        let p = prompts.leaf(&mut tape, &store).unwrap();
        let logits = forward(&mut tape, &store, &backbone, Some(p), &head, &batch.examples)
            .unwrap();
        let loss = tape
            .masked_softmax_cross_entropy(logits, &labels, batch_mask.bits())
            .unwrap();
        let grad = tape.backward(loss, &store).unwrap();
        opt.base_step(&mut store, &grad).unwrap();
        steps += 1;
    }
    let full_run_ok = steps == batches.len() && steps > 0;

    // The harness path re-checks the same conditions via its internal
    // debug assertions on every step of this run.
    let mut harness_config = small_config();
    harness_config.isa.mode = IsaMode::Off;
    let prepared = prepare_backbone(&harness_config).unwrap();
    run_gcl(&harness_config, &prepared, None).unwrap();

    // (b) masked-out logits carry exactly zero gradient, confirmed by
    // finite differences: the loss is bitwise flat in those coordinates.
    let mut fd_cases = 0usize;
    for case in 0..50u64 {
        let mut r = rng::stream(case, "acceptance-masked-grad");
        let n = r.random_range(1..5);
        let c = r.random_range(3..8);
        let mut bits: Vec<bool> = (0..c).map(|_| r.random_bool(0.5)).collect();
        if !bits.iter().any(|b| *b) {
            bits[r.random_range(0..c)] = true;
        }
        if bits.iter().all(|b| *b) {
            bits[r.random_range(0..c)] = false;
        }
        let valid: Vec<usize> =
            bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect();
        let labels: Vec<usize> =
            (0..n).map(|_| valid[r.random_range(0..valid.len())]).collect();
        let values: Vec<f64> = (0..n * c).map(|_| r.random_range(-2.0..2.0)).collect();

        let mut store = ParameterStore::new();
        store
            .insert("logits", Tensor::from_vec(vec![n, c], values.clone()).unwrap(), true)
            .unwrap();
        let loss_of = |store: &ParameterStore| -> gcl_core::Result<f64> {
            let mut tape = Tape::new();
            let leaf = tape.leaf(store, "logits")?;
            let loss = tape.masked_softmax_cross_entropy(leaf, &labels, &bits)?;
            tape.scalar(loss)
        };
        let base_loss = loss_of(&store).unwrap();
        let analytic = {
            let mut tape = Tape::new();
            let leaf = tape.leaf(&store, "logits").unwrap();
            let loss = tape.masked_softmax_cross_entropy(leaf, &labels, &bits).unwrap();
            tape.backward(loss, &store).unwrap()
        };
        for row in 0..n {
            for col in 0..c {
                if bits[col] {
                    continue;
                }
                let idx = row * c + col;
                assert_eq!(
                    analytic.values()[idx],
                    0.0,
                    "case {case}: analytic gradient of masked logit ({row},{col}) nonzero"
                );
                for delta in [1e-3, -1e-3, 7.5] {
                    let mut probe = values.clone();
                    probe[idx] += delta;
                    let mut probe_store = ParameterStore::new();
                    probe_store
                        .insert(
                            "logits",
                            Tensor::from_vec(vec![n, c], probe).unwrap(),
                            true,
                        )
                        .unwrap();
                    let moved = loss_of(&probe_store).unwrap();
                    assert_eq!(
                        moved, base_loss,
                        "case {case}: loss moved when masked logit ({row},{col}) moved"
                    );
                }
            }
        }
        fd_cases += 1;
    }

    verdict(
        5,
        "mask-semantics",
        full_run_ok && fd_cases == 50,
        &format!(
            "bit condition and scope chain held on all {steps} steps of a full run \
             (plus the harness run's per-step assertions); masked-logit gradient \
             identically zero on {fd_cases} finite-difference cases"
        ),
    );
}

// ---------------------------------------------------------------------
// 06 — the evaluation-matrix and anytime metrics match longhand formulas.
// ---------------------------------------------------------------------
#[test]
fn a06_metrics_match_longhand_formulas() {
    fn longhand_last_row_mean(rows: &[Vec<Option<f64>>]) -> f64 {
        let last = rows.last().unwrap();
        let defined: Vec<f64> = last.iter().flatten().copied().collect();
        defined.iter().sum::<f64>() / defined.len() as f64
    }
    fn longhand_forgetting(rows: &[Vec<Option<f64>>]) -> f64 {
        let last = rows.last().unwrap();
        let mut drops = Vec::new();
        for (col, cell) in last.iter().enumerate() {
            let Some(final_acc) = cell else { continue };
            let peak = rows
                .iter()
                .filter_map(|row| row[col])
                .fold(f64::NEG_INFINITY, f64::max);
            drops.push(peak - final_acc);
        }
        drops.iter().sum::<f64>() / drops.len() as f64
    }

    let mut worst: f64 = 0.0;
    let mut r = rng::stream(6, "acceptance-metrics");
    for _ in 0..50 {
        let width = r.random_range(1..6);
        let height = r.random_range(1..8);
        let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
        for _ in 0..height {
            rows.push(
                (0..width)
                    .map(|_| r.random_bool(0.7).then(|| r.random_range(0.0..1.0)))
                    .collect(),
            );
        }
        let forced = r.random_range(0..width);
        rows.last_mut().unwrap()[forced] = Some(r.random_range(0.0..1.0));

        let mut matrix = EvalMatrix::new(width);
        for row in &rows {
            matrix.push_row(row.clone()).unwrap();
        }
        worst = worst.max((matrix.a_last().unwrap() - longhand_last_row_mean(&rows)).abs());
        worst = worst.max((matrix.f_last().unwrap() - longhand_forgetting(&rows)).abs());

        let points = r.random_range(1..20);
        let mut log = AnytimeLog::new();
        let mut accs = Vec::new();
        for i in 0..points {
            let acc = r.random_range(0.0..1.0);
            log.push((i + 1) * 16, acc).unwrap();
            accs.push(acc);
        }
        worst = worst.max((log.a_auc().unwrap() - mean(&accs)).abs());
    }

    // Worked 2x2 example: one column unmeasured in the first row.
    let mut matrix = EvalMatrix::new(2);
    matrix.push_row(vec![Some(0.8), None]).unwrap();
    matrix.push_row(vec![Some(0.6), Some(0.7)]).unwrap();
    let worked_a = matrix.a_last().unwrap();
    let worked_f = matrix.f_last().unwrap();

    verdict(
        6,
        "metric-oracles",
        worst <= 1e-12 && (worked_a - 0.65).abs() <= 1e-12 && (worked_f - 0.1).abs() <= 1e-12,
        &format!(
            "max deviation {worst:.3e} over 50 random matrices; worked example \
             last-row mean {worked_a}, forgetting {worked_f}"
        ),
    );
}

// ---------------------------------------------------------------------
// 07 — adding the batch-scoped mask to the no-mask baseline improves the
// anytime accuracy and reduces forgetting, on shared stream seeds.
// ---------------------------------------------------------------------
#[test]
fn a07_batch_mask_beats_no_mask_on_auc_and_forgetting() {
    let started = Instant::now();
    let seeds = [0u64, 1, 2, 3, 4];
    let mut auc = std::collections::BTreeMap::<&str, Vec<f64>>::new();
    let mut forgetting = std::collections::BTreeMap::<&str, Vec<f64>>::new();
    for &seed in &seeds {
        let mut base = ExperimentConfig::default();
        base.seed = seed;
        base.isa.mode = IsaMode::Off;
        let prepared = prepare_backbone(&base).unwrap();
        for policy in [MaskPolicy::None, MaskPolicy::Batch] {
            let mut config = base.clone();
            config.mask_policy = policy;
            let result = run_gcl(&config, &prepared, None).unwrap();
            auc.entry(policy.as_str()).or_default().push(result.a_auc);
            forgetting.entry(policy.as_str()).or_default().push(result.f_last);
        }
    }
    let auc_none = mean(&auc["none"]);
    let auc_batch = mean(&auc["batch"]);
    let f_none = mean(&forgetting["none"]);
    let f_batch = mean(&forgetting["batch"]);
    let elapsed = started.elapsed();
    verdict(
        7,
        "batch-mask-improves-both-metrics",
        auc_batch > auc_none && f_batch < f_none && elapsed.as_secs_f64() < 600.0,
        &format!(
            "anytime accuracy {auc_none:.4} -> {auc_batch:.4}, forgetting \
             {f_none:.4} -> {f_batch:.4} over {} shared seeds; {elapsed:.1?}",
            seeds.len()
        ),
    );
}

// ---------------------------------------------------------------------
// 08 — with the mask fixed, warm-up strategies order the anytime
// accuracy: descent-perturbed ≥ ascent-perturbed ≥ plain ≥ random.
// ---------------------------------------------------------------------
#[test]
fn a08_warmup_modes_order_by_anytime_accuracy() {
    let started = Instant::now();
    let base = ExperimentConfig::default();
    let results = sweep(&base, SweepAxis::Isa, &[0, 1, 2, 3, 4]).unwrap();
    let mode_mean = |needle: &str| -> f64 {
        let values: Vec<f64> = results
            .iter()
            .filter(|r| r.label.contains(needle))
            .map(|r| r.a_auc)
            .collect();
        assert_eq!(values.len(), 5, "expected five runs for {needle}");
        mean(&values)
    };
    let random = mode_mean("isa=off");
    let naive = mode_mean("isa=naive");
    let sam = mode_mean("isa=sam");
    let fam = mode_mean("isa=fam");
    let elapsed = started.elapsed();
    verdict(
        8,
        "warmup-strategy-ordering",
        fam >= sam && sam >= naive && naive >= random && fam > random
            && elapsed.as_secs_f64() < 1200.0,
        &format!(
            "anytime accuracy means: random {random:.4} ≤ plain {naive:.4} ≤ \
             ascent {sam:.4} ≤ descent {fam:.4} over 5 paired seeds; {elapsed:.1?}"
        ),
    );
}

// ---------------------------------------------------------------------
// 09 — at batch size one the batch-scoped mask collapses toward chance
// while the session-scoped mask keeps most of its batch-32 accuracy.
// ---------------------------------------------------------------------
#[test]
fn a09_batch_mask_collapses_at_batch_size_one_while_session_mask_survives() {
    let started = Instant::now();
    let seeds = [0u64, 1, 2];
    let mut batch_at_1 = Vec::new();
    let mut session_at_1 = Vec::new();
    let mut session_at_32 = Vec::new();
    for &seed in &seeds {
        let mut base = ExperimentConfig::default();
        base.seed = seed;
        base.isa.mode = IsaMode::Off;
        let prepared = prepare_backbone(&base).unwrap();
        for (policy, batch_size, sink) in [
            (MaskPolicy::Batch, 1usize, &mut batch_at_1),
            (MaskPolicy::Session, 1, &mut session_at_1),
            (MaskPolicy::Session, 32, &mut session_at_32),
        ] {
            let mut config = base.clone();
            config.mask_policy = policy;
            config.stream.batch_size = batch_size;
            let result = run_gcl(&config, &prepared, None).unwrap();
            sink.push(result.a_auc);
        }
    }
    let chance = 1.0 / ExperimentConfig::default().dataset.classes as f64;
    let collapsed = mean(&batch_at_1);
    let survived = mean(&session_at_1);
    let reference = mean(&session_at_32);
    let elapsed = started.elapsed();
    verdict(
        9,
        "batch-size-one-mask-contrast",
        collapsed < 2.0 * chance && survived > 0.5 * reference
            && elapsed.as_secs_f64() < 600.0,
        &format!(
            "batch-scoped mask at size 1: {collapsed:.4} (< {:.4} = 2x chance); \
             session-scoped: {survived:.4} at size 1 vs {reference:.4} at size 32; \
             {elapsed:.1?}",
            2.0 * chance
        ),
    );
}

// ---------------------------------------------------------------------
// 10 — protocol invariants: one-pass consumption, bounded replay memory,
// maskless inference, and bitwise determinism per seed.
// ---------------------------------------------------------------------
#[test]
fn a10_protocol_invariants_hold() {
    // One pass, exactly: stream consumption equals the training set size.
    let mut config = small_config();
    config.isa.mode = IsaMode::Off;
    let prepared = prepare_backbone(&config).unwrap();
    let result = run_gcl(&config, &prepared, None).unwrap();
    let one_pass = result.samples_seen == result.train_examples
        && result.train_examples
            == config.dataset.classes * config.dataset.train_per_class;

    // Replay memory never exceeds its capacity.
    let mut buffered = config.clone();
    buffered.buffer_capacity = 8;
    buffered.replay_size = 4;
    let buffered_result = run_gcl(&buffered, &prepared, None).unwrap();
    let bounded = buffered_result.max_buffer_len <= 8 && buffered_result.max_buffer_len > 0;

    // Inference sees no mask and no session: a class absent from every
    // batch still wins the argmax when its rigged score is highest.
    let classes = 6usize;
    let mut store = ParameterStore::new();
    let mut backbone = Backbone::new(BackboneConfig {
        input_dim: 4,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        token_len: 2,
    })
    .unwrap();
    backbone.init_params(&mut store, 0).unwrap();
    backbone.freeze(&mut store);
    let head = OutputHead::new("head", classes, 8);
    head.init_params(&mut store, 3).unwrap();
    let bias_name = head.bias_name();
    let weight_name = head.weight_name();
    let weight_len = store.get(&weight_name).unwrap().values().len();
    let bias_offset = if bias_name < weight_name { 0 } else { weight_len };
    let mut flat = store.flat_view();
    for i in 0..classes {
        flat[bias_offset + i] = if i == 5 { 50.0 } else { -50.0 };
    }
    store.set_flat(&flat).unwrap();
    let mut r = rng::stream(10, "acceptance-inference");
    let probes: Vec<Example> = (0..4)
        .map(|_| Example::new((0..4).map(|_| r.random_range(-1.0..1.0)).collect(), 0))
        .collect();
    let predictions = predict(&store, &backbone, None, &head, &probes).unwrap();
    let maskless = predictions.iter().all(|&p| p == 5);

    // Bitwise determinism: identical seed, identical serialized row.
    let again = run_gcl(&config, &prepared, None).unwrap();
    let deterministic = again == result
        && serde_json::to_string(&again).unwrap() == serde_json::to_string(&result).unwrap();

    // The exclusion and multiplication mask applications are distinct
    // configurations but share the protocol invariants.
    let mut multiplied = config.clone();
    multiplied.mask_application = MaskApplication::Multiply;
    let mult_result = run_gcl(&multiplied, &prepared, None).unwrap();
    let mult_one_pass = mult_result.samples_seen == mult_result.train_examples;

    verdict(
        10,
        "protocol-invariants",
        one_pass && bounded && maskless && deterministic && mult_one_pass,
        &format!(
            "one-pass: {one_pass} ({} samples), buffer bounded: {bounded} (peak {}), \
             maskless inference: {maskless}, bitwise determinism: {deterministic}",
            result.samples_seen, buffered_result.max_buffer_len
        ),
    );
}
