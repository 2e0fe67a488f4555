//! Cross-module engine behavior: sweep determinism, criterion variants, and
//! loss/metric integration with real inference outputs.

use adpc_core::backbone::{seeded_init, ExitConfig, ModelConfig, StageConfig};
use adpc_core::metrics::{
    miou, multi_exit_loss, run_sweep, run_sweep_parallel, sweep_csv, ClassMap, LossSpec, LossTask,
    SweepParameter, SweepSpec,
};
use adpc_core::rng::SplitMix64;
use adpc_core::runtime::infer_unbounded;
use adpc_core::scenario::{build_scenario, scenario_dataset};
use adpc_core::{ConfidenceCriterion, InterpConfig, Tensor};

fn heatmap_config() -> ModelConfig {
    ModelConfig {
        schema_version: 1,
        input_channels: 2,
        num_classes: 5,
        stages: vec![
            StageConfig { num_blocks: 1, channels: 4, downsample: false },
            StageConfig { num_blocks: 1, channels: 6, downsample: false },
            StageConfig { num_blocks: 1, channels: 6, downsample: false },
        ],
        exits: vec![
            ExitConfig { depth: 2, head_channels: 4 },
            ExitConfig { depth: 1, head_channels: 4 },
            ExitConfig { depth: 0, head_channels: 4 },
        ],
        adaptivity: true,
        criterion: ConfidenceCriterion::MaxActivationBelow { threshold: 0.002 },
        interp: InterpConfig { radius: 3, lambda: 1.0 },
        loss_weights: vec![1.0; 3],
    }
}

#[test]
fn heatmap_criterion_skips_probabilities() {
    let cfg = heatmap_config();
    let weights = seeded_init(&cfg, 5).unwrap();
    let mut rng = SplitMix64::new(9);
    let image = Tensor::from_fn(2, 10, 14, |_, _, _| rng.next_f32());
    let res = infer_unbounded(&cfg, &weights, &image).unwrap();
    assert_eq!(res.predictions.len(), 3);
    for p in &res.predictions {
        assert!(p.probabilities.is_none(), "heatmap models carry no probabilities");
    }
    // Monotone masks hold for the activation criterion too.
    for pair in res.exit_masks.windows(2) {
        for (prev, next) in pair[0].bits().iter().zip(pair[1].bits()) {
            assert!(next <= prev);
        }
    }
    res.ledger.audit().unwrap();
}

#[test]
fn random_criterion_masks_grow_and_stay_monotone() {
    let sc = build_scenario(3).unwrap();
    let mut cfg = sc.config.clone();
    cfg.criterion = ConfidenceCriterion::RandomFraction { fraction: 0.3, seed: 11 };
    let res = infer_unbounded(&cfg, &sc.weights, &sc.image).unwrap();
    let fractions = res.skipped_fractions();
    // Fresh draws per exit: the union grows strictly at these sizes.
    for pair in fractions.windows(2) {
        assert!(pair[1] >= pair[0]);
    }
    assert!(fractions[0] > 0.25 && fractions[0] < 0.35);
    assert!(fractions[3] > fractions[0]);
    for pair in res.exit_masks.windows(2) {
        for (prev, next) in pair[0].bits().iter().zip(pair[1].bits()) {
            assert!(next <= prev, "random masking must not re-activate skipped pixels");
        }
    }
}

#[test]
fn sweep_is_deterministic_and_parallel_equivalent() {
    let sc = build_scenario(0).unwrap();
    let spec = SweepSpec {
        parameter: SweepParameter::Threshold,
        values: vec![0.9, 0.998],
        dataset: scenario_dataset(1, 2),
        seed: 1,
    };
    let a = run_sweep(&sc.config, &sc.weights, &spec).unwrap();
    let b = run_sweep(&sc.config, &sc.weights, &spec).unwrap();
    assert_eq!(a, b);
    let p = run_sweep_parallel(&sc.config, &sc.weights, &spec, 4).unwrap();
    assert_eq!(a, p);
    let csv_a = sweep_csv(&a, spec.parameter);
    let csv_p = sweep_csv(&p, spec.parameter);
    assert_eq!(csv_a, csv_p);
    assert_eq!(csv_a.lines().count(), 1 + 2 * 4);
    assert!(csv_a.starts_with("param,exit,accuracy,gflops,skipped_fraction\n"));
}

#[test]
fn unattainable_threshold_sweep_row_equals_dense_flops() {
    let sc = build_scenario(5).unwrap();
    let spec = SweepSpec {
        parameter: SweepParameter::Threshold,
        values: vec![0.998, 1.01],
        dataset: scenario_dataset(2, 2),
        seed: 2,
    };
    let rows = run_sweep(&sc.config, &sc.weights, &spec).unwrap();
    let dense = adpc_core::dense_flops(&sc.config, 64, 128).unwrap();
    for row in rows.iter().filter(|r| r.param == 1.01) {
        let want = dense[row.exit - 1] as f64 / 1e9;
        assert!((row.gflops - want).abs() < 1e-12, "exit {}: {} vs {}", row.exit, row.gflops, want);
        assert_eq!(row.skipped_fraction, 0.0);
    }
    // The attainable threshold must actually save work at the final exit.
    let adaptive_last = rows.iter().find(|r| r.param == 0.998 && r.exit == 4).unwrap();
    assert!(adaptive_last.gflops < dense[3] as f64 / 1e9);
}

#[test]
fn radius_sweep_rejects_fractional_values() {
    let sc = build_scenario(0).unwrap();
    let spec = SweepSpec {
        parameter: SweepParameter::Radius,
        values: vec![2.5],
        dataset: scenario_dataset(1, 1),
        seed: 1,
    };
    assert!(run_sweep(&sc.config, &sc.weights, &spec).is_err());
}

#[test]
fn engine_outputs_feed_loss_and_miou() {
    let sc = build_scenario(2).unwrap();
    let res = infer_unbounded(&sc.config, &sc.weights, &sc.image).unwrap();
    let logits: Vec<Tensor> = res.predictions.iter().map(|p| p.logits.clone()).collect();
    let label = Tensor::from_fn(1, sc.label.height, sc.label.width, |_, y, x| {
        sc.label.at(y, x) as f32
    });

    let all = LossSpec {
        task: LossTask::SegmentationCrossEntropy,
        weights: vec![1.0; 4],
        ignore_label: None,
    };
    let total = multi_exit_loss(&logits, &label, &all).unwrap();
    assert!(total.is_finite() && total >= 0.0);

    let last_only = LossSpec {
        task: LossTask::SegmentationCrossEntropy,
        weights: vec![0.0, 0.0, 0.0, 1.0],
        ignore_label: None,
    };
    let final_loss = multi_exit_loss(&logits, &label, &last_only).unwrap();
    let solo = LossSpec {
        task: LossTask::SegmentationCrossEntropy,
        weights: vec![1.0],
        ignore_label: None,
    };
    let direct = multi_exit_loss(&logits[3..], &label, &solo).unwrap();
    assert_eq!(final_loss.to_bits(), direct.to_bits());

    // Accuracy improves from the first to the final exit on the scene.
    let first = miou(&ClassMap::from_logits(&logits[0]), &sc.label, 3, None).unwrap();
    let last = miou(&ClassMap::from_logits(&logits[3]), &sc.label, 3, None).unwrap();
    assert!(last.miou >= first.miou);
}

#[test]
fn entropy_and_max_prob_select_similar_pixels() {
    let sc = build_scenario(4).unwrap();
    let mut entropy_cfg = sc.config.clone();
    entropy_cfg.criterion = ConfidenceCriterion::EntropyThreshold { threshold: 0.02 };
    let by_prob = infer_unbounded(&sc.config, &sc.weights, &sc.image).unwrap();
    let by_entropy = infer_unbounded(&entropy_cfg, &sc.weights, &sc.image).unwrap();
    let a = by_prob.exit_masks[0].skipped_fraction();
    let b = by_entropy.exit_masks[0].skipped_fraction();
    assert!((a - b).abs() < 0.2, "first-exit fractions far apart: {a} vs {b}");
}
