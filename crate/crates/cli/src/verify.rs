//! Seeded oracle suites behind `adpc verify`: dense equivalence,
//! interpolation, carry-over, ledger audits, and weight-format rejection.

use std::time::Instant;

use adpc_core::backbone::{seeded_init, ExitConfig, ModelConfig, StageConfig};
use adpc_core::masked::{masked_conv2d, masked_layer, InterpKernel, Mask};
use adpc_core::oracle;
use adpc_core::rng::SplitMix64;
use adpc_core::runtime::{dense_flops, infer, infer_unbounded, Budget};
use adpc_core::scenario::build_scenario;
use adpc_core::tensor::{conv2d, Tensor};
use adpc_core::weights::{ConvWeights, WeightStore};
use adpc_core::ConfidenceCriterion;

fn random_tensor(rng: &mut SplitMix64, c: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(c, h, w, |_, _, _| rng.next_range(-1.0, 1.0))
}

fn random_conv(rng: &mut SplitMix64, cout: usize, cin: usize, k: usize) -> ConvWeights {
    let weights = (0..cout * cin * k * k).map(|_| rng.next_range(-1.0, 1.0)).collect();
    let bias = (0..cout).map(|_| rng.next_range(-1.0, 1.0)).collect();
    ConvWeights::new(cout, cin, k, k, weights, bias).expect("valid conv")
}

fn random_mask(rng: &mut SplitMix64, h: usize, w: usize, skip_p: f32) -> Mask {
    let bits = (0..h * w).map(|_| (rng.next_f32() >= skip_p) as u8).collect();
    Mask::new(h, w, bits).expect("valid mask")
}

fn dense_equivalence(seed: u64, cases: usize) -> Result<String, String> {
    let mut rng = SplitMix64::new(seed);
    for case in 0..cases {
        let cin = 1 + rng.next_usize(4);
        let cout = 1 + rng.next_usize(4);
        let h = 1 + rng.next_usize(8);
        let w = 1 + rng.next_usize(8);
        let k = if rng.next_usize(2) == 0 { 1 } else { 3 };
        let stride = 1 + rng.next_usize(2);
        let pad = k / 2;
        let input = random_tensor(&mut rng, cin, h, w);
        let conv = random_conv(&mut rng, cout, cin, k);

        let dense = conv2d(&input, &conv, stride, pad).map_err(|e| e.to_string())?;
        let reference =
            oracle::conv2d_reference(&input, &conv, stride, pad).map_err(|e| e.to_string())?;
        for (a, b) in dense.data().iter().zip(reference.data()) {
            if (a - b).abs() > 1e-6 {
                return Err(format!("case {case}: conv differs from oracle ({a} vs {b})"));
            }
        }

        let (oh, ow) = (dense.height(), dense.width());
        let kernel =
            InterpKernel::new(1 + 2 * rng.next_usize(2), rng.next_range(0.0, 2.0)).unwrap();
        let all = masked_layer(&input, &conv, &Mask::ones(oh, ow), &kernel, stride, pad)
            .map_err(|e| e.to_string())?;
        if all
            .data()
            .iter()
            .zip(dense.data())
            .any(|(a, b)| a.to_bits() != b.to_bits())
        {
            return Err(format!("case {case}: all-ones masked layer is not bitwise dense"));
        }

        let mask = random_mask(&mut rng, oh, ow, 0.5);
        let sparse = masked_conv2d(&input, &conv, &mask, stride, pad).map_err(|e| e.to_string())?;
        for oc in 0..cout {
            for y in 0..oh {
                for x in 0..ow {
                    let got = sparse.at(oc, y, x);
                    if mask.computed(y, x) {
                        if got.to_bits() != dense.at(oc, y, x).to_bits() {
                            return Err(format!("case {case}: computed pixel differs from dense"));
                        }
                    } else if got != 0.0 {
                        return Err(format!("case {case}: skipped pixel not zero"));
                    }
                }
            }
        }
    }
    Ok(format!("{cases} cases"))
}

fn interpolation(seed: u64, cases: usize) -> Result<String, String> {
    let mut rng = SplitMix64::new(seed);
    let radii = [1usize, 3, 7];
    for case in 0..cases {
        let c = 1 + rng.next_usize(3);
        let h = 2 + rng.next_usize(9);
        let w = 2 + rng.next_usize(9);
        let radius = radii[case % radii.len()];
        let lambda = rng.next_range(0.0, 2.0);
        let mask = random_mask(&mut rng, h, w, 0.5);
        let mut f = random_tensor(&mut rng, c, h, w);
        for y in 0..h {
            for x in 0..w {
                if !mask.computed(y, x) {
                    for ch in 0..c {
                        f.set(ch, y, x, 0.0);
                    }
                }
            }
        }
        let kernel = InterpKernel::new(radius, lambda).unwrap();
        let got =
            adpc_core::interpolate_skipped(&f, &mask, &kernel).map_err(|e| e.to_string())?;
        let want = oracle::interpolate_reference(&f, &mask, radius, lambda);
        for (a, b) in got.data().iter().zip(want.data()) {
            if (a - b).abs() > 1e-6 {
                return Err(format!("case {case}: interpolation differs ({a} vs {b})"));
            }
        }
    }
    Ok(format!("{cases} cases, radii {radii:?}"))
}

fn verify_config(rng: &mut SplitMix64) -> ModelConfig {
    let mut cfg = ModelConfig {
        schema_version: 1,
        input_channels: 1 + rng.next_usize(3),
        num_classes: 3 + rng.next_usize(4),
        stages: (0..4)
            .map(|_| StageConfig {
                num_blocks: 1,
                channels: 3 + rng.next_usize(5),
                downsample: false,
            })
            .collect(),
        exits: vec![],
        adaptivity: true,
        criterion: ConfidenceCriterion::MaxProbThreshold { threshold: 0.35 },
        interp: adpc_core::InterpConfig { radius: 1 + 2 * rng.next_usize(2), lambda: 1.0 },
        loss_weights: vec![1.0; 4],
    };
    cfg.exits = (1..=4)
        .map(|i| ExitConfig {
            depth: adpc_core::ExitHeadConfig::default_depth(i, 4),
            head_channels: 3 + rng.next_usize(4),
        })
        .collect();
    cfg
}

fn carry_and_monotonicity(seed: u64, models: usize) -> Result<String, String> {
    let mut rng = SplitMix64::new(seed);
    let criteria = [
        ConfidenceCriterion::MaxProbThreshold { threshold: 0.35 },
        ConfidenceCriterion::EntropyThreshold { threshold: 1.0 },
        ConfidenceCriterion::TopKFraction { fraction: 0.4 },
    ];
    for m in 0..models {
        let mut cfg = verify_config(&mut rng);
        cfg.criterion = criteria[m % criteria.len()].clone();
        let weights = seeded_init(&cfg, rng.next_u64()).map_err(|e| e.to_string())?;
        let image = Tensor::from_fn(cfg.input_channels, 12, 18, |_, _, _| rng.next_f32());
        let res = infer_unbounded(&cfg, &weights, &image).map_err(|e| e.to_string())?;
        if res.predictions.len() != 4 {
            return Err(format!("model {m}: expected 4 exits"));
        }
        for pair in res.exit_masks.windows(2) {
            for (prev, next) in pair[0].bits().iter().zip(pair[1].bits()) {
                if next > prev {
                    return Err(format!("model {m}: a skipped pixel re-activated"));
                }
            }
        }
        let last = res.predictions.last().unwrap();
        let (c, h, w) = last.logits.shape();
        for y in 0..h {
            for x in 0..w {
                let src = last.source_exit[y * w + x] as usize;
                let source = &res.predictions[src - 1];
                for ch in 0..c {
                    if last.logits.at(ch, y, x).to_bits() != source.logits.at(ch, y, x).to_bits() {
                        return Err(format!("model {m}: carried value differs from source exit"));
                    }
                }
            }
        }
    }
    Ok(format!("{models} seeded models"))
}

fn ledger_audit(seed: u64, models: usize) -> Result<String, String> {
    let mut rng = SplitMix64::new(seed);
    for m in 0..models {
        let mut cfg = verify_config(&mut rng);
        let weights = seeded_init(&cfg, rng.next_u64()).map_err(|e| e.to_string())?;
        let image = Tensor::from_fn(cfg.input_channels, 10, 14, |_, _, _| rng.next_f32());

        cfg.criterion = ConfidenceCriterion::MaxProbThreshold { threshold: 1.5 };
        let unattainable = infer_unbounded(&cfg, &weights, &image).map_err(|e| e.to_string())?;
        unattainable.ledger.audit().map_err(|e| e.to_string())?;

        let mut off = cfg.clone();
        off.adaptivity = false;
        let dense = infer_unbounded(&off, &weights, &image).map_err(|e| e.to_string())?;
        dense.ledger.audit().map_err(|e| e.to_string())?;

        if unattainable.ledger != dense.ledger {
            return Err(format!("model {m}: unattainable-threshold ledger differs from dense"));
        }
        let closed_form = dense_flops(&cfg, 10, 14).map_err(|e| e.to_string())?;
        if dense.ledger.exit_totals() != closed_form.as_slice() {
            return Err(format!("model {m}: ledger differs from closed-form dense FLOPs"));
        }

        // Budgets return exact prefixes.
        cfg.criterion = ConfidenceCriterion::MaxProbThreshold { threshold: 0.35 };
        let full = infer_unbounded(&cfg, &weights, &image).map_err(|e| e.to_string())?;
        full.ledger.audit().map_err(|e| e.to_string())?;
        let totals = full.ledger.exit_totals();
        let mid = (totals[1] + totals[2]) / 2;
        let part = infer(&cfg, &weights, &image, Budget::FlopsLimit(mid))
            .map_err(|e| e.to_string())?;
        part.ledger.audit().map_err(|e| e.to_string())?;
        if part.predictions.len() != 2 {
            return Err(format!(
                "model {m}: FLOPs budget between exits 2 and 3 returned {} exits",
                part.predictions.len()
            ));
        }
        for (p, f) in part.predictions.iter().zip(&full.predictions) {
            if p.logits
                .data()
                .iter()
                .zip(f.logits.data())
                .any(|(a, b)| a.to_bits() != b.to_bits())
            {
                return Err(format!("model {m}: budgeted run is not a bitwise prefix"));
            }
        }
    }

    // The constructed scene: fractions grow and the run undercuts dense cost.
    let sc = build_scenario(seed).map_err(|e| e.to_string())?;
    let res = infer_unbounded(&sc.config, &sc.weights, &sc.image).map_err(|e| e.to_string())?;
    res.ledger.audit().map_err(|e| e.to_string())?;
    let fractions = res.skipped_fractions();
    if fractions.windows(2).any(|p| p[1] < p[0]) {
        return Err("scenario skipped fractions decreased".to_string());
    }
    let dense = dense_flops(&sc.config, sc.image.height(), sc.image.width())
        .map_err(|e| e.to_string())?;
    if res.ledger.grand_total() > dense[3] {
        return Err("scenario adaptive run cost more than dense".to_string());
    }
    Ok(format!("{models} seeded models + scenario"))
}

fn weight_format(seed: u64) -> Result<String, String> {
    let mut rng = SplitMix64::new(seed);
    let cfg = verify_config(&mut rng);
    let store = seeded_init(&cfg, seed).map_err(|e| e.to_string())?;
    let bytes = store.to_bytes();
    let back = WeightStore::from_bytes(&bytes).map_err(|e| e.to_string())?;
    if back.to_bytes() != bytes {
        return Err("weight round trip is not bitwise".to_string());
    }
    for (name, mutate) in [
        ("magic", 0usize),
        ("version", 4),
        ("count", 8),
    ] {
        let mut bad = bytes.clone();
        bad[mutate] ^= 0xFF;
        if WeightStore::from_bytes(&bad).is_ok() {
            return Err(format!("corrupted {name} accepted"));
        }
    }
    if WeightStore::from_bytes(&bytes[..bytes.len() - 1]).is_ok() {
        return Err("truncated file accepted".to_string());
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    if WeightStore::from_bytes(&trailing).is_ok() {
        return Err("trailing bytes accepted".to_string());
    }
    Ok("round trip + 5 rejections".to_string())
}

type Suite = Box<dyn Fn() -> Result<String, String>>;

/// Run every suite, print one line per suite, and return overall success.
pub fn run_all(seed: u64) -> bool {
    let suites: Vec<(&str, Suite)> = vec![
        ("dense-equivalence", Box::new(move || dense_equivalence(seed, 300))),
        ("interpolation", Box::new(move || interpolation(seed.wrapping_add(1), 150))),
        ("carry-over", Box::new(move || carry_and_monotonicity(seed.wrapping_add(2), 9))),
        ("ledger-audit", Box::new(move || ledger_audit(seed.wrapping_add(3), 6))),
        ("weight-format", Box::new(move || weight_format(seed.wrapping_add(4)))),
    ];
    let mut ok = true;
    for (name, suite) in suites {
        let start = Instant::now();
        match suite() {
            Ok(detail) => {
                println!("suite {name}: pass ({detail}, {} ms)", start.elapsed().as_millis());
            }
            Err(err) => {
                ok = false;
                println!("suite {name}: FAIL ({err})");
            }
        }
    }
    ok
}
