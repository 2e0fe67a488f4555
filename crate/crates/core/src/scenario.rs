//! A constructed evaluation scene with known, hand-set weights.
//!
//! The image is a mostly flat background with two rectangles at distinct
//! intensity bands. The network's convolutions pass two channels through
//! unchanged: channel 0 carries intensity, channel 1 carries a constant mass
//! of 1. The classifier maps the pair to nearest-band logits,
//! `logit_k = s*c_k*intensity - s*(c_k^2/2)*mass`, so its argmax picks the
//! band center closest to intensity/mass and its logit gaps shrink wherever
//! sparsity has diluted the features. Band interiors are therefore extremely
//! confident from the first exit, smeared band borders stay uncertain until
//! later, sharper exits, and diluted pixels lose confidence instead of
//! freezing wrong: skipped fractions grow exit over exit and
//! confidence-ordered masking has real signal to beat random masking.

use crate::backbone::{ExitConfig, InterpConfig, ModelConfig, StageConfig, CONFIG_SCHEMA_VERSION};
use crate::error::Result;
use crate::exec::BN_EPS;
use crate::masked::ConfidenceCriterion;
use crate::metrics::ClassMap;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::weights::{BnParams, ConvWeights, WeightStore};

pub const SCENARIO_HEIGHT: usize = 64;
pub const SCENARIO_WIDTH: usize = 128;

/// Intensity band centers; class k is "intensity nearest BAND_CENTERS[k]".
pub const BAND_CENTERS: [f32; 3] = [0.25, 0.5, 0.75];
/// Classifier logit scale. Background sits 0.125 from the nearest decision
/// boundary, so its runner-up logit gap is 400 * 0.25 * 0.125 = 12.5, far
/// past the ~6.2 gap that max-prob 0.998 requires.
const LOGIT_SCALE: f32 = 400.0;
const NOISE_AMPLITUDE: f32 = 0.01;

// Rectangle A: class 1 at intensity 0.5. Rectangle B: class 2 at 0.75.
const RECT_A: (usize, usize, usize, usize) = (16, 40, 24, 64); // y0, y1, x0, x1
const RECT_B: (usize, usize, usize, usize) = (24, 44, 80, 112);

/// A ready-to-run scene: config, hand-set weights, image, ground truth.
pub struct Scenario {
    pub config: ModelConfig,
    pub weights: WeightStore,
    pub image: Tensor,
    pub label: ClassMap,
}

fn in_rect(y: usize, x: usize, r: (usize, usize, usize, usize)) -> bool {
    y >= r.0 && y < r.1 && x >= r.2 && x < r.3
}

fn clean_value(y: usize, x: usize) -> f32 {
    if in_rect(y, x, RECT_A) {
        BAND_CENTERS[1]
    } else if in_rect(y, x, RECT_B) {
        BAND_CENTERS[2]
    } else {
        BAND_CENTERS[0]
    }
}

fn band_class(v: f32) -> u32 {
    let mut best = 0usize;
    let mut best_d = (v - BAND_CENTERS[0]).abs();
    for (k, &c) in BAND_CENTERS.iter().enumerate().skip(1) {
        let d = (v - c).abs();
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best as u32
}

/// The scene's model: four single-block stages at one resolution, depth
/// schedule 3/2/1/0, max-prob threshold 0.998.
pub fn scenario_config() -> ModelConfig {
    ModelConfig {
        schema_version: CONFIG_SCHEMA_VERSION,
        input_channels: 3,
        num_classes: 3,
        stages: vec![
            StageConfig { num_blocks: 1, channels: 16, downsample: false },
            StageConfig { num_blocks: 1, channels: 16, downsample: false },
            StageConfig { num_blocks: 1, channels: 32, downsample: false },
            StageConfig { num_blocks: 1, channels: 32, downsample: false },
        ],
        exits: vec![
            ExitConfig { depth: 3, head_channels: 16 },
            ExitConfig { depth: 2, head_channels: 16 },
            ExitConfig { depth: 1, head_channels: 16 },
            ExitConfig { depth: 0, head_channels: 16 },
        ],
        adaptivity: true,
        criterion: ConfidenceCriterion::MaxProbThreshold { threshold: 0.998 },
        interp: InterpConfig { radius: 3, lambda: 1.0 },
        loss_weights: vec![1.0; 4],
    }
}

/// Pass-through convolution: center taps carry channel 0 to channel 0 and
/// channel 1 to channel 1, everything else is 0.
fn identity_conv(out_c: usize, in_c: usize, k: usize) -> Result<ConvWeights> {
    let mut w = vec![0.0f32; out_c * in_c * k * k];
    let center = (k / 2) * k + k / 2;
    w[center] = 1.0; // oc 0 <- ic 0
    w[(in_c + 1) * k * k + center] = 1.0; // oc 1 <- ic 1
    ConvWeights::new(out_c, in_c, k, k, w, vec![0.0; out_c])
}

fn zero_conv(out_c: usize, in_c: usize, k: usize) -> Result<ConvWeights> {
    ConvWeights::new(out_c, in_c, k, k, vec![0.0; out_c * in_c * k * k], vec![0.0; out_c])
}

/// Nearest-band readout on (intensity, mass):
/// `logit_k = s*c_k*intensity - s*(c_k^2/2)*mass`. At full mass the argmax is
/// the band center closest to intensity with margins proportional to the
/// distance from the decision boundary; dilution scales every gap down
/// uniformly, lowering confidence without moving the argmax.
fn band_classifier(in_c: usize) -> Result<ConvWeights> {
    let classes = BAND_CENTERS.len();
    let mut w = vec![0.0f32; classes * in_c];
    for (k, &c) in BAND_CENTERS.iter().enumerate() {
        w[k * in_c] = LOGIT_SCALE * c;
        w[k * in_c + 1] = -LOGIT_SCALE * c * c / 2.0;
    }
    ConvWeights::new(classes, in_c, 1, 1, w, vec![0.0; classes])
}

fn put(store: &mut WeightStore, name: &str, conv: ConvWeights, with_bn: bool) -> Result<()> {
    let out_c = conv.out_channels;
    store.insert_conv(name, &conv)?;
    if with_bn {
        store.insert_bn(&format!("{name}.bn"), &BnParams::identity(out_c, BN_EPS))?;
    }
    Ok(())
}

/// Hand-set weights: every backbone and head convolution passes the intensity
/// and mass channels through, residual second convs are zero, and each
/// classifier is the nearest-band readout.
pub fn scenario_weights(cfg: &ModelConfig) -> Result<WeightStore> {
    let mut store = WeightStore::new();
    let mut cin = cfg.input_channels;
    for (si, stage) in cfg.stages.iter().enumerate() {
        let s = si + 1;
        let c = stage.channels;
        put(&mut store, &format!("stage{s}.entry"), identity_conv(c, cin, 3)?, true)?;
        for b in 1..=stage.num_blocks {
            put(&mut store, &format!("stage{s}.block{b}.conv1"), identity_conv(c, c, 3)?, true)?;
            put(&mut store, &format!("stage{s}.block{b}.conv2"), zero_conv(c, c, 3)?, true)?;
        }
        let head = cfg.exit_head(si);
        let base = format!("exit{}", head.exit_index);
        put(&mut store, &format!("{base}.reduce"), identity_conv(head.head_channels, c, 1)?, true)?;
        for d in 1..=head.depth {
            put(
                &mut store,
                &format!("{base}.enc{d}"),
                identity_conv(head.head_channels, head.head_channels, 1)?,
                true,
            )?;
        }
        for d in 1..=head.depth {
            put(
                &mut store,
                &format!("{base}.dec{d}"),
                identity_conv(head.head_channels, head.head_channels, 1)?,
                true,
            )?;
        }
        put(&mut store, &format!("{base}.classifier"), band_classifier(head.head_channels)?, false)?;
        cin = c;
    }
    Ok(store)
}

/// The banded image with seeded noise. Channel 0 carries intensity plus
/// noise, channel 1 the constant mass of 1, channel 2 the clean intensity
/// (unused by the hand-set weights).
pub fn scenario_image(seed: u64) -> Tensor {
    let mut rng = SplitMix64::new(seed);
    Tensor::from_fn(3, SCENARIO_HEIGHT, SCENARIO_WIDTH, |c, y, x| match c {
        0 => clean_value(y, x) + rng.next_range(-NOISE_AMPLITUDE, NOISE_AMPLITUDE),
        1 => 1.0,
        _ => clean_value(y, x),
    })
}

/// Ground truth from the clean bands.
pub fn scenario_label() -> ClassMap {
    let mut classes = Vec::with_capacity(SCENARIO_HEIGHT * SCENARIO_WIDTH);
    for y in 0..SCENARIO_HEIGHT {
        for x in 0..SCENARIO_WIDTH {
            classes.push(band_class(clean_value(y, x)));
        }
    }
    ClassMap::new(SCENARIO_HEIGHT, SCENARIO_WIDTH, classes).expect("label is valid")
}

/// Fraction of background pixels in the clean scene.
pub fn background_fraction() -> f64 {
    let label = scenario_label();
    let bg = label.classes.iter().filter(|&&c| c == 0).count();
    bg as f64 / label.classes.len() as f64
}

pub fn build_scenario(seed: u64) -> Result<Scenario> {
    let config = scenario_config();
    let weights = scenario_weights(&config)?;
    Ok(Scenario { image: scenario_image(seed), label: scenario_label(), config, weights })
}

/// Noise-varied copies of the scene for sweeps: same geometry and label,
/// different seeds.
pub fn scenario_dataset(seed: u64, count: usize) -> Vec<(Tensor, ClassMap)> {
    let label = scenario_label();
    (0..count)
        .map(|i| (scenario_image(crate::rng::mix(seed, i as u64)), label.clone()))
        .collect()
}
