//! Staged convolutional backbone with an exit branch after each stage.
//!
//! Each stage is an entry 3x3 convolution (stride 2 when the stage
//! downsamples) followed by residual blocks of two 3x3 convolutions. After
//! every stage a prediction head branches off; between exits, every
//! convolution in the next stage and inside the next head runs under the
//! confidence masks of the completed exits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{ConvSpec, ExecCtx, Step};
use crate::flops::{entropy_flops, softmax_flops, LayerRecord};
use crate::heads::{
    carry_over, exit_confidence, head_forward, ExitHeadConfig, ExitPrediction,
};
use crate::masked::{compute_mask, ConfidenceCriterion, InterpKernel, Mask};
use crate::rng::SplitMix64;
use crate::runtime::{AnytimeResult, HaltPoint, HaltProbe};
use crate::tensor::Tensor;
use crate::weights::{BnParams, ConvWeights, WeightStore};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// One backbone stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub num_blocks: usize,
    pub channels: usize,
    /// Stride-2 entry convolution when true.
    pub downsample: bool,
}

/// One exit head entry in the config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExitConfig {
    pub depth: usize,
    pub head_channels: usize,
}

/// Interpolation kernel parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterpConfig {
    pub radius: usize,
    pub lambda: f32,
}

/// Whole-model description. Spatial input size is not part of the config;
/// any image with the right channel count runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub schema_version: u32,
    pub input_channels: usize,
    pub num_classes: usize,
    pub stages: Vec<StageConfig>,
    pub exits: Vec<ExitConfig>,
    pub adaptivity: bool,
    pub criterion: ConfidenceCriterion,
    pub interp: InterpConfig,
    pub loss_weights: Vec<f32>,
}

impl ModelConfig {
    /// The default desk-scale model: four stages at 16/32/32/64 channels, two
    /// blocks each, no downsampling, 19 classes, depth schedule 3/2/1/0.
    pub fn default_desk() -> Self {
        ModelConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            input_channels: 3,
            num_classes: 19,
            stages: [16, 32, 32, 64]
                .into_iter()
                .map(|channels| StageConfig { num_blocks: 2, channels, downsample: false })
                .collect(),
            exits: (1..=4)
                .map(|i| ExitConfig {
                    depth: ExitHeadConfig::default_depth(i, 4),
                    head_channels: 32,
                })
                .collect(),
            adaptivity: true,
            criterion: ConfidenceCriterion::MaxProbThreshold { threshold: 0.998 },
            interp: InterpConfig { radius: 7, lambda: 1.0 },
            loss_weights: vec![1.0; 4],
        }
    }

    pub fn total_exits(&self) -> usize {
        self.stages.len()
    }

    pub fn exit_head(&self, stage_index: usize) -> ExitHeadConfig {
        ExitHeadConfig {
            exit_index: stage_index + 1,
            total_exits: self.total_exits(),
            depth: self.exits[stage_index].depth,
            head_channels: self.exits[stage_index].head_channels,
            num_classes: self.num_classes,
        }
    }

    /// Whether exits carry per-pixel probability maps.
    pub fn needs_probabilities(&self) -> bool {
        !matches!(self.criterion, ConfidenceCriterion::MaxActivationBelow { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::config(format!(
                "unsupported config schema version {}",
                self.schema_version
            )));
        }
        if self.stages.is_empty() {
            return Err(Error::config("model needs at least one stage"));
        }
        if self.exits.len() != self.stages.len() {
            return Err(Error::config(format!(
                "{} exits configured for {} stages",
                self.exits.len(),
                self.stages.len()
            )));
        }
        if self.input_channels == 0 {
            return Err(Error::config("input channels must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num classes must be >= 2"));
        }
        for (i, st) in self.stages.iter().enumerate() {
            if st.num_blocks == 0 || st.channels == 0 {
                return Err(Error::config(format!("stage {} must have blocks and channels", i + 1)));
            }
        }
        for i in 0..self.exits.len() {
            self.exit_head(i).validate()?;
        }
        if self.loss_weights.len() != self.total_exits() {
            return Err(Error::config(format!(
                "{} loss weights for {} exits",
                self.loss_weights.len(),
                self.total_exits()
            )));
        }
        if self.loss_weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::config("loss weights must be finite and >= 0"));
        }
        self.criterion.validate()?;
        InterpKernel::new(self.interp.radius, self.interp.lambda)?;
        Ok(())
    }

    /// Parse from JSON, rejecting unknown keys and wrong schema versions.
    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: ModelConfig =
            serde_json::from_str(json).map_err(|e| Error::format(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Spatial resolution of each stage's features (and of its exit's
    /// prediction) for a given input size.
    pub fn stage_resolutions(&self, input_h: usize, input_w: usize) -> Vec<(usize, usize)> {
        let mut dims = (input_h, input_w);
        self.stages
            .iter()
            .map(|st| {
                if st.downsample {
                    dims = (dims.0.div_ceil(2), dims.1.div_ceil(2));
                }
                dims
            })
            .collect()
    }
}

/// Run the full pipeline: stage 1, exit 1, mask, stage 2, exit 2, ... The
/// halt probe is consulted before every layer; completed exits are always
/// returned.
pub fn forward_all_exits(
    cfg: &ModelConfig,
    weights: &WeightStore,
    image: &Tensor,
    halt: &HaltProbe,
) -> Result<AnytimeResult> {
    cfg.validate()?;
    if image.channels() != cfg.input_channels {
        return Err(Error::config(format!(
            "model expects {} input channels, image has {}",
            cfg.input_channels,
            image.channels()
        )));
    }
    let resolutions = cfg.stage_resolutions(image.height(), image.width());
    if cfg.adaptivity && resolutions.windows(2).any(|p| p[0] != p[1]) {
        return Err(Error::config(
            "adaptivity requires all exits at one resolution; disable downsampling or adaptivity",
        ));
    }

    let kernel = InterpKernel::new(cfg.interp.radius, cfg.interp.lambda)?;
    let mut ctx = ExecCtx::new(weights, halt, kernel);
    let total = cfg.total_exits();
    let needs_prob = cfg.needs_probabilities();

    let mut x = image.clone();
    let mut predictions: Vec<ExitPrediction> = Vec::new();
    let mut exit_masks: Vec<Mask> = Vec::new();
    let mut effective: Option<Mask> = None;
    let mut halted: Option<String> = None;

    'stages: for (si, stage) in cfg.stages.iter().enumerate() {
        let s = si + 1;
        let entry = ConvSpec {
            name: format!("stage{s}.entry"),
            stride: if stage.downsample { 2 } else { 1 },
            bn: true,
            relu: true,
            residual: None,
        };
        x = match ctx.conv_layer(&x, entry)? {
            Step::Done(t) => t,
            Step::Halted(l) => {
                halted = Some(l);
                break 'stages;
            }
        };
        for b in 1..=stage.num_blocks {
            let block_in = x.clone();
            x = match ctx.conv_layer(
                &x,
                ConvSpec {
                    name: format!("stage{s}.block{b}.conv1"),
                    stride: 1,
                    bn: true,
                    relu: true,
                    residual: None,
                },
            )? {
                Step::Done(t) => t,
                Step::Halted(l) => {
                    halted = Some(l);
                    break 'stages;
                }
            };
            x = match ctx.conv_layer(
                &x,
                ConvSpec {
                    name: format!("stage{s}.block{b}.conv2"),
                    stride: 1,
                    bn: true,
                    relu: true,
                    residual: Some(&block_in),
                },
            )? {
                Step::Done(t) => t,
                Step::Halted(l) => {
                    halted = Some(l);
                    break 'stages;
                }
            };
        }

        let head_cfg = cfg.exit_head(si);
        let logits = match head_forward(&x, &head_cfg, &mut ctx)? {
            Step::Done(t) => t,
            Step::Halted(l) => {
                halted = Some(l);
                break 'stages;
            }
        };

        // Exit overhead: softmax over freshly computed pixels, plus the
        // entropy evaluation when that criterion drives adaptivity.
        let exit_no = si + 1;
        let px = logits.pixels() as u64;
        let classes = cfg.num_classes as u64;
        let fresh_px = effective.as_ref().map_or(px, |m| m.count_computed() as u64);
        let mut overhead = 0u64;
        if needs_prob {
            overhead += softmax_flops(classes, fresh_px);
        }
        if cfg.adaptivity
            && matches!(cfg.criterion, ConfidenceCriterion::EntropyThreshold { .. })
        {
            overhead += entropy_flops(classes, px);
        }
        let overhead_name = format!("exit{exit_no}.predict");
        if ctx.should_halt(overhead) {
            halted = Some(overhead_name);
            break 'stages;
        }
        let pred = match (predictions.last(), &effective) {
            (Some(prev), Some(mask)) => carry_over(prev, &logits, mask)?,
            _ => ExitPrediction::fresh_prediction(exit_no, logits, needs_prob),
        };
        ctx.ledger.push(LayerRecord {
            name: overhead_name,
            active_pixels: fresh_px,
            skipped_pixels: px - fresh_px,
            conv_flops: 0,
            interp_flops: 0,
            aux_flops: overhead,
        });

        if cfg.adaptivity {
            let crit = cfg.criterion.for_exit(exit_no);
            let confidence = exit_confidence(&pred, &crit)?;
            let raw = compute_mask(&confidence, &crit)?;
            let new_effective = match &effective {
                Some(prev) => raw.and(prev)?,
                None => raw.clone(),
            };
            if !raw.all_computed() {
                ctx.gate.push_source(confidence, crit, new_effective.clone());
            }
            exit_masks.push(new_effective.clone());
            effective = Some(new_effective);
        } else {
            let (_, h, w) = pred.logits.shape();
            exit_masks.push(Mask::ones(h, w));
        }
        predictions.push(pred);
        ctx.ledger.mark_exit();

        if halt.exit_limit_reached(predictions.len()) {
            if s < cfg.stages.len() {
                halted = Some(format!("stage{}.entry", s + 1));
            }
            break 'stages;
        }
        let _ = total;
    }

    Ok(AnytimeResult {
        predictions,
        exit_masks,
        ledger: ctx.take_ledger(),
        halted_at: halted.map_or(HaltPoint::Complete, HaltPoint::Layer),
    })
}

fn init_conv(
    store: &mut WeightStore,
    name: &str,
    out_channels: usize,
    in_channels: usize,
    kernel: usize,
    with_bn: bool,
    rng: &mut SplitMix64,
) -> Result<()> {
    let fan_in = in_channels * kernel * kernel;
    let bound = (6.0 / fan_in as f64).sqrt() as f32;
    let weights = (0..out_channels * in_channels * kernel * kernel)
        .map(|_| rng.next_range(-bound, bound))
        .collect();
    let conv =
        ConvWeights::new(out_channels, in_channels, kernel, kernel, weights, vec![0.0; out_channels])?;
    store.insert_conv(name, &conv)?;
    if with_bn {
        store.insert_bn(&format!("{name}.bn"), &BnParams::identity(out_channels, crate::exec::BN_EPS))?;
    }
    Ok(())
}

/// Initialize one head's parameters (exposed for head-level tests).
pub fn init_head_weights(
    store: &mut WeightStore,
    cfg: &ExitHeadConfig,
    in_channels: usize,
    rng: &mut SplitMix64,
) -> Result<()> {
    let base = format!("exit{}", cfg.exit_index);
    init_conv(store, &format!("{base}.reduce"), cfg.head_channels, in_channels, 1, true, rng)?;
    for d in 1..=cfg.depth {
        init_conv(store, &format!("{base}.enc{d}"), cfg.head_channels, cfg.head_channels, 1, true, rng)?;
    }
    for d in 1..=cfg.depth {
        init_conv(store, &format!("{base}.dec{d}"), cfg.head_channels, cfg.head_channels, 1, true, rng)?;
    }
    init_conv(store, &format!("{base}.classifier"), cfg.num_classes, cfg.head_channels, 1, false, rng)
}

/// Deterministic pseudo-random weights: fan-in-scaled uniform convolutions
/// (|w| <= sqrt(6/fan_in)), zero biases, identity normalization. The same
/// seed always produces a byte-identical store.
pub fn seeded_init(cfg: &ModelConfig, seed: u64) -> Result<WeightStore> {
    cfg.validate()?;
    let mut store = WeightStore::new();
    let mut rng = SplitMix64::new(seed);
    let mut cin = cfg.input_channels;
    for (si, stage) in cfg.stages.iter().enumerate() {
        let s = si + 1;
        init_conv(&mut store, &format!("stage{s}.entry"), stage.channels, cin, 3, true, &mut rng)?;
        for b in 1..=stage.num_blocks {
            init_conv(
                &mut store,
                &format!("stage{s}.block{b}.conv1"),
                stage.channels,
                stage.channels,
                3,
                true,
                &mut rng,
            )?;
            init_conv(
                &mut store,
                &format!("stage{s}.block{b}.conv2"),
                stage.channels,
                stage.channels,
                3,
                true,
                &mut rng,
            )?;
        }
        init_head_weights(&mut store, &cfg.exit_head(si), stage.channels, &mut rng)?;
        cin = stage.channels;
    }
    Ok(store)
}
