//! Encoder-decoder prediction heads, per-exit confidence, and carry-over of
//! confident predictions.
//!
//! A head first projects branch features to a fixed channel width with a 1x1
//! convolution, downsamples `depth` times (pool then 1x1 conv), upsamples the
//! same number of times (bilinear resize then 1x1 conv), and classifies with
//! a final 1x1 convolution. The final exit keeps the original two-convolution
//! head, i.e. depth 0. Every conv except the classifier is followed by
//! normalization and relu. When gating is active, every convolution in the
//! head runs masked at its own resolution.

use crate::error::{Error, Result};
use crate::exec::{ConvSpec, ExecCtx, Step};
use crate::masked::{compute_mask, confidence_map, ConfidenceCriterion, Mask};
use crate::tensor::{softmax_pixel, Tensor};

/// Shape of one exit head.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExitHeadConfig {
    /// 1-based exit position.
    pub exit_index: usize,
    pub total_exits: usize,
    /// Number of pool-conv stages (equal to the number of upsample-conv
    /// stages). The final exit must use 0; early exits use 1..=4.
    pub depth: usize,
    pub head_channels: usize,
    pub num_classes: usize,
}

impl ExitHeadConfig {
    /// The default schedule: `total - index` for early exits, 0 for the last.
    pub fn default_depth(exit_index: usize, total_exits: usize) -> usize {
        total_exits.saturating_sub(exit_index)
    }

    pub fn validate(&self) -> Result<()> {
        if self.exit_index == 0 || self.exit_index > self.total_exits {
            return Err(Error::config(format!(
                "exit index {} out of range 1..={}",
                self.exit_index, self.total_exits
            )));
        }
        if self.exit_index == self.total_exits {
            if self.depth != 0 {
                return Err(Error::config("the final exit head must have depth 0"));
            }
        } else if !(1..=4).contains(&self.depth) {
            return Err(Error::config(format!(
                "early exit head depth must be 1..=4, got {}",
                self.depth
            )));
        }
        if self.head_channels == 0 {
            return Err(Error::config("head channels must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("num classes must be >= 2"));
        }
        Ok(())
    }
}

/// Run one exit head over branch features. Output logits match the input's
/// spatial size.
pub fn head_forward(
    features: &Tensor,
    cfg: &ExitHeadConfig,
    ctx: &mut ExecCtx<'_>,
) -> Result<Step<Tensor>> {
    cfg.validate()?;
    let base = format!("exit{}", cfg.exit_index);
    let mut x = match ctx.conv_layer(
        features,
        ConvSpec { name: format!("{base}.reduce"), stride: 1, bn: true, relu: true, residual: None },
    )? {
        Step::Done(t) => t,
        Step::Halted(l) => return Ok(Step::Halted(l)),
    };

    // Encoder: remember the resolution entering each pool so the decoder can
    // mirror it exactly (replication rounding makes odd sizes grow back
    // larger than they started; the crop restores them).
    let mut mirror = Vec::with_capacity(cfg.depth);
    for d in 1..=cfg.depth {
        mirror.push((x.height(), x.width()));
        x = match ctx.pool_layer(&format!("{base}.enc{d}.pool"), &x)? {
            Step::Done(t) => t,
            Step::Halted(l) => return Ok(Step::Halted(l)),
        };
        x = match ctx.conv_layer(
            &x,
            ConvSpec {
                name: format!("{base}.enc{d}"),
                stride: 1,
                bn: true,
                relu: true,
                residual: None,
            },
        )? {
            Step::Done(t) => t,
            Step::Halted(l) => return Ok(Step::Halted(l)),
        };
    }

    // Decoder.
    for d in 1..=cfg.depth {
        let (th, tw) = mirror[cfg.depth - d];
        x = match ctx.upsample_layer(&format!("{base}.dec{d}.up"), &x, th, tw)? {
            Step::Done(t) => t,
            Step::Halted(l) => return Ok(Step::Halted(l)),
        };
        x = match ctx.conv_layer(
            &x,
            ConvSpec {
                name: format!("{base}.dec{d}"),
                stride: 1,
                bn: true,
                relu: true,
                residual: None,
            },
        )? {
            Step::Done(t) => t,
            Step::Halted(l) => return Ok(Step::Halted(l)),
        };
    }

    match ctx.conv_layer(
        &x,
        ConvSpec {
            name: format!("{base}.classifier"),
            stride: 1,
            bn: false,
            relu: false,
            residual: None,
        },
    )? {
        Step::Done(t) => Ok(Step::Done(t)),
        Step::Halted(l) => Ok(Step::Halted(l)),
    }
}

/// One exit's prediction with per-pixel provenance.
#[derive(Debug, Clone)]
pub struct ExitPrediction {
    /// 1-based exit that produced this prediction.
    pub exit_index: usize,
    /// `num_classes x H x W` logits (or heatmaps).
    pub logits: Tensor,
    /// Per-pixel softmax of the logits; absent for heatmap-style outputs.
    /// Carried pixels keep the probabilities of their source exit.
    pub probabilities: Option<Tensor>,
    /// 1 = freshly computed at this exit, 0 = carried from an earlier exit.
    pub fresh: Mask,
    /// Per-pixel exit index the value originates from, row-major.
    pub source_exit: Vec<u16>,
}

impl ExitPrediction {
    /// A prediction where every pixel is fresh (the first exit, or any exit
    /// with adaptivity off).
    pub fn fresh_prediction(exit_index: usize, logits: Tensor, with_probabilities: bool) -> Self {
        let (_, h, w) = logits.shape();
        let probabilities =
            with_probabilities.then(|| crate::tensor::softmax_channels(&logits));
        ExitPrediction {
            exit_index,
            probabilities,
            fresh: Mask::ones(h, w),
            source_exit: vec![exit_index as u16; h * w],
            logits,
        }
    }

    /// Per-pixel argmax class indices (ties to the lowest class index).
    pub fn class_map(&self) -> Vec<u32> {
        let (c, h, w) = self.logits.shape();
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_v = self.logits.at(0, y, x);
                for ch in 1..c {
                    let v = self.logits.at(ch, y, x);
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                out.push(best as u32);
            }
        }
        out
    }
}

/// Merge a fresh prediction with the previous exit's: pixels the mask
/// computed (bit 1) take the fresh value, skipped pixels carry the previous
/// value, probabilities included. Probabilities are recomputed only at fresh
/// pixels.
pub fn carry_over(
    prev: &ExitPrediction,
    fresh_logits: &Tensor,
    prev_mask: &Mask,
) -> Result<ExitPrediction> {
    if fresh_logits.shape() != prev.logits.shape() {
        return Err(Error::config(format!(
            "carry shape mismatch: fresh {:?} vs previous {:?}",
            fresh_logits.shape(),
            prev.logits.shape()
        )));
    }
    let (c, h, w) = fresh_logits.shape();
    if prev_mask.dims() != (h, w) {
        return Err(Error::config(format!(
            "carry mask {:?} does not match prediction {}x{}",
            prev_mask.dims(),
            h,
            w
        )));
    }
    let exit_index = prev.exit_index + 1;
    let mut logits = prev.logits.clone();
    let mut probabilities = prev.probabilities.clone();
    let mut source_exit = prev.source_exit.clone();
    let mut col = vec![0.0f32; c];
    for y in 0..h {
        for x in 0..w {
            if !prev_mask.computed(y, x) {
                continue;
            }
            for ch in 0..c {
                logits.set(ch, y, x, fresh_logits.at(ch, y, x));
            }
            if let Some(probs) = probabilities.as_mut() {
                softmax_pixel(fresh_logits, y, x, &mut col);
                for (ch, &p) in col.iter().enumerate() {
                    probs.set(ch, y, x, p);
                }
            }
            source_exit[y * w + x] = exit_index as u16;
        }
    }
    Ok(ExitPrediction {
        exit_index,
        logits,
        probabilities,
        fresh: prev_mask.clone(),
        source_exit,
    })
}

/// Confidence map of a prediction under a criterion: probability-based
/// criteria read the stored probabilities, activation-based criteria read the
/// raw outputs.
pub fn exit_confidence(pred: &ExitPrediction, criterion: &ConfidenceCriterion) -> Result<Tensor> {
    let source = match criterion {
        ConfidenceCriterion::MaxActivationBelow { .. } => &pred.logits,
        ConfidenceCriterion::RandomFraction { .. } => {
            pred.probabilities.as_ref().unwrap_or(&pred.logits)
        }
        _ => pred.probabilities.as_ref().ok_or_else(|| {
            Error::config("criterion reads probabilities but the prediction has none")
        })?,
    };
    Ok(confidence_map(source, criterion))
}

/// Raw compute mask of one exit's prediction (before intersection with the
/// masks of earlier exits).
pub fn exit_mask(pred: &ExitPrediction, criterion: &ConfidenceCriterion) -> Result<Mask> {
    compute_mask(&exit_confidence(pred, criterion)?, criterion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::ExecCtx;
    use crate::masked::InterpKernel;
    use crate::oracle;
    use crate::rng::SplitMix64;
    use crate::runtime::HaltProbe;
    use crate::tensor::softmax_channels;
    use crate::weights::WeightStore;

    fn head_weights(cfg: &ExitHeadConfig, in_channels: usize, seed: u64) -> WeightStore {
        let mut store = WeightStore::new();
        let mut rng = SplitMix64::new(seed);
        crate::backbone::init_head_weights(&mut store, cfg, in_channels, &mut rng).unwrap();
        store
    }

    fn run_head(
        features: &Tensor,
        cfg: &ExitHeadConfig,
        store: &WeightStore,
    ) -> (Tensor, crate::flops::FlopsLedger) {
        let halt = HaltProbe::unbounded();
        let mut ctx = ExecCtx::new(store, &halt, InterpKernel::new(3, 1.0).unwrap());
        let out = match head_forward(features, cfg, &mut ctx).unwrap() {
            Step::Done(t) => t,
            Step::Halted(l) => panic!("unexpected halt at {l}"),
        };
        (out, ctx.take_ledger())
    }

    #[test]
    fn depth3_head_shapes() {
        let cfg = ExitHeadConfig {
            exit_index: 1,
            total_exits: 4,
            depth: 3,
            head_channels: 6,
            num_classes: 5,
        };
        let store = head_weights(&cfg, 4, 1);
        let features = Tensor::filled(4, 64, 128, 0.1);
        let (out, ledger) = run_head(&features, &cfg, &store);
        assert_eq!(out.shape(), (5, 64, 128));
        // The innermost encoder resolution is 8x16 = 128 pixels.
        let min_px = ledger
            .records()
            .iter()
            .filter(|r| r.name.contains("enc3"))
            .map(|r| r.active_pixels)
            .min()
            .unwrap();
        assert_eq!(min_px, 8 * 16);
    }

    #[test]
    fn depth0_head_is_two_convolutions() {
        let cfg = ExitHeadConfig {
            exit_index: 4,
            total_exits: 4,
            depth: 0,
            head_channels: 6,
            num_classes: 5,
        };
        let store = head_weights(&cfg, 8, 2);
        let features = Tensor::filled(8, 10, 12, 0.3);
        let (out, ledger) = run_head(&features, &cfg, &store);
        assert_eq!(out.shape(), (5, 10, 12));
        let names: Vec<&str> = ledger.records().iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, vec!["exit4.reduce", "exit4.classifier"]);
    }

    #[test]
    fn odd_dims_round_trip_through_head() {
        let cfg = ExitHeadConfig {
            exit_index: 1,
            total_exits: 3,
            depth: 2,
            head_channels: 4,
            num_classes: 3,
        };
        let store = head_weights(&cfg, 2, 3);
        let features = Tensor::filled(2, 13, 9, 0.2);
        let (out, _) = run_head(&features, &cfg, &store);
        assert_eq!(out.shape(), (3, 13, 9));
    }

    #[test]
    fn all_ones_gating_matches_dense_bitwise() {
        let cfg = ExitHeadConfig {
            exit_index: 2,
            total_exits: 4,
            depth: 2,
            head_channels: 5,
            num_classes: 4,
        };
        let store = head_weights(&cfg, 3, 4);
        let mut rng = SplitMix64::new(9);
        let features = Tensor::from_fn(3, 12, 16, |_, _, _| rng.next_range(-1.0, 1.0));

        let halt = HaltProbe::unbounded();
        let (dense, gated) = {
            let mut ctx = ExecCtx::new(&store, &halt, InterpKernel::new(3, 1.0).unwrap());
            let dense = match head_forward(&features, &cfg, &mut ctx).unwrap() {
                Step::Done(t) => t,
                Step::Halted(_) => unreachable!(),
            };
            let mut ctx = ExecCtx::new(&store, &halt, InterpKernel::new(3, 1.0).unwrap());
            // An everywhere-confident source yields all-ones masks at every
            // resolution; outputs must match the dense path bit for bit.
            ctx.gate.push_source(
                Tensor::filled(1, 12, 16, 0.0),
                ConfidenceCriterion::MaxProbThreshold { threshold: 0.5 },
                Mask::ones(12, 16),
            );
            let gated = match head_forward(&features, &cfg, &mut ctx).unwrap() {
                Step::Done(t) => t,
                Step::Halted(_) => unreachable!(),
            };
            (dense, gated)
        };
        for (a, b) in dense.data().iter().zip(gated.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn head_rejects_bad_depth() {
        let bad_final = ExitHeadConfig {
            exit_index: 3,
            total_exits: 3,
            depth: 1,
            head_channels: 4,
            num_classes: 3,
        };
        assert!(bad_final.validate().is_err());
        let bad_early = ExitHeadConfig {
            exit_index: 1,
            total_exits: 3,
            depth: 5,
            head_channels: 4,
            num_classes: 3,
        };
        assert!(bad_early.validate().is_err());
        assert_eq!(ExitHeadConfig::default_depth(1, 4), 3);
        assert_eq!(ExitHeadConfig::default_depth(4, 4), 0);
    }

    fn random_pred(rng: &mut SplitMix64, exit: usize, c: usize, h: usize, w: usize) -> ExitPrediction {
        let logits = Tensor::from_fn(c, h, w, |_, _, _| rng.next_range(-2.0, 2.0));
        ExitPrediction::fresh_prediction(exit, logits, true)
    }

    #[test]
    fn carry_all_fresh_and_all_carried() {
        let mut rng = SplitMix64::new(21);
        let prev = random_pred(&mut rng, 1, 4, 5, 6);
        let fresh = Tensor::from_fn(4, 5, 6, |_, _, _| rng.next_range(-2.0, 2.0));

        let all = carry_over(&prev, &fresh, &Mask::ones(5, 6)).unwrap();
        assert_eq!(all.exit_index, 2);
        assert_eq!(all.logits, fresh);
        assert!(all.fresh.all_computed());
        assert!(all.source_exit.iter().all(|&s| s == 2));
        // Probabilities recomputed at fresh pixels match a full softmax.
        let want = softmax_channels(&fresh);
        let got = all.probabilities.as_ref().unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let none = carry_over(&prev, &fresh, &Mask::zeros(5, 6)).unwrap();
        assert_eq!(none.logits, prev.logits);
        assert_eq!(none.probabilities, prev.probabilities);
        assert!(none.source_exit.iter().all(|&s| s == 1));
    }

    #[test]
    fn carry_mixed_matches_select_oracle() {
        let mut rng = SplitMix64::new(33);
        let prev = random_pred(&mut rng, 1, 3, 6, 4);
        let fresh = Tensor::from_fn(3, 6, 4, |_, _, _| rng.next_range(-2.0, 2.0));
        let bits = (0..24).map(|_| (rng.next_f32() < 0.5) as u8).collect();
        let mask = Mask::new(6, 4, bits).unwrap();
        let merged = carry_over(&prev, &fresh, &mask).unwrap();
        let want = oracle::carry_select_reference(&prev.logits, &fresh, &mask);
        assert_eq!(merged.logits, want);
        for y in 0..6 {
            for x in 0..4 {
                let s = merged.source_exit[y * 4 + x];
                assert_eq!(s, if mask.computed(y, x) { 2 } else { 1 });
            }
        }

        let bad = Tensor::zeros(3, 4, 6);
        assert!(carry_over(&prev, &bad, &mask).is_err());
    }

    #[test]
    fn exit_mask_thresholds_and_carry_stability() {
        // One pixel confident (max prob 0.999), one not.
        let mut logits = Tensor::zeros(2, 1, 2);
        logits.set(0, 0, 0, (0.999f32 / 0.001).ln());
        let pred = ExitPrediction::fresh_prediction(1, logits, true);
        let crit = ConfidenceCriterion::MaxProbThreshold { threshold: 0.998 };
        let mask = exit_mask(&pred, &crit).unwrap();
        assert!(!mask.computed(0, 0));
        assert!(mask.computed(0, 1));

        // Carrying the confident pixel leaves its mask bit unchanged.
        let fresh = Tensor::filled(2, 1, 2, 0.0);
        let next = carry_over(&pred, &fresh, &mask).unwrap();
        let mask2 = exit_mask(&next, &crit).unwrap();
        assert!(!mask2.computed(0, 0));
    }

    #[test]
    fn exit_mask_heatmap_polarity() {
        let mut heat = Tensor::filled(16, 1, 2, 0.0004);
        heat.set(3, 0, 0, 0.0015); // below 0.002: skipped
        heat.set(5, 0, 1, 0.5); // above: computed
        let pred = ExitPrediction::fresh_prediction(1, heat, false);
        let crit = ConfidenceCriterion::MaxActivationBelow { threshold: 0.002 };
        let mask = exit_mask(&pred, &crit).unwrap();
        assert!(!mask.computed(0, 0));
        assert!(mask.computed(0, 1));
    }
}
