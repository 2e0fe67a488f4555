//! Confidence masks and spatially sparse execution.
//!
//! A `Mask` marks per-pixel work: 1 = compute, 0 = skip. Masks are derived by
//! thresholding (or rank-selecting) a per-pixel confidence map; they are never
//! resized directly — the confidence map is bilinearly resized and then
//! re-thresholded at the target resolution. Convolution outputs at skipped
//! positions are written as zero and then filled by a distance-weighted
//! average of their neighborhood, in which skipped neighbors participate with
//! value zero but keep their weight in the denominator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix, SplitMix64};
use crate::tensor::{bilinear_resize, conv2d, conv_at, conv_out_dim, Tensor};
use crate::weights::ConvWeights;

/// Per-pixel binary compute map: 1 = compute, 0 = skip.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, bits: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::config("mask dims must be >= 1"));
        }
        if bits.len() != height * width {
            return Err(Error::config(format!(
                "mask bit count {} does not match {height}x{width}",
                bits.len()
            )));
        }
        if !bits.iter().all(|&b| b <= 1) {
            return Err(Error::config("mask values must be 0 or 1"));
        }
        Ok(Mask { height, width, bits })
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Mask { height, width, bits: vec![1; height * width] }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask { height, width, bits: vec![0; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn computed(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x] == 1
    }

    pub fn set(&mut self, y: usize, x: usize, compute: bool) {
        self.bits[y * self.width + x] = compute as u8;
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn count_computed(&self) -> usize {
        self.bits.iter().filter(|&&b| b == 1).count()
    }

    pub fn count_skipped(&self) -> usize {
        self.bits.len() - self.count_computed()
    }

    pub fn skipped_fraction(&self) -> f64 {
        self.count_skipped() as f64 / self.bits.len() as f64
    }

    pub fn all_computed(&self) -> bool {
        self.bits.iter().all(|&b| b == 1)
    }

    /// Intersection of compute sets: a pixel stays computed only where both
    /// masks compute it.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        if self.dims() != other.dims() {
            return Err(Error::config(format!(
                "mask shape mismatch: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| a & b).collect();
        Ok(Mask { height: self.height, width: self.width, bits })
    }
}

/// Exponentially decaying interpolation weights over a square neighborhood.
///
/// For radius `r` the table holds every offset with Chebyshev distance <= r
/// except the center, weighted `exp(-lambda^2 * (dy^2 + dx^2))`.
#[derive(Debug, Clone)]
pub struct InterpKernel {
    radius: usize,
    lambda: f32,
    /// `(dy, dx, weight)` in row-major offset order, center excluded.
    offsets: Vec<(i32, i32, f32)>,
}

impl InterpKernel {
    pub fn new(radius: usize, lambda: f32) -> Result<Self> {
        if radius == 0 {
            return Err(Error::config("interpolation radius must be >= 1"));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::config("interpolation lambda must be finite and >= 0"));
        }
        let r = radius as i32;
        let mut offsets = Vec::with_capacity((2 * radius + 1).pow(2) - 1);
        for dy in -r..=r {
            for dx in -r..=r {
                if dy == 0 && dx == 0 {
                    continue;
                }
                let d2 = (dy * dy + dx * dx) as f64;
                let w = (-(lambda as f64) * (lambda as f64) * d2).exp() as f32;
                offsets.push((dy, dx, w));
            }
        }
        Ok(InterpKernel { radius, lambda, offsets })
    }

    pub fn radius(&self) -> usize {
        self.radius
    }

    pub fn lambda(&self) -> f32 {
        self.lambda
    }

    pub fn offsets(&self) -> &[(i32, i32, f32)] {
        &self.offsets
    }
}

/// How per-pixel confidence is measured and turned into a mask.
///
/// `entropy_threshold` carries the natural (non-negative) entropy bound in
/// nats; confidences are stored negated so every criterion shares the
/// "higher value = more confident" polarity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ConfidenceCriterion {
    /// Skip a pixel once its maximum class probability reaches `threshold`.
    MaxProbThreshold { threshold: f32 },
    /// Skip a pixel once the entropy of its class distribution falls to
    /// `threshold` nats or below.
    EntropyThreshold { threshold: f32 },
    /// Skip the most confident `fraction` of pixels regardless of value.
    TopKFraction { fraction: f32 },
    /// Skip a pixel while its maximum channel activation stays below
    /// `threshold` (heatmap-style outputs).
    MaxActivationBelow { threshold: f32 },
    /// Skip a seeded uniformly random `fraction` of pixels.
    RandomFraction { fraction: f32, seed: u64 },
}

impl ConfidenceCriterion {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ConfidenceCriterion::MaxProbThreshold { threshold } => {
                // Thresholds above 1 are deliberately allowed: they are the
                // canonical way to run the adaptive path with nothing skipped.
                if !threshold.is_finite() || threshold < 0.0 {
                    return Err(Error::config("max_prob threshold must be finite and >= 0"));
                }
            }
            ConfidenceCriterion::EntropyThreshold { threshold } => {
                if !threshold.is_finite() || threshold < 0.0 {
                    return Err(Error::config("entropy threshold must be finite and >= 0"));
                }
            }
            ConfidenceCriterion::TopKFraction { fraction }
            | ConfidenceCriterion::RandomFraction { fraction, .. } => {
                if !fraction.is_finite() || !(0.0..=1.0).contains(&fraction) {
                    return Err(Error::config("fraction must be in [0, 1]"));
                }
            }
            ConfidenceCriterion::MaxActivationBelow { threshold } => {
                if !threshold.is_finite() || threshold < 0.0 {
                    return Err(Error::config("activation threshold must be finite and >= 0"));
                }
            }
        }
        Ok(())
    }

    /// Whether confidence is read from post-softmax probabilities.
    pub fn uses_probabilities(&self) -> bool {
        !matches!(self, ConfidenceCriterion::MaxActivationBelow { .. })
    }

    /// Derive the per-exit variant: the random criterion draws a fresh field
    /// at each exit, everything else is unchanged.
    pub fn for_exit(&self, exit_index: usize) -> ConfidenceCriterion {
        match *self {
            ConfidenceCriterion::RandomFraction { fraction, seed } => {
                ConfidenceCriterion::RandomFraction { fraction, seed: mix(seed, exit_index as u64) }
            }
            ref other => other.clone(),
        }
    }
}

/// Per-pixel scalar confidence of a prediction, `1 x H x W`.
///
/// Max-based criteria take the channel maximum, the entropy criterion returns
/// the negated Shannon entropy in nats, and the random criterion returns a
/// seeded uniform draw per pixel.
pub fn confidence_map(prediction: &Tensor, criterion: &ConfidenceCriterion) -> Tensor {
    let (c, h, w) = prediction.shape();
    match criterion {
        ConfidenceCriterion::MaxProbThreshold { .. }
        | ConfidenceCriterion::TopKFraction { .. }
        | ConfidenceCriterion::MaxActivationBelow { .. } => {
            Tensor::from_fn(1, h, w, |_, y, x| {
                let mut m = prediction.at(0, y, x);
                for ch in 1..c {
                    m = m.max(prediction.at(ch, y, x));
                }
                m
            })
        }
        ConfidenceCriterion::EntropyThreshold { .. } => Tensor::from_fn(1, h, w, |_, y, x| {
            let mut acc = 0.0f64; // sum of p*ln(p) = -H
            for ch in 0..c {
                let p = prediction.at(ch, y, x) as f64;
                if p > 0.0 {
                    acc += p * p.ln();
                }
            }
            acc as f32
        }),
        ConfidenceCriterion::RandomFraction { seed, .. } => {
            let mut rng = SplitMix64::new(*seed);
            let mut out = Tensor::zeros(1, h, w);
            for v in out.data_mut() {
                *v = rng.next_f32();
            }
            out
        }
    }
}

/// Number of pixels a fraction selects out of `total` (round-to-nearest).
fn fraction_count(fraction: f32, total: usize) -> usize {
    ((fraction as f64 * total as f64).round() as usize).min(total)
}

/// Turn a `1 x H x W` confidence map into a compute mask. A pixel is skipped
/// (bit 0) when it is deemed confident under the criterion; rank-based
/// criteria break ties by row-major pixel index.
pub fn compute_mask(confidence: &Tensor, criterion: &ConfidenceCriterion) -> Result<Mask> {
    if confidence.channels() != 1 {
        return Err(Error::config("confidence map must have exactly one channel"));
    }
    let (_, h, w) = confidence.shape();
    let vals = confidence.data();
    let bits = match *criterion {
        ConfidenceCriterion::MaxProbThreshold { threshold } => {
            vals.iter().map(|&v| (v < threshold) as u8).collect()
        }
        // Confidence is -H; skip when H <= threshold, i.e. -H >= -threshold.
        ConfidenceCriterion::EntropyThreshold { threshold } => {
            vals.iter().map(|&v| (v < -threshold) as u8).collect()
        }
        ConfidenceCriterion::MaxActivationBelow { threshold } => {
            vals.iter().map(|&v| (v >= threshold) as u8).collect()
        }
        ConfidenceCriterion::TopKFraction { fraction }
        | ConfidenceCriterion::RandomFraction { fraction, .. } => {
            let count = fraction_count(fraction, vals.len());
            let mut order: Vec<usize> = (0..vals.len()).collect();
            order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
            let mut bits = vec![1u8; vals.len()];
            for &i in order.iter().take(count) {
                bits[i] = 0;
            }
            bits
        }
    };
    Mask::new(h, w, bits)
}

/// Mask a prediction at a different resolution: resize the confidence map
/// bilinearly, then threshold at the target size. The binary mask itself is
/// never resized.
pub fn resample_mask(
    prediction: &Tensor,
    criterion: &ConfidenceCriterion,
    target_h: usize,
    target_w: usize,
) -> Result<Mask> {
    let conf = confidence_map(prediction, criterion);
    resample_confidence(&conf, criterion, target_h, target_w)
}

/// Resize an existing confidence map and threshold it.
pub(crate) fn resample_confidence(
    confidence: &Tensor,
    criterion: &ConfidenceCriterion,
    target_h: usize,
    target_w: usize,
) -> Result<Mask> {
    if (confidence.height(), confidence.width()) == (target_h, target_w) {
        return compute_mask(confidence, criterion);
    }
    let resized = bilinear_resize(confidence, target_h, target_w)?;
    compute_mask(&resized, criterion)
}

/// Convolution with per-pixel gating: computed positions are bit-identical to
/// the dense convolution, skipped positions are written as zero.
pub fn masked_conv2d(
    input: &Tensor,
    w: &ConvWeights,
    mask: &Mask,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    if input.channels() != w.in_channels {
        return Err(Error::config(format!(
            "conv expects {} input channels, tensor has {}",
            w.in_channels,
            input.channels()
        )));
    }
    if !(stride == 1 || stride == 2) {
        return Err(Error::config(format!("conv stride must be 1 or 2, got {stride}")));
    }
    let oh = conv_out_dim(input.height(), w.kernel_h, stride, padding)
        .ok_or_else(|| Error::config("conv kernel exceeds padded input height"))?;
    let ow = conv_out_dim(input.width(), w.kernel_w, stride, padding)
        .ok_or_else(|| Error::config("conv kernel exceeds padded input width"))?;
    if mask.dims() != (oh, ow) {
        return Err(Error::config(format!(
            "mask {:?} does not match conv output {}x{}",
            mask.dims(),
            oh,
            ow
        )));
    }
    let mut out = Tensor::zeros(w.out_channels, oh, ow);
    for oy in 0..oh {
        for ox in 0..ow {
            if !mask.computed(oy, ox) {
                continue;
            }
            for oc in 0..w.out_channels {
                out.set(oc, oy, ox, conv_at(input, w, oc, oy, ox, stride, padding));
            }
        }
    }
    debug_assert!(out.all_finite());
    Ok(out)
}

/// Fill skipped positions with the weighted average of their neighborhood.
///
/// Computed positions pass through unchanged. For a skipped position the
/// value is `sum(W * f) / sum(W)` over all in-bounds neighbors within the
/// kernel radius (center excluded), per channel. Skipped neighbors hold zero
/// in `f_out` and so contribute zero to the numerator while their weights
/// remain in the denominator. Out-of-bounds neighbors are excluded from both
/// sums.
pub fn interpolate_skipped(f_out: &Tensor, mask: &Mask, kernel: &InterpKernel) -> Result<Tensor> {
    let (c, h, w) = f_out.shape();
    if mask.dims() != (h, w) {
        return Err(Error::config(format!(
            "mask {:?} does not match tensor {}x{}",
            mask.dims(),
            h,
            w
        )));
    }
    let mut out = f_out.clone();
    let mut num = vec![0.0f64; c];
    for y in 0..h {
        for x in 0..w {
            if mask.computed(y, x) {
                continue;
            }
            num.iter_mut().for_each(|v| *v = 0.0);
            let mut den = 0.0f64;
            for &(dy, dx, wgt) in kernel.offsets() {
                let sy = y as i32 + dy;
                let sx = x as i32 + dx;
                if sy < 0 || sy >= h as i32 || sx < 0 || sx >= w as i32 {
                    continue;
                }
                let (sy, sx) = (sy as usize, sx as usize);
                den += wgt as f64;
                for (ch, acc) in num.iter_mut().enumerate() {
                    *acc += wgt as f64 * f_out.at(ch, sy, sx) as f64;
                }
            }
            if den == 0.0 {
                // Only reachable on a 1x1 image with its single pixel skipped.
                eprintln!("warning: empty interpolation neighborhood at ({y}, {x}); writing 0");
                for ch in 0..c {
                    out.set(ch, y, x, 0.0);
                }
                continue;
            }
            for (ch, &n) in num.iter().enumerate() {
                out.set(ch, y, x, (n / den) as f32);
            }
        }
    }
    debug_assert!(out.all_finite());
    Ok(out)
}

/// Masked convolution followed by neighborhood interpolation of the skipped
/// positions — the per-layer building block of the adaptive path.
pub fn masked_layer(
    input: &Tensor,
    w: &ConvWeights,
    mask: &Mask,
    kernel: &InterpKernel,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let sparse = masked_conv2d(input, w, mask, stride, padding)?;
    interpolate_skipped(&sparse, mask, kernel)
}

/// Clipped neighborhood size `|Omega(p)|` at pixel `(y, x)`: in-bounds pixels
/// with Chebyshev distance <= radius, excluding the center.
#[inline]
pub(crate) fn clipped_neighborhood(y: usize, x: usize, h: usize, w: usize, radius: usize) -> u64 {
    let rows = (y.min(radius) + radius.min(h - 1 - y) + 1) as u64;
    let cols = (x.min(radius) + radius.min(w - 1 - x) + 1) as u64;
    rows * cols - 1
}

/// Exact interpolation cost of filling a mask's skipped pixels:
/// `channels * (2*|Omega(p)| + 1)` per skipped pixel.
pub fn interp_flops(mask: &Mask, radius: usize, channels: usize) -> u64 {
    let (h, w) = mask.dims();
    let mut total = 0u64;
    for y in 0..h {
        for x in 0..w {
            if !mask.computed(y, x) {
                total += channels as u64 * (2 * clipped_neighborhood(y, x, h, w, radius) + 1);
            }
        }
    }
    total
}

/// A dense convolution recorded with the dense cost formula; used where no
/// mask is active. Exists so call sites read symmetrically with `masked_layer`.
pub fn dense_layer(input: &Tensor, w: &ConvWeights, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d(input, w, stride, padding)
}
