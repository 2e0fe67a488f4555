//! Layer execution context: runs convolution / pooling / resize layers with
//! optional confidence gating, records every layer in the FLOPs ledger, and
//! observes the halt probe at each layer boundary.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::Result;
use crate::flops::{
    avg_pool_flops, batchnorm_flops, conv_flops, relu_flops, residual_add_flops, resize_flops,
    FlopsLedger, LayerRecord,
};
use crate::masked::{
    compute_mask, interp_flops, masked_layer, resample_confidence, ConfidenceCriterion,
    InterpKernel, Mask,
};
use crate::runtime::HaltProbe;
use crate::tensor::{avg_pool2, batchnorm_infer, bilinear_upsample2, conv2d, relu, Tensor};
use crate::weights::WeightStore;

/// Normalization epsilon used by every layer in the engine.
pub const BN_EPS: f32 = 1e-5;

/// Outcome of one layer: the produced tensor, or the name of the layer at
/// which the halt probe fired (the layer did not execute).
#[derive(Debug)]
pub enum Step<T> {
    Done(T),
    Halted(String),
}

struct GateSource {
    confidence: Tensor,
    criterion: ConfidenceCriterion,
}

/// Confidence gating state threaded between exits.
///
/// Each completed exit that skipped at least one pixel contributes a source:
/// its confidence map at prediction resolution plus its criterion. The
/// effective mask at any layer resolution is the intersection of all sources'
/// resampled masks, so a pixel once skipped never receives fresh convolution
/// work. Masks are cached per resolution; the cache is reset when a new
/// source arrives.
#[derive(Default)]
pub struct GateState {
    sources: Vec<GateSource>,
    cache: HashMap<(usize, usize), Rc<Mask>>,
}

impl GateState {
    pub fn new() -> Self {
        GateState::default()
    }

    pub fn is_active(&self) -> bool {
        !self.sources.is_empty()
    }

    /// Register a completed exit's confidence under its criterion and seed the
    /// cache with the effective mask at prediction resolution.
    pub fn push_source(
        &mut self,
        confidence: Tensor,
        criterion: ConfidenceCriterion,
        effective: Mask,
    ) {
        let dims = effective.dims();
        self.sources.push(GateSource { confidence, criterion });
        self.cache.clear();
        self.cache.insert(dims, Rc::new(effective));
    }

    /// Effective mask at a layer resolution, plus the resample FLOPs newly
    /// charged to materialize it (zero on cache hits and at source
    /// resolution).
    pub fn mask_for(&mut self, h: usize, w: usize) -> Result<(Option<Rc<Mask>>, u64)> {
        if self.sources.is_empty() {
            return Ok((None, 0));
        }
        if let Some(m) = self.cache.get(&(h, w)) {
            return Ok((Some(Rc::clone(m)), 0));
        }
        let mut charged = 0u64;
        let mut combined: Option<Mask> = None;
        for src in &self.sources {
            if (src.confidence.height(), src.confidence.width()) != (h, w) {
                charged += resize_flops(1, (h * w) as u64);
            }
            let m = if (src.confidence.height(), src.confidence.width()) == (h, w) {
                compute_mask(&src.confidence, &src.criterion)?
            } else {
                resample_confidence(&src.confidence, &src.criterion, h, w)?
            };
            combined = Some(match combined {
                Some(acc) => acc.and(&m)?,
                None => m,
            });
        }
        let mask = Rc::new(combined.expect("at least one source"));
        self.cache.insert((h, w), Rc::clone(&mask));
        Ok((Some(mask), charged))
    }
}

/// Specification of one convolution layer within the model walk.
pub struct ConvSpec<'t> {
    pub name: String,
    pub stride: usize,
    pub bn: bool,
    pub relu: bool,
    pub residual: Option<&'t Tensor>,
}

/// Everything a forward pass owns: shared weights, the halt probe, the
/// running ledger, gating state, and the interpolation kernel.
pub struct ExecCtx<'a> {
    weights: &'a WeightStore,
    halt: &'a HaltProbe,
    pub ledger: FlopsLedger,
    pub gate: GateState,
    kernel: InterpKernel,
}

impl<'a> ExecCtx<'a> {
    pub fn new(weights: &'a WeightStore, halt: &'a HaltProbe, kernel: InterpKernel) -> Self {
        ExecCtx { weights, halt, ledger: FlopsLedger::new(), gate: GateState::new(), kernel }
    }

    pub fn kernel(&self) -> &InterpKernel {
        &self.kernel
    }

    pub fn take_ledger(self) -> FlopsLedger {
        self.ledger
    }

    /// Halt decision for a layer that would add `upcoming` FLOPs.
    pub fn should_halt(&self, upcoming: u64) -> bool {
        self.halt.should_halt(self.ledger.grand_total(), upcoming)
    }

    /// Convolution (optionally gated) followed by optional normalization,
    /// residual add, and activation; all recorded as one layer.
    pub fn conv_layer(&mut self, input: &Tensor, spec: ConvSpec<'_>) -> Result<Step<Tensor>> {
        let w = self.weights.conv(&spec.name)?;
        let padding = w.kernel_h / 2;
        let oh = crate::tensor::conv_out_dim(input.height(), w.kernel_h, spec.stride, padding)
            .ok_or_else(|| crate::error::Error::config("conv kernel exceeds input"))?;
        let ow = crate::tensor::conv_out_dim(input.width(), w.kernel_w, spec.stride, padding)
            .ok_or_else(|| crate::error::Error::config("conv kernel exceeds input"))?;
        let px = (oh * ow) as u64;
        let cout = w.out_channels as u64;

        let (mask, resample_charge) = self.gate.mask_for(oh, ow)?;
        let active = mask.as_ref().map_or(px, |m| m.count_computed() as u64);
        let skipped = px - active;
        let mut aux = resample_charge;
        if spec.bn {
            aux += batchnorm_flops(cout, px);
        }
        if spec.residual.is_some() {
            aux += residual_add_flops(cout, px);
        }
        if spec.relu {
            aux += relu_flops(cout, px);
        }
        let record = LayerRecord {
            name: spec.name.clone(),
            active_pixels: active,
            skipped_pixels: skipped,
            conv_flops: conv_flops(w.kernel_h as u64, w.kernel_w as u64, w.in_channels as u64, cout, active),
            interp_flops: mask
                .as_ref()
                .map_or(0, |m| interp_flops(m, self.kernel.radius(), w.out_channels)),
            aux_flops: aux,
        };
        if self.should_halt(record.total()) {
            return Ok(Step::Halted(spec.name));
        }

        let mut out = match &mask {
            Some(m) => masked_layer(input, &w, m, &self.kernel, spec.stride, padding)?,
            None => conv2d(input, &w, spec.stride, padding)?,
        };
        if spec.bn {
            let bn = self.weights.bn(&format!("{}.bn", spec.name), BN_EPS)?;
            out = batchnorm_infer(&out, &bn.mean, &bn.var, &bn.gamma, &bn.beta, bn.eps)?;
        }
        if let Some(res) = spec.residual {
            out = out.add(res)?;
        }
        if spec.relu {
            out = relu(&out);
        }
        self.ledger.push(record);
        Ok(Step::Done(out))
    }

    /// 2x2 average pooling, recorded as its own layer.
    pub fn pool_layer(&mut self, name: &str, input: &Tensor) -> Result<Step<Tensor>> {
        let oh = input.height().div_ceil(2);
        let ow = input.width().div_ceil(2);
        let record = LayerRecord {
            name: name.to_string(),
            active_pixels: (oh * ow) as u64,
            skipped_pixels: 0,
            conv_flops: 0,
            interp_flops: 0,
            aux_flops: avg_pool_flops(input.channels() as u64, (oh * ow) as u64),
        };
        if self.should_halt(record.total()) {
            return Ok(Step::Halted(name.to_string()));
        }
        let out = avg_pool2(input);
        self.ledger.push(record);
        Ok(Step::Done(out))
    }

    /// Bilinear 2x upsampling cropped to the encoder-mirror resolution,
    /// recorded as its own layer. Cost is charged on the produced 2H x 2W
    /// tensor; the crop is free.
    pub fn upsample_layer(
        &mut self,
        name: &str,
        input: &Tensor,
        target_h: usize,
        target_w: usize,
    ) -> Result<Step<Tensor>> {
        let (ph, pw) = (input.height() * 2, input.width() * 2);
        let record = LayerRecord {
            name: name.to_string(),
            active_pixels: (target_h * target_w) as u64,
            skipped_pixels: 0,
            conv_flops: 0,
            interp_flops: 0,
            aux_flops: resize_flops(input.channels() as u64, (ph * pw) as u64),
        };
        if self.should_halt(record.total()) {
            return Ok(Step::Halted(name.to_string()));
        }
        let mut out = bilinear_upsample2(input);
        if (ph, pw) != (target_h, target_w) {
            out = out.crop(target_h, target_w)?;
        }
        self.ledger.push(record);
        Ok(Step::Done(out))
    }
}
