//! The anytime contract: budgets, interruption, progressive results, and
//! closed-form dense FLOPs.
//!
//! Budgets are realized by a `HaltProbe` observed at layer boundaries: a
//! layer whose cost would push the ledger past a FLOPs ceiling never starts,
//! and an externally raised stop flag takes effect before the next layer.
//! Completed exits are always returned; a budgeted run is a bitwise prefix of
//! the unbudgeted run.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use serde::Serialize;

use crate::backbone::{forward_all_exits, ModelConfig};
use crate::error::{Error, Result};
use crate::flops::{
    avg_pool_flops, batchnorm_flops, conv_flops, relu_flops, residual_add_flops, resize_flops,
    softmax_flops, FlopsLedger,
};
use crate::heads::ExitPrediction;
use crate::masked::Mask;
use crate::tensor::Tensor;
use crate::weights::{RawTensor, WeightStore};

/// Computation budget for one inference.
#[derive(Debug, Clone)]
pub enum Budget {
    /// Stop after this many exits have produced predictions.
    ExitCount(usize),
    /// Stop before the first layer that would push the ledger past this many
    /// FLOPs.
    FlopsLimit(u64),
    /// Stop when the shared flag is raised from another thread of control.
    ExternalInterrupt(Arc<AtomicBool>),
}

impl Budget {
    /// FLOPs budget given in GFLOPs.
    pub fn from_gflops(gflops: f64) -> Result<Budget> {
        if !gflops.is_finite() || gflops <= 0.0 {
            return Err(Error::config("GFLOPs budget must be positive"));
        }
        Ok(Budget::FlopsLimit((gflops * 1e9).round() as u64))
    }

    fn probe(&self) -> Result<HaltProbe> {
        match self {
            Budget::ExitCount(n) => {
                if *n == 0 {
                    return Err(Error::config("exit-count budget must be positive"));
                }
                Ok(HaltProbe::exit_count(*n))
            }
            Budget::FlopsLimit(f) => {
                if *f == 0 {
                    return Err(Error::config("FLOPs budget must be positive"));
                }
                Ok(HaltProbe::flops_ceiling(*f))
            }
            Budget::ExternalInterrupt(flag) => Ok(HaltProbe::external(Arc::clone(flag))),
        }
    }
}

/// Externally observable stop signal plus optional bounded budgets.
///
/// Once the flag is raised no further layer starts; exits already completed
/// remain available. The flag may be set from any thread while inference
/// runs.
#[derive(Debug, Clone, Default)]
pub struct HaltProbe {
    stop: Arc<AtomicBool>,
    flops_ceiling: Option<u64>,
    exit_limit: Option<usize>,
}

impl HaltProbe {
    pub fn unbounded() -> Self {
        HaltProbe::default()
    }

    pub fn exit_count(n: usize) -> Self {
        HaltProbe { exit_limit: Some(n), ..HaltProbe::default() }
    }

    pub fn flops_ceiling(f: u64) -> Self {
        HaltProbe { flops_ceiling: Some(f), ..HaltProbe::default() }
    }

    pub fn external(flag: Arc<AtomicBool>) -> Self {
        HaltProbe { stop: flag, ..HaltProbe::default() }
    }

    /// Raise the stop flag.
    pub fn interrupt(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn interrupted(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Shared handle for raising the flag from another thread.
    pub fn stop_flag(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.stop)
    }

    /// Halt before a layer that would add `upcoming` FLOPs to `spent`.
    pub fn should_halt(&self, spent: u64, upcoming: u64) -> bool {
        if self.interrupted() {
            return true;
        }
        match self.flops_ceiling {
            Some(limit) => spent + upcoming > limit,
            None => false,
        }
    }

    pub fn exit_limit_reached(&self, completed: usize) -> bool {
        self.exit_limit.is_some_and(|n| completed >= n)
    }
}

/// Where a run stopped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HaltPoint {
    Complete,
    /// Name of the first layer that did not execute.
    Layer(String),
}

impl std::fmt::Display for HaltPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            HaltPoint::Complete => write!(f, "complete"),
            HaltPoint::Layer(name) => write!(f, "{name}"),
        }
    }
}

/// Ordered per-exit predictions plus the ledger of executed layers.
#[derive(Debug)]
pub struct AnytimeResult {
    pub predictions: Vec<ExitPrediction>,
    /// Effective compute mask after each completed exit (all ones with
    /// adaptivity off).
    pub exit_masks: Vec<Mask>,
    pub ledger: FlopsLedger,
    pub halted_at: HaltPoint,
}

#[derive(Serialize)]
struct ExitSummary {
    exit: usize,
    gflops: f64,
    skipped_fraction: f64,
}

#[derive(Serialize)]
struct ResultSummary {
    halted_at: String,
    exits: Vec<ExitSummary>,
}

impl AnytimeResult {
    pub fn is_complete(&self) -> bool {
        self.halted_at == HaltPoint::Complete
    }

    /// Fraction of pixels skipped after each completed exit.
    pub fn skipped_fractions(&self) -> Vec<f64> {
        self.exit_masks.iter().map(|m| m.skipped_fraction()).collect()
    }

    /// Cumulative GFLOPs at each completed exit.
    pub fn gflops_per_exit(&self) -> Vec<f64> {
        self.ledger.exit_totals().iter().map(|&t| t as f64 / 1e9).collect()
    }

    /// JSON report: halt point plus per-exit GFLOPs and skipped fraction.
    pub fn summary_json(&self) -> String {
        let fractions = self.skipped_fractions();
        let gflops = self.gflops_per_exit();
        let summary = ResultSummary {
            halted_at: self.halted_at.to_string(),
            exits: self
                .predictions
                .iter()
                .enumerate()
                .map(|(i, p)| ExitSummary {
                    exit: p.exit_index,
                    gflops: gflops[i],
                    skipped_fraction: fractions[i],
                })
                .collect(),
        };
        serde_json::to_string_pretty(&summary).expect("summary serializes")
    }

    /// Raw per-exit logits packed as named tensors for the binary weight
    /// format.
    pub fn predictions_store(&self) -> Result<WeightStore> {
        let mut store = WeightStore::new();
        for pred in &self.predictions {
            let (c, h, w) = pred.logits.shape();
            store.insert_raw(
                format!("exit{}.logits", pred.exit_index),
                RawTensor::new(vec![c as u32, h as u32, w as u32], pred.logits.data().to_vec())?,
            )?;
        }
        Ok(store)
    }
}

/// Budgeted inference.
pub fn infer(
    cfg: &ModelConfig,
    weights: &WeightStore,
    image: &Tensor,
    budget: Budget,
) -> Result<AnytimeResult> {
    let probe = budget.probe()?;
    forward_all_exits(cfg, weights, image, &probe)
}

/// Unbudgeted inference: every exit runs.
pub fn infer_unbounded(
    cfg: &ModelConfig,
    weights: &WeightStore,
    image: &Tensor,
) -> Result<AnytimeResult> {
    forward_all_exits(cfg, weights, image, &HaltProbe::unbounded())
}

/// Closed-form FLOPs of the unmasked network, cumulative at each exit, for a
/// given input size. Walks the same structure as the forward pass with every
/// pixel active, under the ledger's counting convention.
pub fn dense_flops(cfg: &ModelConfig, input_h: usize, input_w: usize) -> Result<Vec<u64>> {
    cfg.validate()?;
    if input_h == 0 || input_w == 0 {
        return Err(Error::config("input dims must be >= 1"));
    }
    let needs_prob = cfg.needs_probabilities();
    let classes = cfg.num_classes as u64;
    let mut totals = Vec::with_capacity(cfg.total_exits());
    let mut total = 0u64;
    let mut cin = cfg.input_channels as u64;
    let mut dims = (input_h, input_w);
    for (si, stage) in cfg.stages.iter().enumerate() {
        let c = stage.channels as u64;
        if stage.downsample {
            dims = (dims.0.div_ceil(2), dims.1.div_ceil(2));
        }
        let px = (dims.0 * dims.1) as u64;
        // Entry conv + bn + relu.
        total += conv_flops(3, 3, cin, c, px) + batchnorm_flops(c, px) + relu_flops(c, px);
        // Residual blocks: two convs, two bns, two relus, one add each.
        for _ in 0..stage.num_blocks {
            total += 2 * conv_flops(3, 3, c, c, px)
                + 2 * batchnorm_flops(c, px)
                + 2 * relu_flops(c, px)
                + residual_add_flops(c, px);
        }
        // Head.
        let head = cfg.exit_head(si);
        let hc = head.head_channels as u64;
        total += conv_flops(1, 1, c, hc, px) + batchnorm_flops(hc, px) + relu_flops(hc, px);
        let mut hd = dims;
        let mut mirror = Vec::with_capacity(head.depth);
        for _ in 0..head.depth {
            mirror.push(hd);
            hd = (hd.0.div_ceil(2), hd.1.div_ceil(2));
            let hpx = (hd.0 * hd.1) as u64;
            total += avg_pool_flops(hc, hpx)
                + conv_flops(1, 1, hc, hc, hpx)
                + batchnorm_flops(hc, hpx)
                + relu_flops(hc, hpx);
        }
        for d in 1..=head.depth {
            let target = mirror[head.depth - d];
            let produced = (hd.0 * 2 * hd.1 * 2) as u64;
            let tpx = (target.0 * target.1) as u64;
            total += resize_flops(hc, produced)
                + conv_flops(1, 1, hc, hc, tpx)
                + batchnorm_flops(hc, tpx)
                + relu_flops(hc, tpx);
            hd = target;
        }
        total += conv_flops(1, 1, hc, classes, px);
        if needs_prob {
            total += softmax_flops(classes, px);
        }
        totals.push(total);
        cin = c;
    }
    Ok(totals)
}

/// Arithmetic mean of per-exit cumulative GFLOPs over several runs of the
/// same configuration.
pub fn average_ledger(results: &[AnytimeResult]) -> Result<Vec<f64>> {
    if results.is_empty() {
        return Err(Error::config("cannot average an empty result list"));
    }
    let exits = results[0].ledger.exit_totals().len();
    if results.iter().any(|r| r.ledger.exit_totals().len() != exits) {
        return Err(Error::config("results have differing exit counts"));
    }
    let mut means = vec![0.0f64; exits];
    for r in results {
        for (m, &t) in means.iter_mut().zip(r.ledger.exit_totals()) {
            *m += t as f64 / 1e9;
        }
    }
    for m in &mut means {
        *m /= results.len() as f64;
    }
    Ok(means)
}
