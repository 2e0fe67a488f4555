//! Evaluation: weighted multi-exit loss, mean intersection-over-union, and
//! parameter sweeps over masking criteria and interpolation radius.

use crate::backbone::ModelConfig;
use crate::error::{Error, Result};
use crate::masked::ConfidenceCriterion;
use crate::runtime::{infer_unbounded, AnytimeResult};
use crate::tensor::Tensor;
use crate::weights::WeightStore;

/// Which per-exit loss is applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossTask {
    /// Cross-entropy against a class-index map, averaged over non-ignored
    /// pixels.
    SegmentationCrossEntropy,
    /// Mean squared error over every heatmap element.
    HeatmapMse,
}

/// Multi-exit loss specification.
#[derive(Debug, Clone)]
pub struct LossSpec {
    pub task: LossTask,
    /// One non-negative weight per exit.
    pub weights: Vec<f32>,
    /// Class index excluded from the cross-entropy average.
    pub ignore_label: Option<u32>,
}

fn cross_entropy(pred: &Tensor, label: &Tensor, ignore: Option<u32>) -> Result<f64> {
    let (c, h, w) = pred.shape();
    if label.shape() != (1, h, w) {
        return Err(Error::config(format!(
            "label shape {:?} does not match prediction {}x{}",
            label.shape(),
            h,
            w
        )));
    }
    let mut sum = 0.0f64;
    let mut count = 0u64;
    for y in 0..h {
        for x in 0..w {
            let raw = label.at(0, y, x);
            let class = raw.round() as i64;
            if class < 0 {
                return Err(Error::config("negative class label"));
            }
            if ignore.is_some_and(|ig| class == ig as i64) {
                continue;
            }
            if class as usize >= c {
                return Err(Error::config(format!(
                    "label class {class} out of range for {c} classes"
                )));
            }
            // log-sum-exp with max subtraction.
            let mut max = f64::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(pred.at(ch, y, x) as f64);
            }
            let mut lse = 0.0f64;
            for ch in 0..c {
                lse += (pred.at(ch, y, x) as f64 - max).exp();
            }
            let lse = lse.ln() + max;
            sum += lse - pred.at(class as usize, y, x) as f64;
            count += 1;
        }
    }
    if count == 0 {
        return Ok(0.0);
    }
    Ok(sum / count as f64)
}

fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::config(format!(
            "heatmap shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let sum: f64 =
        pred.data().iter().zip(target.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum();
    Ok(sum / pred.data().len() as f64)
}

/// Weighted sum of per-exit losses: `sum_i w_i * L(pred_i, label)`.
pub fn multi_exit_loss(preds: &[Tensor], label: &Tensor, spec: &LossSpec) -> Result<f32> {
    if preds.len() != spec.weights.len() {
        return Err(Error::config(format!(
            "{} predictions for {} loss weights",
            preds.len(),
            spec.weights.len()
        )));
    }
    if spec.weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
        return Err(Error::config("loss weights must be finite and >= 0"));
    }
    let mut total = 0.0f64;
    for (pred, &w) in preds.iter().zip(&spec.weights) {
        let l = match spec.task {
            LossTask::SegmentationCrossEntropy => cross_entropy(pred, label, spec.ignore_label)?,
            LossTask::HeatmapMse => mse(pred, label)?,
        };
        total += w as f64 * l;
    }
    Ok(total as f32)
}

/// Per-pixel class-index map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<u32>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, classes: Vec<u32>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(Error::config("class map size mismatch"));
        }
        Ok(ClassMap { height, width, classes })
    }

    /// Argmax over logit channels, ties to the lowest class index.
    pub fn from_logits(logits: &Tensor) -> Self {
        let (c, h, w) = logits.shape();
        let mut classes = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_v = logits.at(0, y, x);
                for ch in 1..c {
                    let v = logits.at(ch, y, x);
                    if v > best_v {
                        best_v = v;
                        best = ch;
                    }
                }
                classes.push(best as u32);
            }
        }
        ClassMap { height: h, width: w, classes }
    }

    pub fn at(&self, y: usize, x: usize) -> u32 {
        self.classes[y * self.width + x]
    }
}

/// Mean IoU plus per-class IoU (NaN for classes absent from both maps).
#[derive(Debug, Clone)]
pub struct MiouResult {
    pub miou: f32,
    pub per_class: Vec<f32>,
}

/// Intersection-over-union averaged over the classes present in the union of
/// prediction and label; ignored pixels are excluded everywhere.
pub fn miou(
    pred: &ClassMap,
    label: &ClassMap,
    num_classes: usize,
    ignore_label: Option<u32>,
) -> Result<MiouResult> {
    if (pred.height, pred.width) != (label.height, label.width) {
        return Err(Error::config("prediction and label sizes differ"));
    }
    let mut inter = vec![0u64; num_classes];
    let mut union = vec![0u64; num_classes];
    for (p, l) in pred.classes.iter().zip(&label.classes) {
        if ignore_label.is_some_and(|ig| *l == ig) {
            continue;
        }
        let (p, l) = (*p as usize, *l as usize);
        if p >= num_classes || l >= num_classes {
            return Err(Error::config("class index out of range"));
        }
        if p == l {
            inter[p] += 1;
            union[p] += 1;
        } else {
            union[p] += 1;
            union[l] += 1;
        }
    }
    let mut per_class = vec![f32::NAN; num_classes];
    let mut sum = 0.0f64;
    let mut present = 0u32;
    for c in 0..num_classes {
        if union[c] > 0 {
            let iou = inter[c] as f64 / union[c] as f64;
            per_class[c] = iou as f32;
            sum += iou;
            present += 1;
        }
    }
    let miou = if present == 0 { 0.0 } else { (sum / present as f64) as f32 };
    Ok(MiouResult { miou, per_class })
}

/// Which knob a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParameter {
    Threshold,
    TopK,
    EntropyThreshold,
    RandomFraction,
    Radius,
}

impl SweepParameter {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "threshold" => SweepParameter::Threshold,
            "top_k" => SweepParameter::TopK,
            "entropy_threshold" => SweepParameter::EntropyThreshold,
            "random_fraction" => SweepParameter::RandomFraction,
            "radius" => SweepParameter::Radius,
            other => return Err(Error::config(format!("unknown sweep parameter {other:?}"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            SweepParameter::Threshold => "threshold",
            SweepParameter::TopK => "top_k",
            SweepParameter::EntropyThreshold => "entropy_threshold",
            SweepParameter::RandomFraction => "random_fraction",
            SweepParameter::Radius => "radius",
        }
    }
}

/// A sweep: one parameter, its values (sorted, unique), and the evaluation
/// dataset. `seed` drives the random criterion when it is swept.
pub struct SweepSpec {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
    pub dataset: Vec<(Tensor, ClassMap)>,
    pub seed: u64,
}

impl SweepSpec {
    fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::config("sweep needs at least one value"));
        }
        if self.values.windows(2).any(|p| p[0] >= p[1]) {
            return Err(Error::config("sweep values must be strictly increasing"));
        }
        if self.dataset.is_empty() {
            return Err(Error::config("sweep needs at least one image"));
        }
        Ok(())
    }
}

/// One CSV row of a sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub param: f64,
    pub exit: usize,
    pub accuracy: f64,
    pub gflops: f64,
    pub skipped_fraction: f64,
}

fn apply_parameter(cfg: &ModelConfig, parameter: SweepParameter, value: f64, seed: u64) -> Result<ModelConfig> {
    let mut out = cfg.clone();
    out.adaptivity = true;
    match parameter {
        SweepParameter::Threshold => {
            out.criterion = ConfidenceCriterion::MaxProbThreshold { threshold: value as f32 };
        }
        SweepParameter::TopK => {
            out.criterion = ConfidenceCriterion::TopKFraction { fraction: value as f32 };
        }
        SweepParameter::EntropyThreshold => {
            out.criterion = ConfidenceCriterion::EntropyThreshold { threshold: value as f32 };
        }
        SweepParameter::RandomFraction => {
            out.criterion = ConfidenceCriterion::RandomFraction { fraction: value as f32, seed };
        }
        SweepParameter::Radius => {
            if value < 1.0 || value.fract() != 0.0 {
                return Err(Error::config(format!("radius sweep value {value} must be a positive integer")));
            }
            out.interp.radius = value as usize;
        }
    }
    out.validate()?;
    Ok(out)
}

fn sweep_point(
    cfg: &ModelConfig,
    weights: &WeightStore,
    spec: &SweepSpec,
    value: f64,
) -> Result<Vec<SweepRow>> {
    let point_cfg = apply_parameter(cfg, spec.parameter, value, spec.seed)?;
    let exits = point_cfg.total_exits();
    let mut acc = vec![0.0f64; exits];
    let mut gflops = vec![0.0f64; exits];
    let mut skipped = vec![0.0f64; exits];
    for (image, label) in &spec.dataset {
        let result: AnytimeResult = infer_unbounded(&point_cfg, weights, image)?;
        if result.predictions.len() != exits {
            return Err(Error::config("sweep inference halted early"));
        }
        let fractions = result.skipped_fractions();
        let totals = result.gflops_per_exit();
        for (i, pred) in result.predictions.iter().enumerate() {
            let classes = ClassMap::from_logits(&pred.logits);
            let m = miou(&classes, label, point_cfg.num_classes, None)?;
            acc[i] += m.miou as f64;
            gflops[i] += totals[i];
            skipped[i] += fractions[i];
        }
    }
    let n = spec.dataset.len() as f64;
    Ok((0..exits)
        .map(|i| SweepRow {
            param: value,
            exit: i + 1,
            accuracy: acc[i] / n,
            gflops: gflops[i] / n,
            skipped_fraction: skipped[i] / n,
        })
        .collect())
}

/// Run a sweep sequentially: one full inference per (value, image), averaged
/// per exit, rows ordered value-major then exit-minor.
pub fn run_sweep(
    cfg: &ModelConfig,
    weights: &WeightStore,
    spec: &SweepSpec,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let mut rows = Vec::with_capacity(spec.values.len() * cfg.total_exits());
    for &value in &spec.values {
        rows.extend(sweep_point(cfg, weights, spec, value)?);
    }
    Ok(rows)
}

/// Like [`run_sweep`] but evaluating sweep points on up to `threads` OS
/// threads. Row order and bytes are identical to the sequential run.
pub fn run_sweep_parallel(
    cfg: &ModelConfig,
    weights: &WeightStore,
    spec: &SweepSpec,
    threads: usize,
) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    let threads = threads.max(1).min(spec.values.len());
    if threads == 1 {
        return run_sweep(cfg, weights, spec);
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Result<Vec<SweepRow>>> = Vec::with_capacity(spec.values.len());
    for _ in 0..spec.values.len() {
        slots.push(Ok(Vec::new()));
    }
    let slot_refs: Vec<std::sync::Mutex<&mut Result<Vec<SweepRow>>>> =
        slots.iter_mut().map(std::sync::Mutex::new).collect();
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= spec.values.len() {
                    break;
                }
                let out = sweep_point(cfg, weights, spec, spec.values[i]);
                **slot_refs[i].lock().unwrap() = out;
            });
        }
    });
    drop(slot_refs);
    let mut rows = Vec::with_capacity(spec.values.len() * cfg.total_exits());
    for slot in slots {
        rows.extend(slot?);
    }
    Ok(rows)
}

/// Format with six significant digits, fixed-point.
pub fn fmt_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0.00000".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let exp = x.abs().log10().floor() as i32;
    let decimals = (5 - exp).clamp(0, 17) as usize;
    format!("{x:.decimals$}")
}

/// Serialize sweep rows as CSV. Radius values print as integers, the exit
/// column is an integer, everything else uses six significant digits.
pub fn sweep_csv(rows: &[SweepRow], parameter: SweepParameter) -> String {
    let mut out = String::from("param,exit,accuracy,gflops,skipped_fraction\n");
    for row in rows {
        let param = match parameter {
            SweepParameter::Radius => format!("{}", row.param as i64),
            _ => fmt_sig6(row.param),
        };
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            param,
            row.exit,
            fmt_sig6(row.accuracy),
            fmt_sig6(row.gflops),
            fmt_sig6(row.skipped_fraction)
        ));
    }
    out
}
