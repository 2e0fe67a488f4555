//! `adpc` command line: run anytime inference on PPM images, sweep masking
//! ablations to CSV, verify the engine against its oracles, and generate the
//! bundled sample scene.
//!
//! Exit codes: 0 success, 1 verification/output failure, 2 bad flags or
//! malformed input/config, 3 missing or corrupt weights.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::Serialize;

use adpc_core::metrics::{run_sweep_parallel, sweep_csv, SweepParameter, SweepSpec};
use adpc_core::runtime::{infer, infer_unbounded, AnytimeResult, Budget};
use adpc_core::scenario::{build_scenario, scenario_dataset};
use adpc_core::{ModelConfig, WeightStore};

mod netpbm;
mod verify;

const EXIT_OK: i32 = 0;
const EXIT_FAIL: i32 = 1;
const EXIT_USAGE: i32 = 2;
const EXIT_WEIGHTS: i32 = 3;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    std::process::exit(dispatch(&args));
}

fn dispatch(args: &[String]) -> i32 {
    match args.first().map(String::as_str) {
        Some("run") => cmd_run(&args[1..]),
        Some("bench") => cmd_bench(&args[1..]),
        Some("verify") => cmd_verify(&args[1..]),
        Some("gen-sample") => cmd_gen_sample(&args[1..]),
        Some("--help") | Some("-h") | Some("help") => {
            usage();
            EXIT_OK
        }
        other => {
            if let Some(cmd) = other {
                eprintln!("error: unknown command {cmd:?}");
            }
            usage();
            EXIT_USAGE
        }
    }
}

fn usage() {
    eprintln!(
        "usage: adpc <command> [flags]

commands:
  run         --config PATH --weights PATH --input PATH --out DIR
              [--budget-exits N | --budget-gflops X] [--no-adaptivity]
              run anytime inference on a binary PPM image; writes per-exit
              class maps and skip masks (PGM), predictions.adpc, report.json
  bench       --config PATH --weights PATH --sweep NAME=V1,V2,... --out CSV
              [--dataset-size N] [--dataset-seed S]
              sweep threshold | top_k | entropy_threshold | random_fraction |
              radius over the synthetic dataset and write a CSV
  verify      [--seed U64]
              run the oracle suites; nonzero exit on any failure
  gen-sample  --out DIR [--seed U64]
              write the sample scene: config.json, weights.adpc, sample.ppm,
              label.pgm

ADPC_THREADS caps bench parallelism (0 or unset = auto)."
    );
}

struct Parsed {
    values: BTreeMap<String, String>,
    switches: BTreeSet<String>,
}

fn parse_flags(args: &[String], value_flags: &[&str], switch_flags: &[&str]) -> Result<Parsed, String> {
    let mut parsed = Parsed { values: BTreeMap::new(), switches: BTreeSet::new() };
    let mut it = args.iter();
    while let Some(arg) = it.next() {
        if switch_flags.contains(&arg.as_str()) {
            parsed.switches.insert(arg.clone());
        } else if value_flags.contains(&arg.as_str()) {
            let value = it.next().ok_or_else(|| format!("{arg} needs a value"))?;
            if parsed.values.insert(arg.clone(), value.clone()).is_some() {
                return Err(format!("{arg} given twice"));
            }
        } else {
            return Err(format!("unknown flag {arg:?}"));
        }
    }
    Ok(parsed)
}

fn required<'a>(parsed: &'a Parsed, flag: &str) -> Result<&'a str, String> {
    parsed.values.get(flag).map(String::as_str).ok_or_else(|| format!("{flag} is required"))
}

fn fail(code: i32, msg: impl std::fmt::Display) -> i32 {
    eprintln!("error: {msg}");
    code
}

fn load_config(path: &str) -> Result<ModelConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("reading config {path}: {e}"))?;
    ModelConfig::from_json(&text).map_err(|e| format!("config {path}: {e}"))
}

fn load_weights(path: &str) -> Result<WeightStore, String> {
    WeightStore::load(path).map_err(|e| format!("weights {path}: {e}"))
}

#[derive(Serialize)]
struct RunExit {
    exit: usize,
    prediction: String,
    mask: String,
    gflops: f64,
    skipped_fraction: f64,
}

#[derive(Serialize)]
struct RunReport {
    halted_at: String,
    exits: Vec<RunExit>,
}

/// Class index scaled onto 0..=255 for PGM output.
fn class_shade(class: u32, num_classes: usize) -> u8 {
    ((class as usize * 255) / (num_classes - 1).max(1)) as u8
}

fn write_run_outputs(
    out_dir: &Path,
    result: &AnytimeResult,
    num_classes: usize,
) -> Result<RunReport, String> {
    std::fs::create_dir_all(out_dir).map_err(|e| format!("creating {}: {e}", out_dir.display()))?;
    let gflops = result.gflops_per_exit();
    let fractions = result.skipped_fractions();
    let mut exits = Vec::new();
    for (i, pred) in result.predictions.iter().enumerate() {
        let (_, h, w) = pred.logits.shape();
        let classes = pred.class_map();
        let shades: Vec<u8> = classes.iter().map(|&c| class_shade(c, num_classes)).collect();
        let pred_name = format!("exit{}_prediction.pgm", pred.exit_index);
        netpbm::write_pgm(out_dir.join(&pred_name), w, h, &shades).map_err(|e| e.to_string())?;

        let mask = &result.exit_masks[i];
        let bits: Vec<u8> = mask.bits().iter().map(|&b| if b == 1 { 255 } else { 0 }).collect();
        let mask_name = format!("exit{}_mask.pgm", pred.exit_index);
        netpbm::write_pgm(out_dir.join(&mask_name), mask.width(), mask.height(), &bits)
            .map_err(|e| e.to_string())?;

        exits.push(RunExit {
            exit: pred.exit_index,
            prediction: pred_name,
            mask: mask_name,
            gflops: gflops[i],
            skipped_fraction: fractions[i],
        });
    }
    let store = result.predictions_store().map_err(|e| e.to_string())?;
    store.save(out_dir.join("predictions.adpc")).map_err(|e| e.to_string())?;

    let report = RunReport { halted_at: result.halted_at.to_string(), exits };
    // The report lands last, atomically: partial outputs never carry a report.
    let tmp = out_dir.join("report.json.tmp");
    let body = serde_json::to_string_pretty(&report).expect("report serializes");
    std::fs::write(&tmp, body).map_err(|e| e.to_string())?;
    std::fs::rename(&tmp, out_dir.join("report.json")).map_err(|e| e.to_string())?;
    Ok(report)
}

fn cmd_run(args: &[String]) -> i32 {
    let parsed = match parse_flags(
        args,
        &["--config", "--weights", "--input", "--out", "--budget-exits", "--budget-gflops"],
        &["--no-adaptivity"],
    ) {
        Ok(p) => p,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    let (config_path, weights_path, input_path, out_dir) = match (
        required(&parsed, "--config"),
        required(&parsed, "--weights"),
        required(&parsed, "--input"),
        required(&parsed, "--out"),
    ) {
        (Ok(c), Ok(w), Ok(i), Ok(o)) => (c, w, i, PathBuf::from(o)),
        (c, w, i, o) => {
            let err = [c.err(), w.err(), i.err(), o.err()].into_iter().flatten().next().unwrap();
            return fail(EXIT_USAGE, err);
        }
    };

    let mut cfg = match load_config(config_path) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    if parsed.switches.contains("--no-adaptivity") {
        cfg.adaptivity = false;
    }
    let weights = match load_weights(weights_path) {
        Ok(w) => w,
        Err(e) => return fail(EXIT_WEIGHTS, e),
    };
    let image = match netpbm::read_ppm(input_path) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_USAGE, format!("input {input_path}: {e}")),
    };

    let budget = match (parsed.values.get("--budget-exits"), parsed.values.get("--budget-gflops")) {
        (Some(_), Some(_)) => {
            return fail(EXIT_USAGE, "choose one of --budget-exits / --budget-gflops")
        }
        (Some(n), None) => match n.parse::<usize>() {
            Ok(n) if n > 0 => Some(Budget::ExitCount(n)),
            _ => return fail(EXIT_USAGE, "--budget-exits needs a positive integer"),
        },
        (None, Some(g)) => {
            match g
                .parse::<f64>()
                .map_err(|e| e.to_string())
                .and_then(|g| Budget::from_gflops(g).map_err(|e| e.to_string()))
            {
                Ok(b) => Some(b),
                Err(e) => return fail(EXIT_USAGE, format!("--budget-gflops: {e}")),
            }
        }
        (None, None) => None,
    };

    let result = match budget {
        Some(b) => infer(&cfg, &weights, &image, b),
        None => infer_unbounded(&cfg, &weights, &image),
    };
    let result = match result {
        Ok(r) => r,
        Err(e) => return fail(EXIT_USAGE, e),
    };

    let report = match write_run_outputs(&out_dir, &result, cfg.num_classes) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_FAIL, e),
    };
    for exit in &report.exits {
        println!(
            "exit {}: gflops={:.4} skipped={:.3} prediction={} mask={}",
            exit.exit, exit.gflops, exit.skipped_fraction, exit.prediction, exit.mask
        );
    }
    println!("halted_at: {}", report.halted_at);
    println!("report: {}", out_dir.join("report.json").display());
    EXIT_OK
}

fn parse_sweep(spec: &str) -> Result<(SweepParameter, Vec<f64>), String> {
    let (name, rest) = spec
        .split_once('=')
        .ok_or_else(|| format!("sweep spec {spec:?} must look like name=v1,v2"))?;
    let parameter = SweepParameter::parse(name.trim()).map_err(|e| e.to_string())?;
    let mut values = Vec::new();
    for part in rest.split(',') {
        let v: f64 = part.trim().parse().map_err(|_| format!("bad sweep value {part:?}"))?;
        if !v.is_finite() {
            return Err(format!("sweep value {part:?} is not finite"));
        }
        values.push(v);
    }
    if values.is_empty() {
        return Err("sweep needs at least one value".to_string());
    }
    values.sort_by(f64::total_cmp);
    let before = values.len();
    values.dedup();
    if values.len() != before {
        eprintln!("warning: {} duplicate sweep value(s) ignored", before - values.len());
    }
    Ok((parameter, values))
}

fn bench_threads() -> Result<usize, String> {
    match std::env::var("ADPC_THREADS") {
        Err(_) => Ok(0),
        Ok(s) => s.trim().parse::<usize>().map_err(|_| format!("bad ADPC_THREADS value {s:?}")),
    }
    .map(|n| if n == 0 { std::thread::available_parallelism().map_or(1, |p| p.get()) } else { n })
}

fn cmd_bench(args: &[String]) -> i32 {
    let parsed = match parse_flags(
        args,
        &["--config", "--weights", "--sweep", "--out", "--dataset-size", "--dataset-seed"],
        &[],
    ) {
        Ok(p) => p,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    let (config_path, weights_path, sweep_arg, out_path) = match (
        required(&parsed, "--config"),
        required(&parsed, "--weights"),
        required(&parsed, "--sweep"),
        required(&parsed, "--out"),
    ) {
        (Ok(c), Ok(w), Ok(s), Ok(o)) => (c, w, s, o.to_string()),
        (c, w, s, o) => {
            let err = [c.err(), w.err(), s.err(), o.err()].into_iter().flatten().next().unwrap();
            return fail(EXIT_USAGE, err);
        }
    };
    let cfg = match load_config(config_path) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    let weights = match load_weights(weights_path) {
        Ok(w) => w,
        Err(e) => return fail(EXIT_WEIGHTS, e),
    };
    let (parameter, values) = match parse_sweep(sweep_arg) {
        Ok(v) => v,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    let size = match parsed.values.get("--dataset-size").map(|s| s.parse::<usize>()) {
        None => 3,
        Some(Ok(n)) if n > 0 => n,
        Some(_) => return fail(EXIT_USAGE, "--dataset-size needs a positive integer"),
    };
    let seed = match parsed.values.get("--dataset-seed").map(|s| s.parse::<u64>()) {
        None => 7,
        Some(Ok(s)) => s,
        Some(Err(_)) => return fail(EXIT_USAGE, "--dataset-seed needs an unsigned integer"),
    };
    if cfg.input_channels != 3 || cfg.num_classes < 3 {
        return fail(
            EXIT_USAGE,
            "the synthetic sweep dataset needs 3 input channels and >= 3 classes",
        );
    }
    let threads = match bench_threads() {
        Ok(t) => t,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    let spec = SweepSpec { parameter, values, dataset: scenario_dataset(seed, size), seed };
    let rows = match run_sweep_parallel(&cfg, &weights, &spec, threads) {
        Ok(r) => r,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    let csv = sweep_csv(&rows, parameter);
    if let Err(e) = std::fs::write(&out_path, &csv) {
        return fail(EXIT_FAIL, format!("writing {out_path}: {e}"));
    }
    println!("wrote {} rows to {out_path}", rows.len());
    EXIT_OK
}

fn cmd_verify(args: &[String]) -> i32 {
    let parsed = match parse_flags(args, &["--seed"], &[]) {
        Ok(p) => p,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    let seed = match parsed.values.get("--seed").map(|s| s.parse::<u64>()) {
        None => 42,
        Some(Ok(s)) => s,
        Some(Err(_)) => return fail(EXIT_USAGE, "--seed needs an unsigned integer"),
    };
    if verify::run_all(seed) {
        println!("verification passed");
        EXIT_OK
    } else {
        println!("verification FAILED");
        EXIT_FAIL
    }
}

fn cmd_gen_sample(args: &[String]) -> i32 {
    let parsed = match parse_flags(args, &["--out", "--seed"], &[]) {
        Ok(p) => p,
        Err(e) => return fail(EXIT_USAGE, e),
    };
    let out_dir = match required(&parsed, "--out") {
        Ok(o) => PathBuf::from(o),
        Err(e) => return fail(EXIT_USAGE, e),
    };
    let seed = match parsed.values.get("--seed").map(|s| s.parse::<u64>()) {
        None => 0,
        Some(Ok(s)) => s,
        Some(Err(_)) => return fail(EXIT_USAGE, "--seed needs an unsigned integer"),
    };
    let scenario = match build_scenario(seed) {
        Ok(s) => s,
        Err(e) => return fail(EXIT_FAIL, e),
    };
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        return fail(EXIT_FAIL, format!("creating {}: {e}", out_dir.display()));
    }
    let label_shades: Vec<u8> = scenario
        .label
        .classes
        .iter()
        .map(|&c| class_shade(c, scenario.config.num_classes))
        .collect();
    type WriteStep<'a> = Box<dyn Fn(&Path) -> adpc_core::Result<()> + 'a>;
    let steps: [(&str, WriteStep); 4] = [
        ("config.json", Box::new(|p| Ok(std::fs::write(p, scenario.config.to_json())?))),
        ("weights.adpc", Box::new(|p| scenario.weights.save(p))),
        ("sample.ppm", Box::new(|p| netpbm::write_ppm(p, &scenario.image))),
        (
            "label.pgm",
            Box::new(|p| {
                netpbm::write_pgm(p, scenario.label.width, scenario.label.height, &label_shades)
            }),
        ),
    ];
    for (name, write) in steps {
        let path = out_dir.join(name);
        if let Err(e) = write(&path) {
            return fail(EXIT_FAIL, format!("writing {}: {e}", path.display()));
        }
        println!("wrote {}", path.display());
    }
    EXIT_OK
}
