//! Command-line operator surface: dataset generation, training, evaluation,
//! correctness checks, inter-slice kernel ablations, and fast-vs-naive
//! benchmarking.
//!
//! Exit codes: 0 success, 2 usage/config error, 3 data or file-format error,
//! 4 numeric failure (including failed correctness checks).

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use lambdaunet_core::autodiff::{backward, finite_diff_check, Tape};
use lambdaunet_core::lambda::{
    forward_fast, forward_fast_vars, forward_naive, LambdaPlusConfig, LambdaPlusWeights,
    LambdaVars, Variant,
};
use lambdaunet_core::metrics::{score_case, score_split, MetricsReport};
use lambdaunet_core::rng;
use lambdaunet_core::synth::{self, GenParams, Split};
use lambdaunet_core::tensor::DenseTensor;
use lambdaunet_core::train::{fit, TrainConfig};
use lambdaunet_core::unet::{forward_unet, load_model, save_model, UNetConfig, UNetModel};
use lambdaunet_core::{Error, Result};

use rand::Rng;

#[derive(Parser)]
#[command(name = "lambdaunet", version, about = "2.5D lesion segmentation toolkit")]
struct Cli {
    /// TOML config file; command-line flags take precedence
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Gen(GenArgs),
    /// Train a model on a generated dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Run built-in correctness suites
    Check(CheckArgs),
    /// Sweep the inter-slice kernel size
    Ablate(AblateArgs),
    /// Benchmark the fast path against the per-pixel reference
    Bench(BenchArgs),
}

#[derive(Args, Serialize, serde::Deserialize, Clone)]
struct GenArgs {
    /// output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// number of cases
    #[arg(long)]
    cases: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// volume geometry as t,h,w
    #[arg(long)]
    geometry: Option<String>,
    /// lesion count range lo,hi
    #[arg(long)]
    lesions: Option<String>,
    /// lesion radius range lo,hi in pixels
    #[arg(long)]
    radius: Option<String>,
    /// lesion slice-extent range lo,hi
    #[arg(long)]
    extent: Option<String>,
    /// single-slice distractor count range lo,hi
    #[arg(long)]
    distractors: Option<String>,
    /// per-slice center jitter in pixels
    #[arg(long)]
    jitter: Option<f64>,
    /// additive noise sigma
    #[arg(long)]
    noise: Option<f64>,
    /// train,val,test ratios
    #[arg(long)]
    ratios: Option<String>,
}

#[derive(Args, Serialize, serde::Deserialize, Clone)]
struct TrainArgs {
    /// dataset directory (from `gen`)
    #[arg(long)]
    data: Option<PathBuf>,
    /// checkpoint output path
    #[arg(long)]
    out: Option<PathBuf>,
    /// lambda layer variant: 2d, 3d, or 2.5d
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_segments: Option<usize>,
    #[arg(long)]
    segment_slices: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    pos_weight: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    u: Option<usize>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    tk: Option<usize>,
    #[arg(long)]
    threshold: Option<f64>,
    /// stop once validation DSC reaches this value
    #[arg(long)]
    stop_at_val_dsc: Option<f64>,
    /// per-epoch log file (default: <out>.log)
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Serialize, serde::Deserialize, Clone)]
struct EvalArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// train, val, or test
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    threshold: Option<f64>,
    /// JSON report output path
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Serialize, serde::Deserialize, Clone)]
struct CheckArgs {
    /// oracle, grad, or locality
    #[arg(long)]
    suite: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// randomized trials for the oracle suite
    #[arg(long)]
    trials: Option<usize>,
    /// negative-control hook: corrupt the local position table before checking
    #[arg(long, hide = true, default_value_t = false)]
    corrupt_e: bool,
}

#[derive(Args, Serialize, serde::Deserialize, Clone)]
struct AblateArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// comma-separated inter-slice kernel sizes, e.g. 3,5,7
    #[arg(long)]
    tk: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_segments: Option<usize>,
    #[arg(long)]
    segment_slices: Option<usize>,
    #[arg(long)]
    steps_per_epoch: Option<usize>,
    #[arg(long)]
    pos_weight: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    levels: Option<usize>,
    #[arg(long)]
    base_channels: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
}

#[derive(Args, Serialize, serde::Deserialize, Clone)]
struct BenchArgs {
    /// comma-separated shapes b x t x h x w x c, e.g. 1x8x64x64x16
    #[arg(long)]
    shapes: Option<String>,
    /// timed repetitions per path
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    v: Option<usize>,
    #[arg(long)]
    u: Option<usize>,
    #[arg(long)]
    variant: Option<String>,
    /// JSON copy of the timing table
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let file_cfg = match load_file_config(cli.config.as_deref()) {
        Ok(v) => v,
        Err(e) => return fail(&e),
    };
    let result = match cli.command {
        Command::Gen(a) => cmd_gen(merged(a, &file_cfg, "gen")),
        Command::Train(a) => cmd_train(merged(a, &file_cfg, "train")),
        Command::Eval(a) => cmd_eval(merged(a, &file_cfg, "eval")),
        Command::Check(a) => cmd_check(merged(a, &file_cfg, "check")),
        Command::Ablate(a) => cmd_ablate(merged(a, &file_cfg, "ablate")),
        Command::Bench(a) => cmd_bench(merged(a, &file_cfg, "bench")),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    let code = match e {
        Error::Usage(_) | Error::Config(_) => 2,
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::Numeric(_) | Error::Dimension(_) => 4,
    };
    ExitCode::from(code)
}

// ---------------------------------------------------------------------------
// config-file merging: TOML sections named after subcommands hold defaults;
// explicit flags win because merged() only fills fields that are None.
// ---------------------------------------------------------------------------

fn load_file_config(path: Option<&Path>) -> Result<toml::Table> {
    match path {
        None => Ok(toml::Table::new()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::io(p.display().to_string(), e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::config(format!("bad config file: {e}")))
        }
    }
}

fn merged<A: Serialize + serde::de::DeserializeOwned>(
    args: A,
    file_cfg: &toml::Table,
    section: &str,
) -> A {
    let Some(toml::Value::Table(tbl)) = file_cfg.get(section) else {
        return args;
    };
    let mut v = serde_json::to_value(&args).expect("args serialize");
    if let serde_json::Value::Object(map) = &mut v {
        for (key, val) in tbl {
            let entry = map.entry(key.clone()).or_insert(serde_json::Value::Null);
            if entry.is_null() {
                *entry = serde_json::to_value(val.clone()).expect("toml value");
            }
        }
    }
    serde_json::from_value(v).expect("args deserialize")
}

// ---------------------------------------------------------------------------
// run manifests
// ---------------------------------------------------------------------------

fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn write_manifest(
    dir: &Path,
    command: &str,
    config: serde_json::Value,
    seed: u64,
    artifacts: &[String],
    started: u64,
) -> Result<()> {
    let manifest = json!({
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": artifacts,
        "started_unix": started,
        "finished_unix": unix_now(),
        "version": env!("CARGO_PKG_VERSION"),
    });
    let path = dir.join(format!("run_{command}.json"));
    std::fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// flag parsing helpers
// ---------------------------------------------------------------------------

fn parse_pair_usize(s: &str, what: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::usage(format!("{what} must be lo,hi, got '{s}'")));
    }
    let lo = parts[0].trim().parse().map_err(|_| Error::usage(format!("bad {what} '{s}'")))?;
    let hi = parts[1].trim().parse().map_err(|_| Error::usage(format!("bad {what} '{s}'")))?;
    Ok((lo, hi))
}

fn parse_pair_f64(s: &str, what: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::usage(format!("{what} must be lo,hi, got '{s}'")));
    }
    let lo = parts[0].trim().parse().map_err(|_| Error::usage(format!("bad {what} '{s}'")))?;
    let hi = parts[1].trim().parse().map_err(|_| Error::usage(format!("bad {what} '{s}'")))?;
    Ok((lo, hi))
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

fn cmd_gen(a: GenArgs) -> Result<()> {
    let started = unix_now();
    let out = a.out.clone().ok_or_else(|| Error::usage("--out is required"))?;
    let cases = a.cases.ok_or_else(|| Error::usage("--cases is required"))?;
    if cases == 0 {
        return Err(Error::usage("--cases must be >= 1"));
    }
    let seed = a.seed.unwrap_or(0);
    let mut params = GenParams::default();
    if let Some(g) = &a.geometry {
        let parts: Vec<&str> = g.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::usage(format!("--geometry must be t,h,w, got '{g}'")));
        }
        params.t = parts[0].trim().parse().map_err(|_| Error::usage("bad geometry"))?;
        params.h = parts[1].trim().parse().map_err(|_| Error::usage("bad geometry"))?;
        params.w = parts[2].trim().parse().map_err(|_| Error::usage("bad geometry"))?;
    }
    if let Some(s) = &a.lesions {
        params.lesion_count = parse_pair_usize(s, "--lesions")?;
    }
    if let Some(s) = &a.radius {
        params.radius = parse_pair_f64(s, "--radius")?;
    }
    if let Some(s) = &a.extent {
        params.slice_extent = parse_pair_usize(s, "--extent")?;
    }
    if let Some(s) = &a.distractors {
        params.distractor_count = parse_pair_usize(s, "--distractors")?;
    }
    if let Some(j) = a.jitter {
        params.jitter = j;
    }
    if let Some(n) = a.noise {
        params.noise = n;
    }
    let ratios = match &a.ratios {
        None => (0.6, 0.2, 0.2),
        Some(s) => {
            let parts: Vec<&str> = s.split(',').collect();
            if parts.len() != 3 {
                return Err(Error::usage(format!("--ratios must be a,b,c, got '{s}'")));
            }
            let p = |i: usize| -> Result<f64> {
                parts[i].trim().parse().map_err(|_| Error::usage("bad ratios"))
            };
            (p(0)?, p(1)?, p(2)?)
        }
    };
    let manifest = synth::generate_dataset(&out, cases, &params, ratios, seed)?;
    let artifacts: Vec<String> = manifest.cases.iter().map(|c| c.file.clone()).collect();
    println!(
        "generated {} cases ({}x{}x{}) into {}",
        cases,
        params.t,
        params.h,
        params.w,
        out.display()
    );
    write_manifest(&out, "gen", serde_json::to_value(&a).unwrap(), seed, &artifacts, started)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

fn unet_config_from(
    variant: Option<&str>,
    levels: Option<usize>,
    base_channels: Option<usize>,
    k: Option<usize>,
    u: Option<usize>,
    r: Option<usize>,
    tk: Option<usize>,
    threshold: Option<f64>,
) -> Result<UNetConfig> {
    let mut cfg = UNetConfig::default();
    if let Some(v) = variant {
        cfg.variant = Variant::parse(v)?;
    }
    if let Some(x) = levels {
        cfg.levels = x;
    }
    if let Some(x) = base_channels {
        cfg.base_channels = x;
    }
    if let Some(x) = k {
        cfg.k = x;
    }
    if let Some(x) = u {
        cfg.u = x;
    }
    if let Some(x) = r {
        cfg.r = x;
    }
    if let Some(x) = tk {
        cfg.t_k = x;
    }
    if let Some(x) = threshold {
        cfg.threshold = x;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_config_from(a: &TrainArgs) -> TrainConfig {
    let d = TrainConfig::default();
    TrainConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        warmup_epochs: a.warmup.unwrap_or(d.warmup_epochs),
        lr: a.lr.unwrap_or(d.lr),
        batch_segments: a.batch_segments.unwrap_or(d.batch_segments),
        segment_slices: a.segment_slices.unwrap_or(d.segment_slices),
        steps_per_epoch: a.steps_per_epoch.unwrap_or(d.steps_per_epoch),
        pos_weight: a.pos_weight.unwrap_or(d.pos_weight),
        seed: a.seed.unwrap_or(d.seed),
        stop_at_val_dsc: a.stop_at_val_dsc,
        ..d
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let started = unix_now();
    let data = a.data.clone().ok_or_else(|| Error::usage("--data is required"))?;
    let out = a.out.clone().ok_or_else(|| Error::usage("--out is required"))?;
    let unet_cfg = unet_config_from(
        a.variant.as_deref(),
        a.levels,
        a.base_channels,
        a.k,
        a.u,
        a.r,
        a.tk,
        a.threshold,
    )?;
    let train_cfg = train_config_from(&a);
    train_cfg.validate()?;
    if train_cfg.epochs == 0 {
        eprintln!("warning: --epochs 0 saves the initial (untrained) checkpoint");
    }
    let ds = synth::load_manifest(&data)?;
    let train_cases = synth::load_split(&data, &ds, Split::Train)?;
    let val_cases = synth::load_split(&data, &ds, Split::Val)?;
    let model = UNetModel::build(unet_cfg, train_cfg.seed)?;
    let result = fit(model, &train_cases, &val_cases, &train_cfg)?;
    save_model(&result.model, &out)?;
    let log_path = a
        .log
        .clone()
        .unwrap_or_else(|| out.with_extension("log"));
    let mut log = String::new();
    for s in &result.history {
        log.push_str(&format!(
            "epoch {:3}  lr {:.3e}  loss {:.6}  val_dsc {:.4}\n",
            s.epoch, s.lr, s.mean_loss, s.val_dsc
        ));
    }
    log.push_str(&format!(
        "best epoch {}  best val_dsc {:.4}\n",
        result.best_epoch, result.best_val_dsc
    ));
    std::fs::write(&log_path, log).map_err(|e| Error::io(log_path.display().to_string(), e))?;
    println!(
        "saved checkpoint {} (best epoch {}, val DSC {:.4})",
        out.display(),
        result.best_epoch,
        result.best_val_dsc
    );
    let dir = out.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    write_manifest(
        &dir,
        "train",
        serde_json::to_value(&a).unwrap(),
        train_cfg.seed,
        &[out.display().to_string(), log_path.display().to_string()],
        started,
    )
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

fn eval_report(model: &UNetModel, cases: &[synth::VolumeCase]) -> Result<MetricsReport> {
    let mut scored = Vec::with_capacity(cases.len());
    for case in cases {
        let pred = model.predict_mask(&case.input)?;
        scored.push((case.id.clone(), score_case(&pred, &case.truth)?));
    }
    score_split(scored)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let started = unix_now();
    let model_path = a.model.clone().ok_or_else(|| Error::usage("--model is required"))?;
    let data = a.data.clone().ok_or_else(|| Error::usage("--data is required"))?;
    let split = Split::parse(a.split.as_deref().unwrap_or("test"))?;
    let mut model = load_model(&model_path)?;
    if let Some(t) = a.threshold {
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::usage(format!("--threshold {t} must be in (0,1)")));
        }
        model.config.threshold = t;
    }
    let ds = synth::load_manifest(&data)?;
    let cases = synth::load_split(&data, &ds, split)?;
    if cases.is_empty() {
        return Err(Error::usage("selected split is empty"));
    }
    let report = eval_report(&model, &cases)?;
    println!("{}", report.render_table());
    let report_path = a.report.clone().unwrap_or_else(|| PathBuf::from("metrics.json"));
    std::fs::write(&report_path, serde_json::to_string_pretty(&report).unwrap())
        .map_err(|e| Error::io(report_path.display().to_string(), e))?;
    let dir = report_path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    write_manifest(
        &dir,
        "eval",
        serde_json::to_value(&a).unwrap(),
        0,
        &[report_path.display().to_string()],
        started,
    )
}

// ---------------------------------------------------------------------------
// check
// ---------------------------------------------------------------------------

fn random_lambda_config(r: &mut impl Rng) -> (LambdaPlusConfig, [usize; 4]) {
    let variants = [Variant::TwoD, Variant::ThreeD, Variant::TwoPointFiveD];
    let ts = [1usize, 2, 4, 8];
    let hw = [1usize, 3, 5, 8, 16];
    let rs = [1usize, 3];
    let tks = [1usize, 3, 5];
    let cfg = LambdaPlusConfig {
        c: r.gen_range(1..=4),
        k: r.gen_range(1..=4),
        v: r.gen_range(1..=4),
        u: r.gen_range(1..=2),
        r: rs[r.gen_range(0..rs.len())],
        t_k: tks[r.gen_range(0..tks.len())],
        variant: variants[r.gen_range(0..variants.len())],
    };
    let shape = [
        r.gen_range(1..=2),
        ts[r.gen_range(0..ts.len())],
        hw[r.gen_range(0..hw.len())],
        hw[r.gen_range(0..hw.len())],
    ];
    (cfg, shape)
}

fn check_oracle(trials: usize, seed: u64, corrupt_e: bool) -> Result<f64> {
    let mut r = rng::rng(seed, "check-oracle");
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let (cfg, [b, t, h, w]) = random_lambda_config(&mut r);
        let mut weights = LambdaPlusWeights::init(&cfg, rng::derive_idx(seed, "w", trial as u64))?;
        let x = DenseTensor::from_fn(&[b, t, h, w, cfg.c], |_| r.gen_range(-1.0..1.0));
        let naive = forward_naive(&x, &weights, &cfg)?;
        if corrupt_e {
            weights.e.data_mut()[0] += 0.125;
        }
        let fast = forward_fast(&x, &weights, &cfg)?;
        worst = worst.max(naive.max_abs_diff(&fast));
    }
    Ok(worst)
}

fn check_grad(seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    // one full lambda layer, per variant
    for (vi, variant) in [Variant::TwoD, Variant::ThreeD, Variant::TwoPointFiveD]
        .into_iter()
        .enumerate()
    {
        let cfg = LambdaPlusConfig {
            c: 3,
            k: 2,
            v: 2,
            u: 1,
            r: 3,
            t_k: 3,
            variant,
        };
        let weights = LambdaPlusWeights::init(&cfg, rng::derive_idx(seed, "gw", vi as u64))?;
        let mut r = rng::rng(rng::derive_idx(seed, "gx", vi as u64), "x");
        let x = DenseTensor::from_fn(&[1, 4, 5, 5, 3], |_| r.gen_range(-1.0..1.0));
        let mut leaves = vec![weights.w_q.clone(), weights.w_k.clone(), weights.w_v.clone(), weights.e.clone()];
        if let Some(f) = &weights.f {
            leaves.push(f.clone());
        }
        let run = |ls: &[DenseTensor]| -> Result<(f64, Vec<DenseTensor>)> {
            let tape = Tape::new();
            let lv = LambdaVars {
                w_q: tape.leaf(ls[0].clone(), true),
                w_k: tape.leaf(ls[1].clone(), true),
                w_v: tape.leaf(ls[2].clone(), true),
                e: tape.leaf(ls[3].clone(), true),
                f: ls.get(4).map(|f| tape.leaf(f.clone(), true)),
            };
            let y = forward_fast_vars(tape.constant(x.clone()), &lv, &cfg)?;
            let loss = y.mul(y)?.sum_all();
            let grads = backward(loss)?;
            let mut vars = vec![lv.w_q, lv.w_k, lv.w_v, lv.e];
            if let Some(f) = lv.f {
                vars.push(f);
            }
            Ok((
                loss.value().item()?,
                vars.iter().map(|v| grads.get(*v).unwrap().clone()).collect(),
            ))
        };
        let (_, analytic) = run(&leaves)?;
        let mut f = |ls: &[DenseTensor]| run(ls).map(|(v, _)| v);
        let err = finite_diff_check(&mut f, &leaves, &analytic, 1e-5, 20, seed)?;
        worst = worst.max(err);
        println!("grad lambda {:6} max rel err {err:.3e}", variant.name());
    }
    // a small full network
    let ucfg = UNetConfig {
        levels: 2,
        base_channels: 2,
        k: 2,
        ..UNetConfig::default()
    };
    let model = UNetModel::build(ucfg, seed)?;
    let mut r = rng::rng(seed, "unet-x");
    let x = DenseTensor::from_fn(&[1, 2, 4, 4, 2], |_| r.gen_range(0.0..1.0));
    let labels = DenseTensor::from_fn(&[1, 2, 4, 4], |_| {
        if r.gen_range(0.0..1.0f64) > 0.5 {
            1.0
        } else {
            0.0
        }
    });
    let tape = Tape::new();
    let vars = model.vars(&tape, true);
    let logits = forward_unet(tape.constant(x.clone()), &vars)?;
    let loss = logits.bce_with_logits(&labels)?;
    let grads = backward(loss)?;
    let leaves: Vec<DenseTensor> = model.params().iter().map(|(_, t)| t.clone()).collect();
    let analytic: Vec<DenseTensor> = vars
        .entries()
        .iter()
        .map(|(_, v)| grads.get(*v).unwrap().clone())
        .collect();
    let mut f = |work: &[DenseTensor]| -> Result<f64> {
        let mut m = model.clone();
        for (slot, t) in m.params_mut().iter_mut().zip(work) {
            slot.1 = t.clone();
        }
        let z = m.forward(&x)?;
        let mut acc = 0.0;
        for (zi, yi) in z.data().iter().zip(labels.data()) {
            acc += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
        }
        Ok(acc / z.numel() as f64)
    };
    let err = finite_diff_check(&mut f, &leaves, &analytic, 1e-5, 20, seed)?;
    println!("grad network       max rel err {err:.3e}");
    Ok(worst.max(err))
}

fn check_locality(seed: u64) -> Result<()> {
    use lambdaunet_core::lambda::{global_lambda, normalize_keys, project_qkv};
    let cfg = LambdaPlusConfig {
        c: 3,
        k: 2,
        v: 2,
        u: 1,
        r: 3,
        t_k: 3,
        variant: Variant::TwoPointFiveD,
    };
    let weights = LambdaPlusWeights::init(&cfg, seed)?;
    let mut r = rng::rng(seed, "loc-x");
    let x = DenseTensor::from_fn(&[1, 4, 6, 6, 3], |_| r.gen_range(-1.0..1.0));

    // (a) the global lambda is constant across pixels of one slice by
    // construction: it depends only on slice-level sums
    let (_, keys, vals) = project_qkv(&x, &weights, &cfg)?;
    let kbar = normalize_keys(&keys)?;
    let lam_g = global_lambda(&kbar, &vals)?;
    if lam_g.shape() != [1, 4, cfg.k, cfg.v] {
        return Err(Error::numeric("global lambda is not one matrix per slice"));
    }
    println!("locality a: global lambda is per-slice constant       ok");

    // (b) perturbations at (t+-1, h', w') with (h',w') != (h,w), and at
    // |dt| >= 2, leave the output at (t,h,w) bit-identical
    let base = forward_fast(&x, &weights, &cfg)?;
    let probe = [0usize, 2, 3, 3]; // (b,t,h,w), interior
    let checks: &[(usize, usize, usize, bool)] = &[
        (1, 1, 1, true),  // t-1, different h,w: inter-slice lambda ignores it
        (3, 5, 5, true),  // t+1, different h,w
        (0, 3, 3, true),  // |dt| = 2, same h,w: outside the T_k=3 window
        (2, 3, 4, false), // same slice: inside the global context
    ];
    for &(t, h, w, expect_same) in checks {
        let mut xp = x.clone();
        let old = xp.at(&[0, t, h, w, 1]);
        xp.set(&[0, t, h, w, 1], old + 0.5);
        let out = forward_fast(&xp, &weights, &cfg)?;
        let mut same = true;
        for vi in 0..cfg.v {
            let a = base.at(&[probe[0], probe[1], probe[2], probe[3], vi]);
            let b = out.at(&[probe[0], probe[1], probe[2], probe[3], vi]);
            if a.to_bits() != b.to_bits() {
                same = false;
            }
        }
        if same != expect_same {
            return Err(Error::numeric(format!(
                "receptive field violated for perturbation at t={t},h={h},w={w}"
            )));
        }
    }
    println!("locality b: 2.5d receptive field is exact             ok");

    // (c) a 2d-variant network commutes with slice permutation, bit-exact
    let ucfg = UNetConfig {
        levels: 2,
        base_channels: 4,
        k: 3,
        variant: Variant::TwoD,
        ..UNetConfig::default()
    };
    let model = UNetModel::build(ucfg, seed)?;
    let xin = DenseTensor::from_fn(&[1, 4, 8, 8, 2], |_| r.gen_range(0.0..1.0));
    let y = model.forward(&xin)?;
    let perm = [3usize, 2, 1, 0];
    let xp = DenseTensor::from_fn(xin.shape(), |idx| {
        xin.at(&[idx[0], perm[idx[1]], idx[2], idx[3], idx[4]])
    });
    let yp = model.forward(&xp)?;
    for ti in 0..4 {
        for yy in 0..8 {
            for xx in 0..8 {
                if y.at(&[0, perm[ti], yy, xx]).to_bits() != yp.at(&[0, ti, yy, xx]).to_bits() {
                    return Err(Error::numeric("2d network is not slice-separable"));
                }
            }
        }
    }
    println!("locality c: 2d network is slice-separable             ok");
    Ok(())
}

fn cmd_check(a: CheckArgs) -> Result<()> {
    let suite = a.suite.clone().ok_or_else(|| Error::usage("--suite is required"))?;
    let seed = a.seed.unwrap_or(0);
    match suite.as_str() {
        "oracle" => {
            let trials = a.trials.unwrap_or(50);
            if trials == 0 {
                return Err(Error::usage("--trials must be >= 1"));
            }
            let worst = check_oracle(trials, seed, a.corrupt_e)?;
            println!("oracle: {trials} trials, max |fast - naive| = {worst:.3e}");
            if worst > 1e-10 {
                return Err(Error::numeric(format!(
                    "fast path deviates from reference by {worst:.3e} (limit 1e-10)"
                )));
            }
        }
        "grad" => {
            let worst = check_grad(seed)?;
            println!("grad: max relative error vs finite differences = {worst:.3e}");
            if worst > 1e-4 {
                return Err(Error::numeric(format!(
                    "gradient deviates from finite differences by {worst:.3e} (limit 1e-4)"
                )));
            }
        }
        "locality" => check_locality(seed)?,
        other => {
            return Err(Error::usage(format!(
                "unknown suite '{other}' (expected oracle, grad, or locality)"
            )))
        }
    }
    println!("check {suite}: pass");
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

const ABLATE_REFERENCE: &[(usize, f64, f64, f64, f64)] = &[
    // clinical-scale reference values (not reproducible on synthetic data)
    (3, 86.51, 81.76, 89.39, 84.84),
    (5, 85.75, 82.73, 88.80, 85.22),
    (7, 86.01, 81.68, 88.70, 84.60),
];

fn cmd_ablate(a: AblateArgs) -> Result<()> {
    let started = unix_now();
    let data = a.data.clone().ok_or_else(|| Error::usage("--data is required"))?;
    let tk_list: Vec<usize> = a
        .tk
        .clone()
        .unwrap_or_else(|| "3,5,7".to_string())
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::usage(format!("bad --tk entry '{s}'")))
        })
        .collect::<Result<_>>()?;
    if tk_list.is_empty() {
        return Err(Error::usage("--tk needs at least one kernel size"));
    }
    for &tk in &tk_list {
        if tk % 2 == 0 {
            return Err(Error::usage(format!(
                "inter-slice kernel size {tk} must be odd"
            )));
        }
    }
    let ds = synth::load_manifest(&data)?;
    let train_cases = synth::load_split(&data, &ds, Split::Train)?;
    let val_cases = synth::load_split(&data, &ds, Split::Val)?;
    let test_cases = synth::load_split(&data, &ds, Split::Test)?;
    let d = TrainConfig::default();
    let train_cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(10),
        warmup_epochs: a.warmup.unwrap_or(5),
        lr: a.lr.unwrap_or(1e-3),
        batch_segments: a.batch_segments.unwrap_or(4),
        segment_slices: a.segment_slices.unwrap_or(d.segment_slices),
        steps_per_epoch: a.steps_per_epoch.unwrap_or(0),
        pos_weight: a.pos_weight.unwrap_or(8.0),
        seed: a.seed.unwrap_or(0),
        ..d
    };
    let mut rows = Vec::new();
    for &tk in &tk_list {
        let ucfg = unet_config_from(
            Some("2.5d"),
            a.levels,
            a.base_channels,
            a.k,
            None,
            None,
            Some(tk),
            None,
        )?;
        let model = UNetModel::build(ucfg, train_cfg.seed)?;
        let result = fit(model, &train_cases, &val_cases, &train_cfg)?;
        let report = eval_report(&result.model, &test_cases)?;
        rows.push((tk, report));
    }
    println!("T    DSC     Recall/Precision   F1");
    for (tk, rep) in &rows {
        println!(
            "{tk:<4} {:.4}  {:.4}/{:.4}      {:.4}",
            rep.mean_dsc, rep.mean_recall, rep.mean_precision, rep.mean_f1
        );
    }
    println!();
    println!("reference (clinical-scale, for orientation only; percentages):");
    for &(tk, dsc, rec, prec, f1) in ABLATE_REFERENCE {
        println!("  T={tk}: DSC {dsc}  Recall/Precision {rec}/{prec}  F1 {f1}");
    }
    let out = a.out.clone().unwrap_or_else(|| data.join("ablate.json"));
    let payload: Vec<serde_json::Value> = rows
        .iter()
        .map(|(tk, rep)| {
            json!({
                "t_k": tk,
                "dsc": rep.mean_dsc,
                "recall": rep.mean_recall,
                "precision": rep.mean_precision,
                "f1": rep.mean_f1,
            })
        })
        .collect();
    std::fs::write(&out, serde_json::to_string_pretty(&payload).unwrap())
        .map_err(|e| Error::io(out.display().to_string(), e))?;
    let dir = out.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    write_manifest(
        &dir,
        "ablate",
        serde_json::to_value(&a).unwrap(),
        train_cfg.seed,
        &[out.display().to_string()],
        started,
    )
}

// ---------------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------------

fn parse_shapes(s: &str) -> Result<Vec<[usize; 5]>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let dims: Vec<usize> = part
            .trim()
            .split('x')
            .map(|d| {
                d.parse::<usize>()
                    .map_err(|_| Error::usage(format!("bad shape '{part}'")))
            })
            .collect::<Result<_>>()?;
        if dims.len() != 5 {
            return Err(Error::usage(format!(
                "shape '{part}' must be b x t x h x w x c"
            )));
        }
        out.push([dims[0], dims[1], dims[2], dims[3], dims[4]]);
    }
    Ok(out)
}

fn cmd_bench(a: BenchArgs) -> Result<()> {
    let started = unix_now();
    let reps = a.reps.unwrap_or(3);
    if reps == 0 {
        return Err(Error::usage("--reps must be >= 1"));
    }
    let shapes = parse_shapes(
        a.shapes
            .as_deref()
            .unwrap_or("1x8x16x16x16,1x8x32x32x16,1x8x64x64x16"),
    )?;
    let variant = Variant::parse(a.variant.as_deref().unwrap_or("2.5d"))?;
    let (k, v, u) = (a.k.unwrap_or(8), a.v.unwrap_or(16), a.u.unwrap_or(1));
    let mut results = Vec::new();
    println!("shape              naive_s    fast_s     speedup");
    for shape in &shapes {
        let [b, t, h, w, c] = *shape;
        let cfg = LambdaPlusConfig {
            c,
            k,
            v,
            u,
            r: 3,
            t_k: 3,
            variant,
        };
        let weights = LambdaPlusWeights::init(&cfg, 0)?;
        let mut r = rng::rng(1, "bench-x");
        let x = DenseTensor::from_fn(&[b, t, h, w, c], |_| r.gen_range(-1.0..1.0));
        // equivalence guard before timing anything
        let naive_out = forward_naive(&x, &weights, &cfg)?;
        let fast_out = forward_fast(&x, &weights, &cfg)?;
        let dev = naive_out.max_abs_diff(&fast_out);
        if dev > 1e-10 {
            return Err(Error::numeric(format!(
                "paths disagree by {dev:.3e} at shape {shape:?}"
            )));
        }
        let time = |f: &dyn Fn() -> Result<DenseTensor>| -> Result<f64> {
            let mut best = f64::INFINITY;
            for _ in 0..reps {
                let t0 = Instant::now();
                let out = f()?;
                std::hint::black_box(out.data()[0]);
                best = best.min(t0.elapsed().as_secs_f64());
            }
            Ok(best)
        };
        let naive_s = time(&|| forward_naive(&x, &weights, &cfg))?;
        let fast_s = time(&|| forward_fast(&x, &weights, &cfg))?;
        let speedup = naive_s / fast_s;
        let label = format!("{b}x{t}x{h}x{w}x{c}");
        println!("{label:<18} {naive_s:<10.4} {fast_s:<10.4} {speedup:.2}x");
        if h * w >= 32 * 32 && fast_s >= naive_s {
            return Err(Error::numeric(format!(
                "fast path not faster than reference at {label}"
            )));
        }
        if h == 64 && w == 64 && speedup < 5.0 {
            return Err(Error::numeric(format!(
                "speedup {speedup:.2}x at {label} is below the required 5x"
            )));
        }
        results.push(json!({
            "shape": shape,
            "naive_s": naive_s,
            "fast_s": fast_s,
            "speedup": speedup,
            "max_abs_diff": dev,
        }));
    }
    if let Some(out) = &a.out {
        std::fs::write(out, serde_json::to_string_pretty(&results).unwrap())
            .map_err(|e| Error::io(out.display().to_string(), e))?;
        let dir = out.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
        write_manifest(
            &dir,
            "bench",
            serde_json::to_value(&a).unwrap(),
            0,
            &[out.display().to_string()],
            started,
        )?;
    }
    Ok(())
}
