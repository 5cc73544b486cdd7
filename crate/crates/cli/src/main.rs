//! Operator entry point: quantize a toy or saved model, sweep the
//! mode/order ablation grid, or run the latency benchmarks.
//!
//! Runs are configured by a plain-text TOML file, command-line flags, or
//! both; flags win field by field. Every run writes a manifest carrying
//! the fully resolved configuration, seed, tool versions, and git hash,
//! so any output can be reproduced bit for bit. Errors leave as
//! line-delimited JSON on stderr: exit 2 for configuration problems,
//! exit 1 for runtime failures.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::json;

use asymcal::bench::{self, BenchResult, BenchVariant};
use asymcal::engine::{AqOrder, ClipSearch, Mode, QuantConfig};
use asymcal::error::{Error, Result};
use asymcal::model::ModelGraph;
use asymcal::pipeline::calibrate_model;
use asymcal::report::CalibReport;
use asymcal::tensor::{gen_correlated, Matrix, Seed};
use asymcal::toymodel::{
    build_model, gen_calib, ToyKind, ToySpec, DEFAULT_SAMPLES, DEFAULT_TOKENS,
};

#[derive(Parser)]
#[command(name = "asymcal", version, about = "Post-training quantization workbench")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Quantize a model and write weights, grids, and reports.
    Quantize(QuantArgs),
    /// Run all four update modes crossed with both quantization orders.
    Ablate(QuantArgs),
    /// Time the P kernels or whole-layer calibration.
    Bench(BenchArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ToyArg {
    Mlp,
    Transformer,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Rtn,
    Gptq,
    /// Residual steering only, no error propagation.
    Gptaq2,
    Gptaq,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Mode {
        match m {
            ModeArg::Rtn => Mode::Rtn,
            ModeArg::Gptq => Mode::Gptq,
            ModeArg::Gptaq2 => Mode::GptaqSecondOnly,
            ModeArg::Gptaq => Mode::Gptaq,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum AqOrderArg {
    /// Weights first; activations quantize only at evaluation.
    Wa,
    /// Activations quantize live inside the calibration stream.
    Aw,
}

impl From<AqOrderArg> for AqOrder {
    fn from(o: AqOrderArg) -> AqOrder {
        match o {
            AqOrderArg::Wa => AqOrder::WeightsThenActivations,
            AqOrderArg::Aw => AqOrder::ActivationsThenWeights,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ClipArg {
    Minmax,
    Mse,
}

#[derive(Args)]
struct QuantArgs {
    /// Plain-text run configuration (TOML); flags override it field by field.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Built-in toy network to quantize.
    #[arg(long, value_enum, conflicts_with = "model")]
    toy: Option<ToyArg>,
    /// Directory with a saved model description and weight containers.
    #[arg(long, value_name = "DIR")]
    model: Option<PathBuf>,
    /// Weight bit-width: 2, 3, 4, 8, or 16.
    #[arg(long)]
    bits: Option<u32>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Channels per quantization group (default: one group per row).
    #[arg(long)]
    group_size: Option<usize>,
    /// Columns per lazy-update block.
    #[arg(long)]
    block_size: Option<usize>,
    /// Hessian damping as a fraction of the mean diagonal.
    #[arg(long)]
    damp: Option<f64>,
    /// Process columns in descending Hessian-diagonal order.
    #[arg(long)]
    act_order: bool,
    #[arg(long, value_enum)]
    aq_order: Option<AqOrderArg>,
    /// Grid range fit: plain min/max or shrink search on squared error.
    #[arg(long, value_enum)]
    clip: Option<ClipArg>,
    /// Activation bit-width; values below 16 enable activation quantization.
    #[arg(long)]
    act_bits: Option<u32>,
    /// Per-token range shrink for activation grids.
    #[arg(long)]
    act_clip: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Args)]
struct BenchArgs {
    /// Which comparison to run.
    #[arg(long, value_enum)]
    what: BenchWhat,
    /// Problem sizes n, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    /// Timed repetitions per size (after two warm-ups).
    #[arg(long, default_value_t = 9)]
    reps: usize,
    /// Calibration-stream length for layer timing.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum BenchWhat {
    P,
    Layer,
}

// ── Config file ──────────────────────────────────────────────────────────

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    model_path: Option<PathBuf>,
    quant: Option<QuantSection>,
    toy: Option<ToySection>,
    calib: Option<CalibSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantSection {
    bits: Option<u32>,
    symmetric: Option<bool>,
    group_size: Option<usize>,
    block_size: Option<usize>,
    damp_ratio: Option<f64>,
    act_order: Option<bool>,
    mode: Option<Mode>,
    clip_search: Option<ClipSearch>,
    aq_order: Option<AqOrder>,
    act_bits: Option<u32>,
    act_clip: Option<f64>,
    act_enabled: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ToySection {
    kind: Option<ToyKind>,
    blocks: Option<usize>,
    width: Option<usize>,
    hidden_mult: Option<usize>,
    seed: Option<u64>,
    decay: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CalibSection {
    samples: Option<usize>,
    tokens: Option<usize>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
}

/// Where the weights come from.
#[derive(Debug)]
enum ModelSource {
    Toy(ToySpec),
    Saved(PathBuf),
}

/// Fully resolved run: defaults, then file settings, then flags.
#[derive(Debug)]
struct Resolved {
    cfg: QuantConfig,
    source: ModelSource,
    samples: usize,
    tokens: usize,
    seed: u64,
}

fn resolve(args: &QuantArgs) -> Result<Resolved> {
    let file = load_file_config(args.config.as_deref())?;

    let mut cfg = QuantConfig::default();
    if let Some(q) = &file.quant {
        if let Some(v) = q.bits {
            cfg.bits = v;
        }
        if let Some(v) = q.symmetric {
            cfg.symmetric = v;
        }
        if let Some(v) = q.group_size {
            cfg.group_size = Some(v);
        }
        if let Some(v) = q.block_size {
            cfg.block_size = v;
        }
        if let Some(v) = q.damp_ratio {
            cfg.damp_ratio = v;
        }
        if let Some(v) = q.act_order {
            cfg.act_order = v;
        }
        if let Some(v) = q.mode {
            cfg.mode = v;
        }
        if let Some(v) = q.clip_search {
            cfg.clip_search = v;
        }
        if let Some(v) = q.aq_order {
            cfg.aq_order = v;
        }
        if let Some(v) = q.act_bits {
            cfg.act_cfg.bits = v;
            cfg.act_cfg.enabled = v < 16;
        }
        if let Some(v) = q.act_clip {
            cfg.act_cfg.clip_ratio = v;
        }
        if let Some(v) = q.act_enabled {
            cfg.act_cfg.enabled = v;
        }
    }
    if let Some(v) = args.bits {
        cfg.bits = v;
    }
    if let Some(v) = args.mode {
        cfg.mode = v.into();
    }
    if let Some(v) = args.group_size {
        cfg.group_size = Some(v);
    }
    if let Some(v) = args.block_size {
        cfg.block_size = v;
    }
    if let Some(v) = args.damp {
        cfg.damp_ratio = v;
    }
    if args.act_order {
        cfg.act_order = true;
    }
    if let Some(v) = args.aq_order {
        cfg.aq_order = v.into();
    }
    if let Some(v) = args.clip {
        cfg.clip_search = match v {
            ClipArg::Minmax => ClipSearch::Minmax,
            ClipArg::Mse => ClipSearch::Mse,
        };
    }
    if let Some(v) = args.act_bits {
        cfg.act_cfg.bits = v;
        cfg.act_cfg.enabled = v < 16;
    }
    if let Some(v) = args.act_clip {
        cfg.act_cfg.clip_ratio = v;
    }
    cfg.validate()?;

    let mut toy = ToySpec::default();
    let file_has_toy = file.toy.is_some();
    if let Some(t) = &file.toy {
        if let Some(v) = t.kind {
            toy.kind = v;
        }
        if let Some(v) = t.blocks {
            toy.blocks = v;
        }
        if let Some(v) = t.width {
            toy.width = v;
        }
        if let Some(v) = t.hidden_mult {
            toy.hidden_mult = v;
        }
        if let Some(v) = t.seed {
            toy.seed = v;
        }
        if let Some(v) = t.decay {
            toy.decay = v;
        }
    }
    if let Some(kind) = args.toy {
        toy.kind = match kind {
            ToyArg::Mlp => ToyKind::Mlp,
            ToyArg::Transformer => ToyKind::TinyTransformer,
        };
    }
    if let Some(v) = args.seed {
        toy.seed = v;
    }

    if file_has_toy && file.model_path.is_some() {
        return Err(Error::InvalidConfig(
            "config sets both [toy] and model_path; pick one".into(),
        ));
    }
    let source = if let Some(path) = &args.model {
        ModelSource::Saved(path.clone())
    } else if args.toy.is_some() || file_has_toy {
        ModelSource::Toy(toy)
    } else if let Some(path) = &file.model_path {
        ModelSource::Saved(path.clone())
    } else {
        return Err(Error::InvalidConfig(
            "no model to quantize: pass --toy, --model, or set one in the config file".into(),
        ));
    };

    let calib = file.calib.unwrap_or_default();
    let samples = calib.samples.unwrap_or(DEFAULT_SAMPLES);
    let tokens = calib.tokens.unwrap_or(DEFAULT_TOKENS);
    if samples == 0 || tokens == 0 {
        return Err(Error::InvalidConfig(
            "calib.samples and calib.tokens must be >= 1".into(),
        ));
    }

    let seed = args.seed.unwrap_or(match &source {
        ModelSource::Toy(t) => t.seed,
        ModelSource::Saved(_) => 0,
    });

    Ok(Resolved {
        cfg,
        source,
        samples,
        tokens,
        seed,
    })
}

/// Loads or builds the weights and draws the calibration batch. Saved
/// models get correlated synthetic data over their input width, seeded
/// like the toys so reruns are bit-identical.
fn materialize(run: &Resolved) -> Result<(ModelGraph, Matrix, serde_json::Value)> {
    match &run.source {
        ModelSource::Toy(spec) => {
            let model = build_model(spec)?;
            let calib = gen_calib(spec, run.samples, run.tokens)?;
            Ok((model, calib, json!({ "toy": spec })))
        }
        ModelSource::Saved(path) => {
            let model = ModelGraph::load(path)?;
            let calib = gen_correlated(
                Seed(run.seed ^ 0xca11b0b1),
                model.input_dim,
                run.samples * run.tokens,
                0.5,
            )?;
            Ok((model, calib, json!({ "model_path": path })))
        }
    }
}

fn write_manifest(out: &Path, command: &str, payload: serde_json::Value) -> Result<()> {
    let manifest = json!({
        "command": command,
        "payload": payload,
        "versions": {
            "package": env!("CARGO_PKG_VERSION"),
            "rustc": env!("BUILD_RUSTC"),
        },
        "git_hash": env!("BUILD_GIT_HASH"),
        "threads": bench::thread_count(),
    });
    fs::write(
        out.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::Format(format!("manifest: {e}")))?,
    )?;
    Ok(())
}

fn cmd_quantize(args: &QuantArgs) -> Result<()> {
    let run = resolve(args)?;
    let (model, calib, source_desc) = materialize(&run)?;
    let (quantized, report) = calibrate_model(&model, &calib, &run.cfg)?;

    fs::create_dir_all(&args.out)?;
    quantized.save(&args.out.join("model"))?;
    report.write_json(&args.out.join("report.json"))?;
    report.write_csv(
        &args.out.join("report_layers.csv"),
        &args.out.join("report_blocks.csv"),
    )?;

    let grids: Vec<serde_json::Value> = report
        .blocks
        .iter()
        .flat_map(|b| {
            b.layers.iter().enumerate().map(move |(li, l)| {
                json!({
                    "block": b.block_index,
                    "layer": li,
                    "name": l.name,
                    "params": l.params,
                })
            })
        })
        .collect();
    fs::write(
        args.out.join("params.json"),
        serde_json::to_string_pretty(&grids).map_err(|e| Error::Format(format!("params: {e}")))?,
    )?;

    write_manifest(
        &args.out,
        "quantize",
        json!({
            "config": run.cfg,
            "source": source_desc,
            "samples": run.samples,
            "tokens": run.tokens,
            "seed": run.seed,
        }),
    )?;

    for b in &report.blocks {
        println!("block {}: mae {:.6e}", b.block_index, b.mae);
    }
    println!(
        "quantized {} layers in {:.2}s -> {}",
        quantized.layer_count(),
        report.total_seconds,
        args.out.display()
    );
    Ok(())
}

// ── Ablation ─────────────────────────────────────────────────────────────

struct AblateRow {
    mode: Mode,
    aq_order: AqOrder,
    total_sym_loss: f64,
    total_asym_loss: f64,
    final_mae: f64,
    seconds: f64,
}

fn mode_tag(m: Mode) -> &'static str {
    match m {
        Mode::Rtn => "rtn",
        Mode::Gptq => "gptq",
        Mode::GptaqSecondOnly => "gptaq2",
        Mode::Gptaq => "gptaq",
    }
}

fn order_tag(o: AqOrder) -> &'static str {
    match o {
        AqOrder::WeightsThenActivations => "wa",
        AqOrder::ActivationsThenWeights => "aw",
    }
}

fn total_losses(report: &CalibReport) -> (f64, f64) {
    let mut sym = 0.0;
    let mut asym = 0.0;
    for b in &report.blocks {
        for l in &b.layers {
            sym += l.sym_loss;
            asym += l.asym_loss;
        }
    }
    (sym, asym)
}

fn cmd_ablate(args: &QuantArgs) -> Result<()> {
    if args.mode.is_some() || args.aq_order.is_some() {
        return Err(Error::InvalidConfig(
            "ablate sweeps --mode and --aq-order itself; drop those flags".into(),
        ));
    }
    let run = resolve(args)?;
    let (model, calib, source_desc) = materialize(&run)?;

    let mut rows = Vec::with_capacity(8);
    for mode in [Mode::Rtn, Mode::Gptq, Mode::GptaqSecondOnly, Mode::Gptaq] {
        for aq_order in [
            AqOrder::WeightsThenActivations,
            AqOrder::ActivationsThenWeights,
        ] {
            let cfg = QuantConfig {
                mode,
                aq_order,
                ..run.cfg.clone()
            };
            let (_, report) = calibrate_model(&model, &calib, &cfg)?;
            let (total_sym_loss, total_asym_loss) = total_losses(&report);
            rows.push(AblateRow {
                mode,
                aq_order,
                total_sym_loss,
                total_asym_loss,
                final_mae: report.blocks.last().map_or(0.0, |b| b.mae),
                seconds: report.total_seconds,
            });
        }
    }

    let mut csv = String::from("mode,aq_order,total_sym_loss,total_asym_loss,final_mae,seconds\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{:.17e},{:.17e},{:.17e},{:.6}",
            mode_tag(r.mode),
            order_tag(r.aq_order),
            r.total_sym_loss,
            r.total_asym_loss,
            r.final_mae,
            r.seconds
        );
    }
    fs::create_dir_all(&args.out)?;
    fs::write(args.out.join("ablation.csv"), &csv)?;

    let rows_json: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| {
            json!({
                "mode": mode_tag(r.mode),
                "aq_order": order_tag(r.aq_order),
                "total_sym_loss": r.total_sym_loss,
                "total_asym_loss": r.total_asym_loss,
                "final_mae": r.final_mae,
                "seconds": r.seconds,
            })
        })
        .collect();
    fs::write(
        args.out.join("ablation.json"),
        serde_json::to_string_pretty(&rows_json)
            .map_err(|e| Error::Format(format!("ablation: {e}")))?,
    )?;

    write_manifest(
        &args.out,
        "ablate",
        json!({
            "config": run.cfg,
            "source": source_desc,
            "samples": run.samples,
            "tokens": run.tokens,
            "seed": run.seed,
        }),
    )?;

    println!("{csv}");
    Ok(())
}

// ── Bench ────────────────────────────────────────────────────────────────

/// Layer rows get an extra column relating each residual-mode median to
/// its plain counterpart at the same size.
fn layer_csv_with_overhead(results: &[BenchResult]) -> Result<String> {
    let mut out = String::from(bench::CSV_HEADER);
    out.push_str(",overhead_ratio\n");
    for r in results {
        let pair_variant = match r.variant {
            BenchVariant::GptqLayer => BenchVariant::GptaqLayer,
            BenchVariant::GptaqLayer => BenchVariant::GptqLayer,
            _ => {
                return Err(Error::InvalidConfig(
                    "layer csv fed non-layer bench rows".into(),
                ))
            }
        };
        let pair = results
            .iter()
            .find(|c| c.variant == pair_variant && c.n == r.n)
            .ok_or_else(|| {
                Error::DegenerateInput(format!("no {} row for n={}", pair_variant.as_str(), r.n))
            })?;
        let (plain, steered) = match r.variant {
            BenchVariant::GptqLayer => (r.median, pair.median),
            _ => (pair.median, r.median),
        };
        let ratio = steered.as_secs_f64() / plain.as_secs_f64();
        let _ = writeln!(out, "{},{:.4}", r.csv_row(), ratio);
    }
    Ok(out)
}

fn cmd_bench(args: &BenchArgs) -> Result<()> {
    fs::create_dir_all(&args.out)?;
    let (name, csv) = match args.what {
        BenchWhat::P => {
            let results = bench::bench_p(&args.sizes, args.reps)?;
            ("bench_p.csv", bench::to_csv(&results))
        }
        BenchWhat::Layer => {
            let results = match args.k {
                Some(k) => bench::bench_layer_k(&args.sizes, args.reps, k)?,
                None => bench::bench_layer(&args.sizes, args.reps)?,
            };
            ("bench_layer.csv", layer_csv_with_overhead(&results)?)
        }
    };
    fs::write(args.out.join(name), &csv)?;
    write_manifest(
        &args.out,
        "bench",
        json!({
            "what": match args.what { BenchWhat::P => "p", BenchWhat::Layer => "layer" },
            "sizes": args.sizes,
            "reps": args.reps,
            "k": args.k,
        }),
    )?;
    print!("{csv}");
    Ok(())
}

// ── Error channel ────────────────────────────────────────────────────────

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::ShapeMismatch { .. } => "shape_mismatch",
        Error::DtypeMismatch { .. } => "dtype_mismatch",
        Error::EmptyTensor { .. } => "empty_tensor",
        Error::Format(_) => "format",
        Error::Io(_) => "io",
        Error::NotSpd { .. } => "not_spd",
        Error::ZeroPivot { .. } => "zero_pivot",
        Error::DegenerateInput(_) => "degenerate_input",
        Error::InvalidConfig(_) => "invalid_config",
        Error::NanDetected { .. } => "nan_detected",
        Error::SizeCap { .. } => "size_cap",
        Error::Annotated { .. } => unreachable!("error_kind takes the root"),
    }
}

fn finish(result: Result<()>) -> ExitCode {
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = json!({
                "error": e.to_string(),
                "kind": error_kind(e.root()),
            });
            eprintln!("{line}");
            match e.root() {
                Error::InvalidConfig(_) | Error::SizeCap { .. } => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let line = json!({ "error": e.to_string(), "kind": "usage" });
            eprintln!("{line}");
            return ExitCode::from(2);
        }
        Err(e) => {
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match cli.cmd {
        Cmd::Quantize(args) => finish(cmd_quantize(&args)),
        Cmd::Ablate(args) => finish(cmd_ablate(&args)),
        Cmd::Bench(args) => finish(cmd_bench(&args)),
    }
}
