use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dotresize::calib::{load_tokens, sample_calibration, save_tokens, synthetic_stream, TokenFormat, TokenStream};
use dotresize::compress::{compress, CompressionSpec, PipelineMode, Strategy, DEFAULT_LAMBDA};
use dotresize::eval::{evaluate, sweep, Reference, SweepConfig, SweepGrid};
use dotresize::model::{fold_rmsnorm, generate_toy_with, load_container, save_container, Model, ModelConfig, Precision, ToyOptions};

#[derive(Parser)]
#[command(name = "dotresize", version, about = "Transformer width reduction by optimal-transport neuron merging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a seeded random model (and optionally a synthetic token file).
    GenerateToy(GenerateArgs),
    /// Absorb RMSNorm scales into the following weights.
    Fold(FoldArgs),
    /// Reduce the residual width of a model.
    Compress(CompressArgs),
    /// Perplexity and parameter count of one model.
    Eval(EvalArgs),
    /// Divergence of a compressed model from its original.
    Compare(CompareArgs),
    /// Grid of compress + compare runs with a CSV summary.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Token file (calibration data, and evaluation data unless --eval-data is given).
    #[arg(long)]
    calib: Option<PathBuf>,
    #[arg(long, default_value = "binary_u32")]
    calib_format: TokenFormat,
    /// Held-out token file for evaluation.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    seq_len: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "f32")]
    precision: Precision,
    #[arg(long, default_value_t = 64)]
    d_model: usize,
    #[arg(long, default_value_t = 4)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long)]
    kv_heads: Option<usize>,
    #[arg(long, default_value_t = 16)]
    d_head: usize,
    #[arg(long, default_value_t = 256)]
    d_ff: usize,
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    /// Residual neuron pairs made near-duplicates.
    #[arg(long, default_value_t = 0)]
    redundant_pairs: usize,
    /// Also write a synthetic token stream here.
    #[arg(long)]
    tokens_out: Option<PathBuf>,
    #[arg(long, default_value_t = 1 << 20)]
    tokens_len: usize,
}

#[derive(Args)]
struct FoldArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SpecArgs {
    #[arg(long, default_value = "dotresize")]
    strategy: Strategy,
    #[arg(long, default_value_t = 0.2)]
    sparsity: f64,
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    #[arg(long, default_value = "sequential")]
    pipeline_mode: PipelineMode,
    #[arg(long)]
    rms_rescale: bool,
    /// Mean-center neurons before computing transport costs
    #[arg(long)]
    center: bool,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    spec: SpecArgs,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = dotresize::calib::DEFAULT_BUDGET)]
    calib_budget: usize,
    /// Storage precision of the output; defaults to the input's.
    #[arg(long)]
    precision: Option<Precision>,
    /// Map manifest path; defaults to `<out>.manifest.json`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Report path; printed to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Original (uncompressed) model.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    compressed: PathBuf,
    /// Map manifest of the compressed model, echoed into the report.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    timing: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    model: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "dotresize")]
    strategy: Vec<Strategy>,
    #[arg(long, value_delimiter = ',', default_value = "0.1,0.2,0.3,0.4,0.5")]
    sparsity: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.01,0.1,1,5,10")]
    lambda: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "65536,131072,262144,524288")]
    calib_budget: Vec<usize>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "sequential")]
    pipeline_mode: PipelineMode,
    #[arg(long)]
    rms_rescale: bool,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    #[arg(long)]
    timing: bool,
}

fn load_model(path: &Path) -> Result<Model> {
    load_container(path).with_context(|| format!("loading {}", path.display()))
}

fn load_stream(path: &Path, format: TokenFormat, vocab: usize) -> Result<TokenStream> {
    load_tokens(path, format, vocab).with_context(|| format!("loading tokens from {}", path.display()))
}

impl DataArgs {
    fn calib(&self, vocab: usize) -> Result<TokenStream> {
        match &self.calib {
            Some(p) => load_stream(p, self.calib_format, vocab),
            None => bail!("--calib is required"),
        }
    }

    fn eval(&self, vocab: usize) -> Result<TokenStream> {
        match (&self.eval_data, &self.calib) {
            (Some(p), _) | (None, Some(p)) => load_stream(p, self.calib_format, vocab),
            (None, None) => bail!("--eval-data or --calib is required"),
        }
    }
}

fn emit(report: &impl serde::Serialize, out: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(report)?;
    match out {
        Some(p) => fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateToy(a) => {
            let config = ModelConfig {
                d_model: a.d_model,
                n_layers: a.layers,
                n_heads: a.heads,
                n_kv_heads: a.kv_heads.unwrap_or(a.heads),
                d_head: a.d_head,
                d_ff: a.d_ff,
                vocab_size: a.vocab,
                precision: a.precision,
                ..ModelConfig::toy()
            };
            let opts = ToyOptions {
                redundant_pairs: a.redundant_pairs,
                norm_jitter: 0.1,
            };
            save_container(&generate_toy_with(&config, a.seed, &opts)?, &a.out)?;
            if let Some(p) = a.tokens_out {
                save_tokens(&p, synthetic_stream(a.tokens_len, a.vocab, a.seed)?.ids())?;
            }
        }
        Command::Fold(a) => {
            save_container(&fold_rmsnorm(&load_model(&a.model)?)?, &a.out)?;
        }
        Command::Compress(a) => {
            let model = load_model(&a.model)?;
            let stream = a.data.calib(model.config.vocab_size)?;
            let windows = sample_calibration(&stream, a.calib_budget, a.data.seq_len, a.data.seed)?;
            let spec = CompressionSpec {
                strategy: a.spec.strategy,
                sparsity: a.spec.sparsity,
                lambda: a.spec.lambda,
                pipeline_mode: a.spec.pipeline_mode,
                rms_rescale: a.spec.rms_rescale,
                center: a.spec.center,
                ..CompressionSpec::default()
            };
            let out = compress(&model, &spec, &windows)?;
            let compressed = match a.precision {
                Some(p) => out.model.with_precision(p),
                None => out.model,
            };
            save_container(&compressed, &a.out)?;
            let manifest = a.manifest.unwrap_or_else(|| {
                let mut p = a.out.clone().into_os_string();
                p.push(".manifest.json");
                p.into()
            });
            emit(&out.manifest, Some(&manifest))?;
        }
        Command::Eval(a) => {
            let model = load_model(&a.model)?;
            let stream = a.data.eval(model.config.vocab_size)?;
            let reference = Reference::new(&model, &stream, a.data.seq_len)?;
            let mut report = evaluate(&model, &reference, None, a.data.seq_len, a.timing)?;
            report.original = a.model.display().to_string();
            emit(&report, a.out.as_deref())?;
        }
        Command::Compare(a) => {
            let original = load_model(&a.model)?;
            let compressed = load_model(&a.compressed)?;
            let manifest = match &a.manifest {
                Some(p) => Some(serde_json::from_slice(&fs::read(p)?)?),
                None => None,
            };
            let stream = a.data.eval(original.config.vocab_size)?;
            let reference = Reference::new(&original, &stream, a.data.seq_len)?;
            let mut report = evaluate(
                &original,
                &reference,
                Some((&compressed, manifest.as_ref())),
                a.data.seq_len,
                a.timing,
            )?;
            report.original = a.model.display().to_string();
            report.compressed = Some(a.compressed.display().to_string());
            emit(&report, a.out.as_deref())?;
        }
        Command::Sweep(a) => {
            let model = load_model(&a.model)?;
            let calib = a.data.calib(model.config.vocab_size)?;
            let eval = a.data.eval(model.config.vocab_size)?;
            let cfg = SweepConfig {
                grid: SweepGrid {
                    strategies: a.strategy,
                    sparsities: a.sparsity,
                    lambdas: a.lambda,
                    budgets: a.calib_budget,
                },
                seq_len: a.data.seq_len,
                eval_seq_len: a.data.seq_len,
                seed: a.data.seed,
                pipeline_mode: a.pipeline_mode,
                rms_rescale: a.rms_rescale,
                workers: a.workers,
                timing: a.timing,
                ..SweepConfig::new(&a.out)
            };
            let results = sweep(&model, &calib, &eval, &cfg)?;
            let failed = results.iter().filter(|r| !r.is_ok()).count();
            eprintln!(
                "{} cells, {failed} failed; summary in {}",
                results.len(),
                a.out.join("sweep.csv").display()
            );
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
