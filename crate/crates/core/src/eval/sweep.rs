use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{evaluate, EvalError, EvalReport, Reference};
use crate::calib::{sample_calibration, TokenStream};
use crate::compress::{compress, CompressionSpec, PipelineMode, Strategy};
use crate::model::Model;
use crate::ot::SinkhornConfig;

pub const CSV_HEADER: [&str; 9] = [
    "strategy",
    "sparsity",
    "lambda",
    "budget",
    "ppl",
    "kl",
    "top1",
    "params",
    "ms_per_token",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub strategies: Vec<Strategy>,
    pub sparsities: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub budgets: Vec<usize>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Dotresize],
            sparsities: vec![0.1, 0.2, 0.3, 0.4, 0.5],
            lambdas: vec![0.01, 0.1, 1.0, 5.0, 10.0],
            budgets: vec![1 << 16, 1 << 17, 1 << 18, 1 << 19],
        }
    }
}

impl SweepGrid {
    /// Every cell, strategies outermost and budgets innermost.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::new();
        for &strategy in &self.strategies {
            for &sparsity in &self.sparsities {
                for &lambda in &self.lambdas {
                    for &budget in &self.budgets {
                        out.push(SweepCell {
                            strategy,
                            sparsity,
                            lambda,
                            budget,
                        });
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub strategy: Strategy,
    pub sparsity: f64,
    pub lambda: f64,
    pub budget: usize,
}

impl SweepCell {
    /// File stem identifying the cell.
    pub fn key(&self) -> String {
        format!(
            "{}_s{}_l{}_b{}",
            self.strategy, self.sparsity, self.lambda, self.budget
        )
    }
}

#[derive(Debug, Clone)]
pub struct SweepConfig {
    pub grid: SweepGrid,
    /// Calibration window length.
    pub seq_len: usize,
    /// Evaluation window length.
    pub eval_seq_len: usize,
    pub seed: u64,
    pub pipeline_mode: PipelineMode,
    pub rms_rescale: bool,
    pub sinkhorn: SinkhornConfig,
    /// Per-cell reports go to `out_dir/cells/`, the summary to `out_dir/sweep.csv`.
    pub out_dir: PathBuf,
    /// Cells evaluated concurrently.
    pub workers: usize,
    pub timing: bool,
}

impl SweepConfig {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        Self {
            grid: SweepGrid::default(),
            seq_len: 128,
            eval_seq_len: 128,
            seed: 0,
            pipeline_mode: PipelineMode::Sequential,
            rms_rescale: false,
            sinkhorn: SinkhornConfig::default(),
            out_dir: out_dir.into(),
            workers: 1,
            timing: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub cell: SweepCell,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub report: Option<EvalReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CellResult {
    pub fn is_ok(&self) -> bool {
        self.report.is_some()
    }
}

/// Writes `bytes` to `path` through a temporary file and a rename, so a
/// reader never sees a partial file.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), EvalError> {
    let tmp = path.with_extension("json.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn run_cell(
    model: &Model,
    calib: &TokenStream,
    reference: &Reference,
    cfg: &SweepConfig,
    cell: SweepCell,
) -> Result<EvalReport, EvalError> {
    let windows = sample_calibration(calib, cell.budget, cfg.seq_len, cfg.seed)?;
    let spec = CompressionSpec {
        strategy: cell.strategy,
        sparsity: cell.sparsity,
        lambda: cell.lambda,
        pipeline_mode: cfg.pipeline_mode,
        rms_rescale: cfg.rms_rescale,
        sinkhorn: cfg.sinkhorn,
        ..CompressionSpec::default()
    };
    let out = compress(model, &spec, &windows)?;
    let mut report = evaluate(
        model,
        reference,
        Some((&out.model, Some(&out.manifest))),
        cfg.eval_seq_len,
        cfg.timing,
    )?;
    report.seed = Some(cfg.seed);
    report.calib_budget = Some(cell.budget);
    Ok(report)
}

/// Runs every grid cell: calibrate with the cell's budget, compress, and
/// evaluate against `model` on `eval`.
///
/// Cells whose report file already exists are loaded instead of rerun.
/// A failing cell is recorded with its error and the sweep continues.
pub fn sweep(
    model: &Model,
    calib: &TokenStream,
    eval: &TokenStream,
    cfg: &SweepConfig,
) -> Result<Vec<CellResult>, EvalError> {
    let cells_dir = cfg.out_dir.join("cells");
    fs::create_dir_all(&cells_dir)?;
    let reference = Reference::new(model, eval, cfg.eval_seq_len)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers.max(1))
        .build()
        .expect("thread pool");
    let cells = cfg.grid.cells();
    let results: Vec<CellResult> = pool.install(|| {
        cells
            .par_iter()
            .map(|&cell| -> Result<CellResult, EvalError> {
                let path = cells_dir.join(format!("{}.json", cell.key()));
                if path.exists() {
                    return Ok(serde_json::from_slice(&fs::read(&path)?)?);
                }
                let result = match run_cell(model, calib, &reference, cfg, cell) {
                    Ok(report) => CellResult {
                        cell,
                        report: Some(report),
                        error: None,
                    },
                    Err(e) => CellResult {
                        cell,
                        report: None,
                        error: Some(e.to_string()),
                    },
                };
                write_atomic(&path, &serde_json::to_vec_pretty(&result)?)?;
                Ok(result)
            })
            .collect::<Result<_, _>>()
    })?;

    write_csv(&cfg.out_dir.join("sweep.csv"), &results)?;
    Ok(results)
}

fn write_csv(path: &Path, results: &[CellResult]) -> Result<(), EvalError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER)?;
    for r in results {
        let c = &r.cell;
        let num = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let rep = r.report.as_ref();
        w.write_record([
            c.strategy.to_string(),
            c.sparsity.to_string(),
            c.lambda.to_string(),
            c.budget.to_string(),
            num(rep.map(|x| x.perplexity)),
            num(rep.map(|x| x.kl)),
            num(rep.map(|x| x.top1)),
            rep.map(|x| x.params.compressed.to_string()).unwrap_or_default(),
            num(rep.and_then(|x| x.ms_per_token)),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    fs::write(path, bytes)?;
    Ok(())
}
