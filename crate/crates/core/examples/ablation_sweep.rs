//! A small λ × calibration-budget grid on the toy model, written to CSV.
//!
//! ```text
//! cargo run --release --example ablation_sweep -- [out_dir]
//! ```

use std::path::PathBuf;

use dotresize::calib::synthetic_stream;
use dotresize::eval::{sweep, SweepConfig, SweepGrid};
use dotresize::model::{generate_toy, ModelConfig, Precision};

fn main() -> anyhow::Result<()> {
    let out: PathBuf = std::env::args()
        .nth(1)
        .map_or_else(|| std::env::temp_dir().join("dotresize_ablation"), PathBuf::from);
    let mut cfg = ModelConfig::toy();
    cfg.precision = Precision::F64;
    let model = generate_toy(&cfg, 0)?;
    let text = synthetic_stream(1 << 17, cfg.vocab_size, 4)?;
    let (calib, held_out) = text.split(text.len() - (1 << 13))?;

    let config = SweepConfig {
        grid: SweepGrid {
            sparsities: vec![0.2],
            lambdas: vec![0.01, 0.1, 1.0, 5.0, 10.0],
            budgets: vec![1 << 12, 1 << 13, 1 << 14],
            ..SweepGrid::default()
        },
        ..SweepConfig::new(&out)
    };
    let results = sweep(&model, &calib, &held_out, &config)?;
    let failed = results.iter().filter(|r| !r.is_ok()).count();
    println!("{} cells, {failed} failed", results.len());
    print!("{}", std::fs::read_to_string(out.join("sweep.csv"))?);
    Ok(())
}
