//! Compresses a seeded toy model with every strategy and reports how far
//! each compressed model drifts from the original.
//!
//! ```text
//! cargo run --release --example compress_toy -- [sparsity] [budget]
//! ```

use std::time::Instant;

use dotresize::calib::{sample_calibration, synthetic_stream};
use dotresize::compress::{compress, CompressionSpec, Strategy};
use dotresize::eval::{evaluate, Reference};
use dotresize::model::{fold_rmsnorm, generate_toy, ModelConfig, Precision};

fn main() -> anyhow::Result<()> {
    let mut args = std::env::args().skip(1);
    let sparsity: f64 = args.next().map_or(Ok(0.2), |s| s.parse())?;
    let budget: usize = args.next().map_or(Ok(1 << 14), |s| s.parse())?;

    let mut cfg = ModelConfig::toy();
    cfg.precision = Precision::F64;
    let model = fold_rmsnorm(&generate_toy(&cfg, 0)?)?;

    let text = synthetic_stream(1 << 18, cfg.vocab_size, 1)?;
    let (calib_part, eval_part) = text.split(text.len() - 16 * 128 - 1)?;
    let calib = sample_calibration(&calib_part, budget, 128, 0)?;
    let reference = Reference::new(&model, &eval_part, 128)?;
    println!("original perplexity {:.4}", reference.perplexity);

    for strategy in Strategy::ALL {
        let spec = CompressionSpec::new(strategy, sparsity);
        let start = Instant::now();
        let out = compress(&model, &spec, &calib)?;
        let elapsed = start.elapsed();
        let report = evaluate(&model, &reference, Some((&out.model, Some(&out.manifest))), 128, false)?;
        let worst = out
            .manifest
            .junctions
            .iter()
            .map(|j| j.reconstruction_error)
            .fold(0.0, f64::max);
        println!(
            "{strategy:<16} d_new {:>3}  ppl {:>9.4}  kl {:.3e}  top1 {:.4}  params {:>7}  worst recon {:.3}  ({:.1?})",
            out.manifest.d_new,
            report.perplexity,
            report.kl,
            report.top1,
            report.params.compressed,
            worst,
            elapsed
        );
    }
    Ok(())
}
