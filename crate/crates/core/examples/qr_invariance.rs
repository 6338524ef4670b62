//! Why the orthonormal factor of a QR split can cross an RMSNorm, and what
//! that buys: zero-sparsity compression reproduces the folded model.
//!
//! ```text
//! cargo run --release --example qr_invariance
//! ```

use dotresize::calib::{sample_calibration, synthetic_stream};
use dotresize::compress::{compress, CompressionSpec, Strategy};
use dotresize::linalg::{pseudoinverse, qr_thin, rmsnorm, Matrix};
use dotresize::model::{fold_rmsnorm, generate_toy, ModelConfig, Precision};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let t = Matrix::random_normal(6, 6, 1.0, &mut rng);
    let (q, r) = qr_thin(&t)?;
    let back = r.matmul(&pseudoinverse(&t)?);
    let x = Matrix::random_normal(1, 6, 3.0, &mut rng);
    let lhs = Matrix::from_vec(1, 6, rmsnorm(x.matmul(&q).row(0), 0.0)).matmul(&back);
    let rhs = Matrix::from_vec(1, 6, rmsnorm(x.row(0), 0.0));
    println!("rmsnorm(x·Q)·R·T⁻¹ vs rmsnorm(x): max diff {:.2e}", lhs.max_abs_diff(&rhs));
    // The raw map does not commute.
    let raw = Matrix::from_vec(1, 6, rmsnorm(x.matmul(&t).row(0), 0.0)).matmul(&pseudoinverse(&t)?);
    println!("rmsnorm(x·T)·T⁻¹ vs rmsnorm(x):     max diff {:.2e}", raw.max_abs_diff(&rhs));

    let mut cfg = ModelConfig::toy();
    cfg.precision = Precision::F64;
    let model = generate_toy(&cfg, 0)?;
    let folded = fold_rmsnorm(&model)?;
    let text = synthetic_stream(1 << 16, cfg.vocab_size, 3)?;
    let (calib_part, held_out) = text.split(text.len() - 4 * 128)?;
    let calib = sample_calibration(&calib_part, 1 << 14, 128, 0)?;
    let out = compress(&model, &CompressionSpec::new(Strategy::Dotresize, 0.0), &calib)?;
    let mut worst: f64 = 0.0;
    for w in held_out.windows(128) {
        let (a, b) = (out.model.forward(&w)?, folded.forward(&w)?);
        worst = worst.max(a.max_abs_diff(&b) / b.max_abs());
    }
    println!("zero-sparsity compression vs folded original: max relative logit diff {worst:.2e}");
    Ok(())
}
