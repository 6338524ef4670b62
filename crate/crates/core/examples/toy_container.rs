//! Generates a seeded toy model, writes it in both storage precisions,
//! reads it back and folds the norm scales.
//!
//! ```text
//! cargo run --release --example toy_container -- [out_dir]
//! ```

use std::path::PathBuf;

use dotresize::calib::{load_tokens, save_tokens, synthetic_stream, TokenFormat};
use dotresize::model::{expected_tensors, fold_rmsnorm, generate_toy, load_container, save_container, ModelConfig, Precision};

fn main() -> anyhow::Result<()> {
    let dir: PathBuf = std::env::args().nth(1).map_or_else(std::env::temp_dir, PathBuf::from);
    std::fs::create_dir_all(&dir)?;

    let cfg = ModelConfig::toy();
    let model = generate_toy(&cfg, 0)?;
    println!("toy model: {} parameters, {} junctions", model.n_params(), cfg.n_junctions());
    for (name, shape) in expected_tensors(&cfg).iter().take(6) {
        println!("  {name:<22} {shape:?}");
    }

    for (tag, precision) in [("f32", Precision::F32), ("f64", Precision::F64)] {
        let path = dir.join(format!("toy_{tag}.bin"));
        let m = model.clone().with_precision(precision);
        save_container(&m, &path)?;
        let back = load_container(&path)?;
        println!(
            "{tag}: {} bytes, round trip exact: {}",
            std::fs::metadata(&path)?.len(),
            back == m
        );
    }

    let folded = fold_rmsnorm(&model)?;
    let tokens = synthetic_stream(4096, cfg.vocab_size, 1)?;
    let a = model.forward(&tokens.ids()[..64])?;
    let b = folded.forward(&tokens.ids()[..64])?;
    println!(
        "folded: {} parameters, max logit change {:.2e}",
        folded.n_params(),
        a.max_abs_diff(&b)
    );

    let token_path = dir.join("tokens.bin");
    save_tokens(&token_path, tokens.ids())?;
    let loaded = load_tokens(&token_path, TokenFormat::BinaryU32, cfg.vocab_size)?;
    println!("token file: {} ids, identical: {}", loaded.len(), loaded.ids() == tokens.ids());
    Ok(())
}
