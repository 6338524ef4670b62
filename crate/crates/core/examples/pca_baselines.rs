//! Compares the four width-reduction maps on one junction's activations of
//! a toy model, measured by reconstruction error.
//!
//! ```text
//! cargo run --release --example pca_baselines -- [junction_index]
//! ```

use dotresize::calib::{sample_calibration, synthetic_stream};
use dotresize::compress::{build_maps, target_width, MapOptions, Strategy};
use dotresize::model::{capture_activations, fold_rmsnorm, generate_toy_with, JunctionId, ModelConfig, Precision, ToyOptions};

fn main() -> anyhow::Result<()> {
    let junction = JunctionId::from_index(std::env::args().nth(1).map_or(Ok(3), |s| s.parse())?);
    let mut cfg = ModelConfig::toy();
    cfg.precision = Precision::F64;
    // Redundant neuron pairs give the merging maps something to find.
    let opts = ToyOptions {
        redundant_pairs: 8,
        ..ToyOptions::default()
    };
    let model = fold_rmsnorm(&generate_toy_with(&cfg, 0, &opts)?)?;
    let text = synthetic_stream(1 << 16, cfg.vocab_size, 2)?;
    let calib = sample_calibration(&text, 1 << 13, 128, 0)?;
    let acts = capture_activations(&model, &calib, junction)?;
    println!("{junction:?}: {} neurons x {} tokens", acts.neurons(), acts.tokens());

    println!("{:<10} {}", "sparsity", Strategy::ALL.map(|s| format!("{:>15}", s.to_string())).join(""));
    for sparsity in [0.1, 0.2, 0.3, 0.5] {
        let d_new = target_width(cfg.d_model, sparsity);
        let mut line = format!("{sparsity:<10}");
        for strategy in Strategy::ALL {
            let maps = build_maps(strategy, &acts, d_new, &MapOptions::new(0.1, strategy.default_support_norm()))?;
            line += &format!("{:>15.4}", maps.reconstruction_error(&acts));
        }
        println!("{line}");
    }
    Ok(())
}
