//! Parameter counts across residual widths, including the adapter overhead
//! that makes light compression a net loss.
//!
//! ```text
//! cargo run --release --example param_accounting
//! ```

use dotresize::compress::target_width;
use dotresize::eval::ParamReport;
use dotresize::model::ModelConfig;

fn main() {
    let cfg = ModelConfig::toy();
    let base = ParamReport::at_width(&cfg, cfg.d_model);
    println!("folded original: {} parameters", base.original);
    println!("break-even width: {:?}", base.break_even_width);
    println!("{:>9} {:>6} {:>11} {:>9} {:>7}", "sparsity", "width", "compressed", "savings", "ratio");
    for sparsity in [0.0, 0.05, 0.1, 0.15, 0.2, 0.3, 0.4, 0.5] {
        let w = target_width(cfg.d_model, sparsity);
        let r = ParamReport::at_width(&cfg, w);
        println!(
            "{sparsity:>9} {w:>6} {:>11} {:>+9} {:>7.4}{}",
            r.compressed,
            r.savings,
            r.ratio,
            if r.negative_savings { "  adapters negate savings" } else { "" }
        );
    }
}
