//! Entropic transport plans between a few neurons and a retained subset,
//! from near-assignment to near-product coupling.
//!
//! ```text
//! cargo run --release --example sinkhorn_plans
//! ```

use dotresize::linalg::Matrix;
use dotresize::ot::{cost_matrix, rescale_rows, sinkhorn, uniform, ActivationMatrix, SinkhornConfig};

fn show(m: &Matrix) {
    for i in 0..m.rows() {
        let row: Vec<String> = m.row(i).iter().map(|v| format!("{v:6.3}")).collect();
        println!("    [{}]", row.join(" "));
    }
}

fn main() -> anyhow::Result<()> {
    // Five neurons over six tokens; neuron 3 echoes neuron 0, neuron 4 echoes neuron 2.
    let acts = ActivationMatrix::new(Matrix::from_rows(&[
        [1.0, 0.5, -0.2, 0.9, 0.0, 0.3],
        [-0.4, 1.2, 0.8, -0.1, 0.6, -0.9],
        [0.2, -0.7, 1.1, 0.4, -0.5, 0.8],
        [0.9, 0.6, -0.1, 1.0, 0.1, 0.2],
        [0.3, -0.6, 1.0, 0.5, -0.4, 0.9],
    ]))?;
    let support = [0, 1, 2];
    let cost = cost_matrix(&acts, &support)?;
    println!("ℓ1 cost to the retained neurons {support:?}:");
    show(&cost);

    let (a, b) = (uniform(5), uniform(3));
    for lambda in [0.01, 0.1, 1.0, 10.0] {
        let plan = sinkhorn(&cost, &a, &b, lambda, &SinkhornConfig::default())?;
        println!(
            "λ = {lambda}: {} iterations, {} domain, residual {:.1e}, entropy {:.4}",
            plan.iterations,
            if plan.log_domain { "log" } else { "linear" },
            plan.marginal_residual,
            plan.entropy()
        );
        println!("  row-rescaled map:");
        show(&rescale_rows(&plan));
    }

    let c = Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]);
    let lambda: f64 = 0.1;
    let plan = sinkhorn(&c, &uniform(2), &uniform(2), lambda, &SinkhornConfig::default())?;
    println!(
        "2x2 check: T[0][0] = {:.12}, closed form {:.12}",
        plan.plan[(0, 0)],
        0.5 / (1.0 + (-1.0 / lambda).exp())
    );
    Ok(())
}
