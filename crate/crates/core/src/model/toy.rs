use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{LayerWeights, Model, ModelConfig, ModelError};
use crate::linalg::Matrix;

/// Extra structure for seeded toy models.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ToyOptions {
    /// Number of residual neuron pairs `(a, b)` whose producer columns are
    /// made near-duplicates (`col_b = col_a + 0.1 · noise`), so those
    /// neurons carry almost the same signal at every junction.
    pub redundant_pairs: usize,
    /// Spread of the RMSNorm scales around one.
    pub norm_jitter: f64,
}

const EMBED_SCALE: f64 = 0.02;
const REDUNDANT_NOISE: f64 = 0.1;

/// Deterministic random model: matrices are standard normal scaled by
/// `1/sqrt(fan_in)`, embeddings by 0.02, and norm scales are `1 + 0.1·N(0,1)`.
pub fn generate_toy(config: &ModelConfig, seed: u64) -> Result<Model, ModelError> {
    generate_toy_with(
        config,
        seed,
        &ToyOptions {
            redundant_pairs: 0,
            norm_jitter: 0.1,
        },
    )
}

pub fn generate_toy_with(config: &ModelConfig, seed: u64, opts: &ToyOptions) -> Result<Model, ModelError> {
    let mut config = config.clone();
    config.folded = false;
    config.residual_width = None;
    config.validate()?;
    if 2 * opts.redundant_pairs > config.d_model {
        return Err(ModelError::InvalidConfig(format!(
            "{} redundant pairs do not fit in d_model {}",
            opts.redundant_pairs, config.d_model
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let dense = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
        Matrix::random_normal(rows, cols, 1.0 / (rows as f64).sqrt(), rng)
    };
    let norm = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                1.0 + opts.norm_jitter * z
            })
            .collect()
    };

    let embed = Matrix::random_normal(config.vocab_size, d, EMBED_SCALE, &mut rng);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerWeights {
            wq: dense(d, config.attn_width(), &mut rng),
            wk: dense(d, config.kv_width(), &mut rng),
            wv: dense(d, config.kv_width(), &mut rng),
            wo: dense(config.attn_width(), d, &mut rng),
            wup: dense(d, config.d_ff, &mut rng),
            wgate: dense(d, config.d_ff, &mut rng),
            wdown: dense(config.d_ff, d, &mut rng),
            norm_attn: Some(norm(&mut rng)),
            norm_ffn: Some(norm(&mut rng)),
            adapter_attn: None,
            adapter_ffn: None,
        });
    }
    let norm_final = Some(norm(&mut rng));
    let head = dense(d, config.vocab_size, &mut rng);

    let mut model = Model {
        config,
        embed,
        layers,
        norm_final,
        head,
    };
    if opts.redundant_pairs > 0 {
        // Pairs (0, 1), (2, 3), ...: every producer of the residual stream
        // writes near-identical values into both members.
        let tie = |m: &mut Matrix| {
            for p in 0..opts.redundant_pairs {
                let (a, b) = (2 * p, 2 * p + 1);
                for i in 0..m.rows() {
                    m[(i, b)] = m[(i, a)] + REDUNDANT_NOISE * m[(i, b)];
                }
            }
        };
        tie(&mut model.embed);
        for l in &mut model.layers {
            tie(&mut l.wo);
            tie(&mut l.wdown);
        }
    }
    model.round_to_precision();
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_generation_is_deterministic() {
        let cfg = ModelConfig::toy();
        assert_eq!(generate_toy(&cfg, 7).unwrap(), generate_toy(&cfg, 7).unwrap());
        assert_ne!(generate_toy(&cfg, 7).unwrap(), generate_toy(&cfg, 8).unwrap());
    }

    #[test]
    fn redundant_pairs_are_correlated() {
        let cfg = ModelConfig::toy();
        let opts = ToyOptions {
            redundant_pairs: 3,
            norm_jitter: 0.0,
        };
        let m = generate_toy_with(&cfg, 1, &opts).unwrap();
        let a = m.embed.column(0);
        let b = m.embed.column(1);
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(diff < 0.2 * norm);
    }

    #[test]
    fn too_many_pairs_rejected() {
        let cfg = ModelConfig::toy();
        let opts = ToyOptions {
            redundant_pairs: 40,
            norm_jitter: 0.0,
        };
        assert!(generate_toy_with(&cfg, 1, &opts).is_err());
    }
}
