use rayon::prelude::*;

use super::{JunctionId, LayerWeights, Model, ModelConfig, ModelError};
use crate::linalg::{axpy, rmsnorm_in_place, Matrix};
use crate::ot::ActivationMatrix;

/// Rotates one head vector in place (half-split pairing: element `i` is
/// paired with `i + d/2`, matching common checkpoint layouts).
pub fn apply_rope(x: &mut [f64], position: usize, base: f64) {
    let half = x.len() / 2;
    let d = x.len() as f64;
    for i in 0..half {
        let inv_freq = base.powf(-2.0 * i as f64 / d);
        let (sin, cos) = (position as f64 * inv_freq).sin_cos();
        let (a, b) = (x[i], x[i + half]);
        x[i] = a * cos - b * sin;
        x[i + half] = a * sin + b * cos;
    }
}

/// RMS-normalizes each row and applies the optional scale vector.
pub(crate) fn pre_norm(x: &Matrix, scale: Option<&[f64]>, eps: f64) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        rmsnorm_in_place(row, eps);
        if let Some(g) = scale {
            row.iter_mut().zip(g).for_each(|(v, s)| *v *= s);
        }
    }
    out
}

/// Causal grouped-query attention on already-normalized input, including the
/// output projection.
pub(crate) fn attention_block(layer: &LayerWeights, cfg: &ModelConfig, normed: &Matrix) -> Matrix {
    let seq = normed.rows();
    let dh = cfg.d_head;
    let groups = cfg.n_groups();
    let mut q = normed.matmul(&layer.wq);
    let mut k = normed.matmul(&layer.wk);
    let v = normed.matmul(&layer.wv);

    for pos in 0..seq {
        for h in 0..cfg.n_heads {
            apply_rope(&mut q.row_mut(pos)[h * dh..(h + 1) * dh], pos, cfg.rope_base);
        }
        for h in 0..cfg.n_kv_heads {
            apply_rope(&mut k.row_mut(pos)[h * dh..(h + 1) * dh], pos, cfg.rope_base);
        }
    }

    let scale = 1.0 / (dh as f64).sqrt();
    let mut mixed = Matrix::zeros(seq, cfg.attn_width());
    let mut scores = vec![0.0; seq];
    for h in 0..cfg.n_heads {
        let kvh = h / groups;
        let (qs, ks) = (h * dh, kvh * dh);
        for i in 0..seq {
            let qi = &q.row(i)[qs..qs + dh];
            let mut max = f64::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate().take(i + 1) {
                let kj = &k.row(j)[ks..ks + dh];
                *s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                max = max.max(*s);
            }
            let mut total = 0.0;
            for s in scores.iter_mut().take(i + 1) {
                *s = (*s - max).exp();
                total += *s;
            }
            let out = &mut mixed.row_mut(i)[qs..qs + dh];
            for (j, s) in scores.iter().enumerate().take(i + 1) {
                axpy(s / total, &v.row(j)[ks..ks + dh], out);
            }
        }
    }
    mixed.matmul(&layer.wo)
}

/// GLU feed-forward: `(σ(x·W_gate) ⊙ (x·W_up)) · W_down`.
pub(crate) fn ffn_block(layer: &LayerWeights, cfg: &ModelConfig, normed: &Matrix) -> Matrix {
    let gate = normed.matmul(&layer.wgate);
    let up = normed.matmul(&layer.wup);
    let act = cfg.activation;
    let hidden = Matrix::from_vec(
        gate.rows(),
        gate.cols(),
        gate.as_slice()
            .iter()
            .zip(up.as_slice())
            .map(|(g, u)| act.apply(*g) * u)
            .collect(),
    );
    hidden.matmul(&layer.wdown)
}

fn residual_step(h: &Matrix, adapter: Option<&Matrix>, block_out: Matrix) -> Matrix {
    let mut out = block_out;
    match adapter {
        Some(p) => out.add_assign(&h.matmul(p)),
        None => out.add_assign(h),
    }
    out
}

impl Model {
    pub(crate) fn embed_tokens(&self, tokens: &[u32]) -> Result<Matrix, ModelError> {
        if tokens.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let vocab = self.config.vocab_size;
        let mut out = Matrix::zeros(tokens.len(), self.width());
        for (i, &t) in tokens.iter().enumerate() {
            if t as usize >= vocab {
                return Err(ModelError::TokenOutOfRange { id: t, vocab });
            }
            out.row_mut(i).copy_from_slice(self.embed.row(t as usize));
        }
        Ok(out)
    }

    /// Runs the residual stream, calling `visit` at every junction, and
    /// returns the final residual state (before the final norm). Stops early
    /// after `last` when given.
    pub(crate) fn trace(
        &self,
        tokens: &[u32],
        last: Option<JunctionId>,
        mut visit: impl FnMut(JunctionId, &Matrix),
    ) -> Result<Matrix, ModelError> {
        let cfg = &self.config;
        let stop = last.map_or(usize::MAX, JunctionId::index);
        let mut h = self.embed_tokens(tokens)?;
        visit(JunctionId::EmbeddingOut, &h);
        for (i, layer) in self.layers.iter().enumerate() {
            if 2 * i + 1 > stop {
                break;
            }
            let normed = pre_norm(&h, layer.norm_attn.as_deref(), cfg.norm_eps);
            h = residual_step(&h, layer.adapter_attn.as_ref(), attention_block(layer, cfg, &normed));
            visit(JunctionId::AttnOut(i), &h);
            if 2 * i + 2 > stop {
                break;
            }
            let normed = pre_norm(&h, layer.norm_ffn.as_deref(), cfg.norm_eps);
            h = residual_step(&h, layer.adapter_ffn.as_ref(), ffn_block(layer, cfg, &normed));
            visit(JunctionId::FfnOut(i), &h);
        }
        Ok(h)
    }

    /// Logits for every position of one sequence, shape `seq × vocab`.
    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix, ModelError> {
        let h = self.trace(tokens, None, |_, _| {})?;
        let normed = pre_norm(&h, self.norm_final.as_deref(), self.config.norm_eps);
        Ok(normed.matmul(&self.head))
    }

    /// Residual stream value at one junction, shape `seq × width`.
    pub fn junction_state(&self, tokens: &[u32], junction: JunctionId) -> Result<Matrix, ModelError> {
        if !junction.is_valid_for(&self.config) {
            return Err(ModelError::InvalidJunction {
                junction,
                n_layers: self.config.n_layers,
            });
        }
        let mut out = None;
        self.trace(tokens, Some(junction), |j, h| {
            if j == junction {
                out = Some(h.clone());
            }
        })?;
        Ok(out.expect("junction visited"))
    }
}

/// Forward pass over many sequences; results are in input order.
pub fn forward_batch(model: &Model, sequences: &[Vec<u32>]) -> Result<Vec<Matrix>, ModelError> {
    sequences.par_iter().map(|s| model.forward(s)).collect()
}

/// Post-residual stream values at `junction` for every token of every
/// sequence, laid out as neurons × tokens.
pub fn capture_activations(
    model: &Model,
    sequences: &[Vec<u32>],
    junction: JunctionId,
) -> Result<ActivationMatrix, ModelError> {
    let states: Vec<Matrix> = sequences
        .par_iter()
        .map(|s| model.junction_state(s, junction))
        .collect::<Result<_, _>>()?;
    Ok(ActivationMatrix::from_token_rows(&Matrix::vstack(&states))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rope_preserves_norm() {
        let mut x: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
        let before: f64 = x.iter().map(|v| v * v).sum();
        apply_rope(&mut x, 17, 10_000.0);
        let after: f64 = x.iter().map(|v| v * v).sum();
        assert!((before.sqrt() - after.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut x = vec![1.0, 2.0, 3.0, 4.0];
        apply_rope(&mut x, 0, 10_000.0);
        assert_eq!(x, vec![1.0, 2.0, 3.0, 4.0]);
    }
}
