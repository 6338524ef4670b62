use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_maps, CompressError, CompressionSpec, JunctionMaps, PipelineMode, Strategy, SupportNorm};
use crate::linalg::Matrix;
use crate::model::forward::{attention_block, ffn_block, pre_norm};
use crate::model::{fold_rmsnorm, JunctionId, LayerWeights, Model, ModelConfig};
use crate::ot::ActivationMatrix;

/// `round((1 − sparsity) · d)`, at least one.
pub fn target_width(d: usize, sparsity: f64) -> usize {
    (((1.0 - sparsity) * d as f64).round() as usize).clamp(1, d)
}

/// Per-junction reproducibility record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JunctionRecord {
    pub junction: String,
    pub strategy: Strategy,
    pub d_new: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub marginal_residual: Option<f64>,
    #[serde(default)]
    pub log_domain: bool,
    #[serde(default)]
    pub retried: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub support: Option<Vec<usize>>,
    /// `‖X − X·M·M_inv‖ / ‖X‖` on this junction's calibration activations.
    pub reconstruction_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: CompressionSpec,
    pub support_norm: SupportNorm,
    pub d_orig: usize,
    pub d_new: usize,
    pub calib_sequences: usize,
    pub calib_tokens: usize,
    pub junctions: Vec<JunctionRecord>,
}

#[derive(Debug, Clone)]
pub struct CompressedModel {
    pub model: Model,
    pub maps: Vec<JunctionMaps>,
    pub manifest: Manifest,
}

/// The block whose output is added at junction `j > 0`.
fn block_output(layers: &[LayerWeights], cfg: &ModelConfig, j: usize, normed: &Matrix) -> Matrix {
    let layer = &layers[(j - 1) / 2];
    if j % 2 == 1 {
        attention_block(layer, cfg, normed)
    } else {
        ffn_block(layer, cfg, normed)
    }
}

fn activations(states: &[Matrix]) -> Result<ActivationMatrix, CompressError> {
    Ok(ActivationMatrix::from_token_rows(&Matrix::vstack(states))?)
}

/// Compresses the residual stream of `model` to `round((1 − s) · d_model)`.
///
/// Unfolded models are RMSNorm-folded first. Junctions are processed in
/// order `embedding_out, attn_out.0, ffn_out.0, …`. In sequential mode the
/// calibration stream is carried at the reduced width through the already
/// fused prefix; in one-shot mode every junction sees the original model's
/// activations. The input model is not modified.
pub fn compress(model: &Model, spec: &CompressionSpec, calib: &[Vec<u32>]) -> Result<CompressedModel, CompressError> {
    spec.validate()?;
    if calib.is_empty() {
        return Err(CompressError::NoCalibration);
    }
    if model.is_compressed() {
        return Err(CompressError::AlreadyCompressed);
    }
    let folded = if model.is_folded() {
        model.clone()
    } else {
        fold_rmsnorm(model)?
    };
    let cfg = &folded.config;
    let d = cfg.d_model;
    let d_new = target_width(d, spec.sparsity);
    let n_junctions = cfg.n_junctions();
    let limit = spec.junction_limit.unwrap_or(n_junctions).min(n_junctions);
    if limit < n_junctions && d_new != d {
        return Err(CompressError::InvalidSpec(
            "junction_limit requires a target width equal to d_model".into(),
        ));
    }
    let s = if spec.rms_rescale {
        (d as f64 / d_new as f64).sqrt()
    } else {
        1.0
    };
    let support_norm = spec.support_norm();
    let opts = spec.map_options();
    let eps = cfg.norm_eps;

    let mut states: Vec<Matrix> = calib
        .par_iter()
        .map(|seq| folded.embed_tokens(seq))
        .collect::<Result<_, _>>()?;
    let calib_tokens = states.iter().map(Matrix::rows).sum();

    let mut maps: Vec<JunctionMaps> = Vec::with_capacity(n_junctions);
    let mut records = Vec::with_capacity(n_junctions);
    for j in 0..n_junctions {
        let junction = JunctionId::from_index(j);
        if j > 0 {
            states = match spec.pipeline_mode {
                PipelineMode::Sequential => {
                    let inv_prev = &maps[j - 1].m_inv;
                    states
                        .par_iter()
                        .map(|h| {
                            let normed = pre_norm(h, None, eps).scale(s).matmul(inv_prev);
                            let mut full = h.matmul(inv_prev);
                            full.add_assign(&block_output(&folded.layers, cfg, j, &normed));
                            full
                        })
                        .collect()
                }
                PipelineMode::OneShot => states
                    .par_iter()
                    .map(|h| {
                        let mut next = block_output(&folded.layers, cfg, j, &pre_norm(h, None, eps));
                        next.add_assign(h);
                        next
                    })
                    .collect(),
            };
        }
        let acts = activations(&states)?;
        let jm = if j < limit {
            build_maps(spec.strategy, &acts, d_new, &opts).map_err(|e| {
                CompressError::AtJunction {
                    junction,
                    source: Box::new(e),
                }
            })?
        } else {
            JunctionMaps::identity(d)
        };
        records.push(JunctionRecord {
            junction: junction.to_string(),
            strategy: spec.strategy,
            d_new: jm.d_new(),
            lambda: jm.solver.as_ref().map(|st| st.lambda),
            iterations: jm.solver.as_ref().map(|st| st.iterations),
            marginal_residual: jm.solver.as_ref().map(|st| st.marginal_residual),
            log_domain: jm.solver.as_ref().is_some_and(|st| st.log_domain),
            retried: jm.solver.as_ref().is_some_and(|st| st.retried),
            support: jm.support.clone(),
            reconstruction_error: jm.reconstruction_error(&acts),
        });
        drop(acts);
        if spec.pipeline_mode == PipelineMode::Sequential {
            states = states.par_iter().map(|h| h.matmul(&jm.m)).collect();
        }
        maps.push(jm);
    }
    drop(states);

    let fused = fuse_maps(&folded, &maps, s);
    Ok(CompressedModel {
        model: fused,
        manifest: Manifest {
            spec: spec.clone(),
            support_norm,
            d_orig: d,
            d_new,
            calib_sequences: calib.len(),
            calib_tokens,
            junctions: records,
        },
        maps,
    })
}

/// Absorbs the maps into a folded model's weights.
///
/// Producers into junction `j` are post-multiplied by `M_j`, consumers of
/// junction `j` are pre-multiplied by `s · M_inv_j`, and the residual path
/// between junctions `j − 1` and `j` becomes the adapter `M_inv_{j−1} · M_j`.
/// Expects one map per junction, all of the same width.
pub fn fuse_maps(folded: &Model, maps: &[JunctionMaps], s: f64) -> Model {
    let consume = |inv: &Matrix, w: &Matrix| {
        let out = inv.matmul(w);
        if s == 1.0 {
            out
        } else {
            out.scale(s)
        }
    };
    let mut out = folded.clone();
    out.embed = folded.embed.matmul(&maps[0].m);
    for (i, (layer, src)) in out.layers.iter_mut().zip(&folded.layers).enumerate() {
        let inv_prev = &maps[2 * i].m_inv;
        let attn = &maps[2 * i + 1];
        let ffn = &maps[2 * i + 2];
        layer.wq = consume(inv_prev, &src.wq);
        layer.wk = consume(inv_prev, &src.wk);
        layer.wv = consume(inv_prev, &src.wv);
        layer.wo = src.wo.matmul(&attn.m);
        layer.adapter_attn = Some(inv_prev.matmul(&attn.m));
        layer.wup = consume(&attn.m_inv, &src.wup);
        layer.wgate = consume(&attn.m_inv, &src.wgate);
        layer.wdown = src.wdown.matmul(&ffn.m);
        layer.adapter_ffn = Some(attn.m_inv.matmul(&ffn.m));
    }
    out.head = consume(&maps[maps.len() - 1].m_inv, &folded.head);
    out.config.residual_width = Some(maps[0].d_new());
    out.round_to_precision();
    out
}
