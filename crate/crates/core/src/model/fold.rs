use super::{Model, ModelError};

/// Absorbs every RMSNorm scale vector into the matrices that consume the
/// norm's output, leaving unweighted norms.
///
/// `x̂ · diag(γ) · W = x̂ · (diag(γ) · W)`, so each consumer's rows are scaled
/// by `γ`: `wq`/`wk`/`wv` for the attention norm, `wup`/`wgate` for the
/// feed-forward norm and `head` for the final norm.
pub fn fold_rmsnorm(model: &Model) -> Result<Model, ModelError> {
    if model.config.folded {
        return Err(ModelError::AlreadyFolded);
    }
    let mut out = model.clone();
    for layer in &mut out.layers {
        if let Some(g) = layer.norm_attn.take() {
            layer.wq = layer.wq.scale_rows(&g);
            layer.wk = layer.wk.scale_rows(&g);
            layer.wv = layer.wv.scale_rows(&g);
        }
        if let Some(g) = layer.norm_ffn.take() {
            layer.wup = layer.wup.scale_rows(&g);
            layer.wgate = layer.wgate.scale_rows(&g);
        }
    }
    if let Some(g) = out.norm_final.take() {
        out.head = out.head.scale_rows(&g);
    }
    out.config.folded = true;
    out.round_to_precision();
    Ok(out)
}
