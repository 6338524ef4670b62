//! Perplexity, divergence from the original model, parameter accounting,
//! timing and grid sweeps.

mod metrics;
mod sweep;

use serde::{Deserialize, Serialize};

pub use metrics::{
    argmax, divergence, kl_from_logits, log_softmax, ms_per_token, param_count, perplexity, Divergence,
    ParamReport, Reference,
};
pub use sweep::{sweep, CellResult, SweepCell, SweepConfig, SweepGrid, CSV_HEADER};

use crate::calib::CalibError;
use crate::compress::{CompressError, CompressionSpec, Manifest};
use crate::model::{Model, ModelError};

/// Version of the JSON report layout.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("stream of {len} tokens is too short for windows of {seq_len} (need at least seq_len + 1)")]
    StreamTooShort { len: usize, seq_len: usize },
    #[error("report field `{0}` is not finite")]
    NonFinite(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Compress(#[from] CompressError),
    #[error(transparent)]
    Calib(#[from] CalibError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JunctionError {
    pub junction: String,
    pub reconstruction_error: f64,
}

/// One evaluation run, serialized as a single JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub original: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub compressed: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub spec: Option<CompressionSpec>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calib_budget: Option<usize>,
    pub seq_len: usize,
    pub eval_tokens: usize,
    /// Perplexity of the evaluated (compressed, when present) model.
    pub perplexity: f64,
    pub perplexity_original: f64,
    /// Mean `KL(original ‖ compressed)`; zero for a single-model run.
    pub kl: f64,
    pub top1: f64,
    pub params: ParamReport,
    /// Coarse single-thread timing; excluded from determinism checks.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ms_per_token: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub junctions: Vec<JunctionError>,
}

impl EvalReport {
    /// Fails on any non-finite metric.
    pub fn check(&self) -> Result<(), EvalError> {
        let fields = [
            ("perplexity", self.perplexity),
            ("perplexity_original", self.perplexity_original),
            ("kl", self.kl),
            ("top1", self.top1),
            ("params.ratio", self.params.ratio),
            ("ms_per_token", self.ms_per_token.unwrap_or(0.0)),
        ];
        for (name, v) in fields {
            if !v.is_finite() {
                return Err(EvalError::NonFinite(name));
            }
        }
        if self.junctions.iter().any(|j| !j.reconstruction_error.is_finite()) {
            return Err(EvalError::NonFinite("junctions.reconstruction_error"));
        }
        Ok(())
    }

    /// Same report with wall-clock fields cleared.
    pub fn without_timing(&self) -> Self {
        Self {
            ms_per_token: None,
            ..self.clone()
        }
    }
}

/// Evaluates `candidate` (or the reference itself) against a precomputed
/// reference. Timing is measured only when `timing` is set.
pub fn evaluate(
    original: &Model,
    reference: &Reference,
    candidate: Option<(&Model, Option<&Manifest>)>,
    seq_len: usize,
    timing: bool,
) -> Result<EvalReport, EvalError> {
    let (model, manifest) = candidate.unwrap_or((original, None));
    let (ppl, div) = match candidate {
        Some((m, _)) => reference.compare(m)?,
        None => (reference.perplexity, Divergence { kl: 0.0, top1: 1.0 }),
    };
    let ms = if timing {
        Some(ms_per_token(model, reference.windows())?)
    } else {
        None
    };
    let report = EvalReport {
        schema_version: SCHEMA_VERSION,
        original: String::new(),
        compressed: None,
        spec: manifest.map(|m| m.spec.clone()),
        seed: None,
        calib_budget: None,
        seq_len,
        eval_tokens: reference.windows().iter().map(Vec::len).sum(),
        perplexity: ppl,
        perplexity_original: reference.perplexity,
        kl: div.kl,
        top1: div.top1,
        params: ParamReport::new(&original.config, &model.config),
        ms_per_token: ms,
        junctions: manifest
            .map(|m| {
                m.junctions
                    .iter()
                    .map(|j| JunctionError {
                        junction: j.junction.clone(),
                        reconstruction_error: j.reconstruction_error,
                    })
                    .collect()
            })
            .unwrap_or_default(),
    };
    report.check()?;
    Ok(report)
}
