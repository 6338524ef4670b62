//! Pre-norm decoder-only transformer: weights, forward pass, activation
//! capture, RMSNorm folding and the binary weight container.
//!
//! All weights follow the row-vector convention: an activation row `x`
//! is transformed as `x · W`, so `wq` is `d_model × (n_heads · d_head)`,
//! `wdown` is `d_ff × d_model`, `embed` is `vocab × d_model` and `head` is
//! `d_model × vocab`.

mod config;
mod container;
mod fold;
pub(crate) mod forward;
mod toy;

pub use config::{Activation, JunctionId, ModelConfig, Precision};
pub use container::{
    expected_tensors, load_container, read_container, save_container, write_container,
    ContainerError, FORMAT_VERSION, MAGIC,
};
pub use fold::fold_rmsnorm;
pub use forward::{apply_rope, capture_activations, forward_batch};
pub use toy::{generate_toy, generate_toy_with, ToyOptions};

use crate::linalg::Matrix;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("junction {junction} is not valid for a model with {n_layers} layers")]
    InvalidJunction { junction: JunctionId, n_layers: usize },
    #[error("model RMSNorms are already folded")]
    AlreadyFolded,
    #[error(transparent)]
    Activations(#[from] crate::ot::OtError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub wup: Matrix,
    pub wgate: Matrix,
    pub wdown: Matrix,
    /// RMSNorm scale before attention; `None` once folded.
    pub norm_attn: Option<Vec<f64>>,
    /// RMSNorm scale before the feed-forward block; `None` once folded.
    pub norm_ffn: Option<Vec<f64>>,
    /// Residual adapter applied to the stream entering the attention junction.
    pub adapter_attn: Option<Matrix>,
    /// Residual adapter applied to the stream entering the feed-forward junction.
    pub adapter_ffn: Option<Matrix>,
}

impl LayerWeights {
    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        let mats = [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.wup,
            &mut self.wgate,
            &mut self.wdown,
        ]
        .into_iter()
        .map(|m| m.as_mut_slice());
        let norms = [self.norm_attn.as_mut(), self.norm_ffn.as_mut()]
            .into_iter()
            .flatten()
            .map(|v| v.as_mut_slice());
        let adapters = [self.adapter_attn.as_mut(), self.adapter_ffn.as_mut()]
            .into_iter()
            .flatten()
            .map(|m| m.as_mut_slice());
        mats.chain(norms).chain(adapters)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub norm_final: Option<Vec<f64>>,
    pub head: Matrix,
}

impl Model {
    /// Current residual-stream width (the embedding width).
    pub fn width(&self) -> usize {
        self.embed.cols()
    }

    pub fn is_folded(&self) -> bool {
        self.config.folded
    }

    pub fn is_compressed(&self) -> bool {
        self.config.residual_width.is_some()
    }

    /// Number of stored scalars across every tensor.
    pub fn n_params(&self) -> usize {
        let mut total = self.embed.as_slice().len() + self.head.as_slice().len();
        total += self.norm_final.as_ref().map_or(0, Vec::len);
        for l in &self.layers {
            for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.wup, &l.wgate, &l.wdown] {
                total += m.as_slice().len();
            }
            total += l.norm_attn.as_ref().map_or(0, Vec::len);
            total += l.norm_ffn.as_ref().map_or(0, Vec::len);
            total += l.adapter_attn.as_ref().map_or(0, |m| m.as_slice().len());
            total += l.adapter_ffn.as_ref().map_or(0, |m| m.as_slice().len());
        }
        total
    }

    /// Rounds every tensor to the declared storage precision.
    pub fn round_to_precision(&mut self) {
        let p = self.config.precision;
        if p == Precision::F64 {
            return;
        }
        let round = |s: &mut [f64]| s.iter_mut().for_each(|v| *v = p.round(*v));
        round(self.embed.as_mut_slice());
        round(self.head.as_mut_slice());
        if let Some(n) = self.norm_final.as_mut() {
            round(n);
        }
        for l in &mut self.layers {
            for t in l.tensors_mut() {
                round(t);
            }
        }
    }

    /// Re-declares the storage precision and rounds accordingly.
    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.config.precision = precision;
        self.round_to_precision();
        self
    }
}
