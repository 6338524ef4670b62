use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Storage precision of a model's tensors. Forward passes always run in
/// `f64`; `F32` models hold values that are exactly representable in `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision `{other}` (expected f32 or f64)")),
        }
    }
}

/// Gate nonlinearity of the GLU feed-forward block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    /// tanh approximation.
    Gelu,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => x / (1.0 + (-x).exp()),
            Activation::Gelu => {
                const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
                0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
            }
        }
    }
}

fn default_rope_base() -> f64 {
    10_000.0
}

fn default_norm_eps() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f64,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default)]
    pub activation: Activation,
    /// RMSNorm scales have been absorbed into the consuming matrices.
    #[serde(default)]
    pub folded: bool,
    /// Residual-stream width of a compressed model; absent for uncompressed ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residual_width: Option<usize>,
}

impl ModelConfig {
    /// The 64-wide, 4-layer configuration used throughout the tests.
    pub fn toy() -> Self {
        Self {
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            n_kv_heads: 4,
            d_head: 16,
            d_ff: 256,
            vocab_size: 256,
            rope_base: default_rope_base(),
            norm_eps: default_norm_eps(),
            precision: Precision::F32,
            activation: Activation::Silu,
            folded: false,
            residual_width: None,
        }
    }

    pub fn attn_width(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.d_head
    }

    /// Query heads per key/value head.
    pub fn n_groups(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    /// Width of the residual stream between junctions.
    pub fn width(&self) -> usize {
        self.residual_width.unwrap_or(self.d_model)
    }

    pub fn n_junctions(&self) -> usize {
        2 * self.n_layers + 1
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let counts = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_head", self.d_head),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be >= 1")));
            }
        }
        if self.n_kv_heads > self.n_heads || !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(ModelError::InvalidConfig(format!(
                "n_kv_heads ({}) must divide n_heads ({})",
                self.n_kv_heads, self.n_heads
            )));
        }
        if !self.d_head.is_multiple_of(2) {
            return Err(ModelError::InvalidConfig("d_head must be even for rotary embeddings".into()));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 0.0) {
            return Err(ModelError::InvalidConfig("rope_base must be positive".into()));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps >= 0.0) {
            return Err(ModelError::InvalidConfig("norm_eps must be nonnegative".into()));
        }
        if let Some(w) = self.residual_width {
            if w == 0 || w > self.d_model {
                return Err(ModelError::InvalidConfig(format!(
                    "residual_width {w} must be in 1..={}",
                    self.d_model
                )));
            }
        }
        Ok(())
    }
}

/// A point on the residual stream where a block output has just been added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JunctionId {
    EmbeddingOut,
    AttnOut(usize),
    FfnOut(usize),
}

impl JunctionId {
    /// Position in the order `embedding_out, attn_out(0), ffn_out(0), attn_out(1), ...`.
    pub fn index(self) -> usize {
        match self {
            JunctionId::EmbeddingOut => 0,
            JunctionId::AttnOut(i) => 2 * i + 1,
            JunctionId::FfnOut(i) => 2 * i + 2,
        }
    }

    pub fn from_index(j: usize) -> Self {
        match j {
            0 => JunctionId::EmbeddingOut,
            j if j % 2 == 1 => JunctionId::AttnOut((j - 1) / 2),
            j => JunctionId::FfnOut((j - 2) / 2),
        }
    }

    pub fn all(n_layers: usize) -> impl Iterator<Item = JunctionId> {
        (0..2 * n_layers + 1).map(JunctionId::from_index)
    }

    pub fn is_valid_for(self, config: &ModelConfig) -> bool {
        self.index() < config.n_junctions()
    }
}

impl Ord for JunctionId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.index().cmp(&other.index())
    }
}

impl PartialOrd for JunctionId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl fmt::Display for JunctionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            JunctionId::EmbeddingOut => write!(f, "embedding_out"),
            JunctionId::AttnOut(i) => write!(f, "attn_out.{i}"),
            JunctionId::FfnOut(i) => write!(f, "ffn_out.{i}"),
        }
    }
}
