//! Residual-width reduction: per-junction maps and their fusion into the
//! model weights.
//!
//! Every strategy produces a [`JunctionMaps`] pair `(M, M_inv)` for each of
//! the `2L + 1` residual junctions. The stream after junction `j` is carried
//! at width `d_new` as `h · M_j`; consumers of that stream read it back
//! through `M_inv_j`. Fusion is the same for every strategy, so strategies
//! differ only in how the maps are built.

mod maps;
mod pipeline;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use maps::{
    build_dotresize_maps, build_maps, build_pca_dotresize_maps, build_pca_maps, build_prune_maps,
    second_moment, select_support, JunctionMaps, MapOptions, SolverStats,
};
pub use pipeline::{compress, fuse_maps, target_width, CompressedModel, JunctionRecord, Manifest};

use crate::linalg::LinalgError;
use crate::model::{JunctionId, ModelError};
use crate::ot::{OtError, SinkhornConfig};

#[derive(Debug, thiserror::Error)]
pub enum CompressError {
    #[error("invalid compression spec: {0}")]
    InvalidSpec(String),
    #[error("no calibration sequences")]
    NoCalibration,
    #[error("model is already compressed")]
    AlreadyCompressed,
    #[error("at junction {junction}: {source}")]
    AtJunction {
        junction: JunctionId,
        #[source]
        source: Box<CompressError>,
    },
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

macro_rules! str_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    other => Err(format!("unknown {} `{other}`", stringify!($name))),
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.pad(match self {
                    $(Self::$variant => $text,)+
                })
            }
        }
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Entropic transport plan onto an ℓ2-selected support, QR-split.
    #[default]
    Dotresize,
    /// Keep the highest-ℓ2 neurons, drop the rest.
    MagnitudePrune,
    /// Project onto the leading principal directions.
    PcaSlice,
    /// Transport plan computed in the principal basis onto an ℓ1-selected support.
    PcaDotresize,
}

str_enum!(Strategy {
    Dotresize => "dotresize",
    MagnitudePrune => "magnitude_prune",
    PcaSlice => "pca_slice",
    PcaDotresize => "pca_dotresize",
});

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Dotresize,
        Strategy::MagnitudePrune,
        Strategy::PcaSlice,
        Strategy::PcaDotresize,
    ];

    pub fn default_support_norm(self) -> SupportNorm {
        match self {
            Strategy::PcaDotresize => SupportNorm::L1,
            _ => SupportNorm::L2,
        }
    }

    pub fn uses_transport(self) -> bool {
        matches!(self, Strategy::Dotresize | Strategy::PcaDotresize)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineMode {
    /// Each junction's activations come from the already-compressed prefix.
    #[default]
    Sequential,
    /// All activations come from the original model.
    OneShot,
}

str_enum!(PipelineMode {
    Sequential => "sequential",
    OneShot => "one_shot",
});

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportNorm {
    L1,
    #[default]
    L2,
}

str_enum!(SupportNorm {
    L1 => "l1",
    L2 => "l2",
});

pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionSpec {
    pub strategy: Strategy,
    /// Fraction of residual width removed, in `[0, 1)`.
    pub sparsity: f64,
    pub lambda: f64,
    /// Overrides the strategy's default support-selection norm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support_norm: Option<SupportNorm>,
    pub pipeline_mode: PipelineMode,
    /// Multiply normalized inputs by `sqrt(d_orig / d_new)` to compensate
    /// for the narrower RMS.
    #[serde(default)]
    pub rms_rescale: bool,
    /// Mean-center neurons before measuring transport distances.
    #[serde(default)]
    pub center: bool,
    /// Compress only the first `k` junctions; the rest keep identity maps.
    /// Only meaningful when the target width equals the original width.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub junction_limit: Option<usize>,
    #[serde(default)]
    pub sinkhorn: SinkhornConfig,
}

impl Default for CompressionSpec {
    fn default() -> Self {
        Self {
            strategy: Strategy::Dotresize,
            sparsity: 0.2,
            lambda: DEFAULT_LAMBDA,
            support_norm: None,
            pipeline_mode: PipelineMode::Sequential,
            rms_rescale: false,
            center: false,
            junction_limit: None,
            sinkhorn: SinkhornConfig::default(),
        }
    }
}

impl CompressionSpec {
    pub fn new(strategy: Strategy, sparsity: f64) -> Self {
        Self {
            strategy,
            sparsity,
            ..Self::default()
        }
    }

    pub fn support_norm(&self) -> SupportNorm {
        self.support_norm.unwrap_or(self.strategy.default_support_norm())
    }

    pub fn map_options(&self) -> MapOptions {
        MapOptions {
            lambda: self.lambda,
            support_norm: self.support_norm(),
            center: self.center,
            sinkhorn: self.sinkhorn,
        }
    }

    pub fn validate(&self) -> Result<(), CompressError> {
        if !(0.0..1.0).contains(&self.sparsity) {
            return Err(CompressError::InvalidSpec(format!(
                "sparsity must be in [0, 1), got {}",
                self.sparsity
            )));
        }
        if self.strategy.uses_transport() && !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(CompressError::InvalidSpec(format!(
                "lambda must be positive, got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.to_string().parse::<Strategy>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{s}\""));
        }
        assert_eq!("one_shot".parse::<PipelineMode>().unwrap(), PipelineMode::OneShot);
        assert!("foo".parse::<SupportNorm>().is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(CompressionSpec::new(Strategy::Dotresize, 0.0).validate().is_ok());
        assert!(CompressionSpec::new(Strategy::Dotresize, 1.0).validate().is_err());
        let mut s = CompressionSpec::default();
        s.lambda = 0.0;
        assert!(s.validate().is_err());
        s.strategy = Strategy::MagnitudePrune;
        assert!(s.validate().is_ok());
    }
}
