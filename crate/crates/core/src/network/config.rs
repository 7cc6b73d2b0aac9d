use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Which block fills the feature-extractor slot of a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureExtractor {
    /// Point MLPs and pooled context followed by local vector attention.
    Transformer,
    /// Point MLPs and pooled context only.
    MlpOnly,
    /// Graph-convolution variant. Accepted by the parser so configs can name
    /// it, rejected by validation.
    DenseGcnStub,
}

impl FeatureExtractor {
    pub fn name(self) -> &'static str {
        match self {
            Self::Transformer => "transformer",
            Self::MlpOnly => "mlp_only",
            Self::DenseGcnStub => "dense_gcn_stub",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Self::Transformer => 0,
            Self::MlpOnly => 1,
            Self::DenseGcnStub => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Transformer),
            1 => Some(Self::MlpOnly),
            2 => Some(Self::DenseGcnStub),
            _ => None,
        }
    }
}

impl fmt::Display for FeatureExtractor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FeatureExtractor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(Self::Transformer),
            "mlp_only" => Ok(Self::MlpOnly),
            "dense_gcn_stub" | "dense_gcn" => Ok(Self::DenseGcnStub),
            other => Err(Error::arg(format!(
                "unknown feature extractor {other:?} (expected transformer, mlp_only)"
            ))),
        }
    }
}

/// Per-stage hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StageConfig {
    pub rate: usize,
    pub k_attention: usize,
    pub extractor: FeatureExtractor,
    pub use_residual: bool,
    pub use_position_encoding: bool,
}

impl StageConfig {
    pub const DEFAULT_K: usize = 16;

    pub fn with_rate(rate: usize) -> Self {
        Self {
            rate,
            k_attention: Self::DEFAULT_K,
            extractor: FeatureExtractor::Transformer,
            use_residual: true,
            use_position_encoding: true,
        }
    }

    /// Stage rates for a cascade of `count` stages: two doubling stages then
    /// refinement stages. A single stage does the whole x4.
    pub fn cascade_rates(count: usize) -> Result<Vec<usize>> {
        match count {
            0 => Err(Error::arg("a cascade needs at least one stage")),
            1 => Ok(vec![4]),
            n => {
                let mut rates = vec![2, 2];
                rates.resize(n, 1);
                Ok(rates)
            }
        }
    }

    /// The standard three-stage plan: rates 2, 2, 1 with default options.
    pub fn standard_cascade() -> Vec<StageConfig> {
        [2, 2, 1].into_iter().map(Self::with_rate).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.rate == 0 {
            return Err(Error::arg("stage rate must be at least 1"));
        }
        if self.k_attention == 0 {
            return Err(Error::arg("k_attention must be at least 1"));
        }
        if self.extractor == FeatureExtractor::DenseGcnStub {
            return Err(Error::arg(
                "feature extractor dense_gcn_stub is a placeholder and cannot be built; use transformer or mlp_only",
            ));
        }
        Ok(())
    }

    pub fn uses_attention(&self) -> bool {
        self.extractor == FeatureExtractor::Transformer
    }
}

/// Channel widths shared by every stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ChannelPlan {
    /// Per-point MLP on raw coordinates.
    pub point_mlp: [usize; 2],
    /// MLP reducing `[point features, pooled global features]`.
    pub fuse_mlp: [usize; 2],
    /// Query/key/value width inside the attention layer.
    pub attention: usize,
    /// Reduction before the transposed convolution.
    pub expand_reduce: usize,
    /// MLP after concatenating the two expansion branches.
    pub expand_mlp: [usize; 2],
    /// Hidden width of the offset regressor.
    pub offset_hidden: usize,
}

impl Default for ChannelPlan {
    fn default() -> Self {
        Self {
            point_mlp: [64, 128],
            fuse_mlp: [128, 128],
            attention: 64,
            expand_reduce: 32,
            expand_mlp: [256, 128],
            offset_hidden: 64,
        }
    }
}

impl ChannelPlan {
    pub fn feature_width(&self) -> usize {
        self.fuse_mlp[1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.as_array().contains(&0) {
            return Err(Error::arg(format!("channel plan has a zero width: {self:?}")));
        }
        Ok(())
    }

    pub(crate) fn as_array(&self) -> [usize; 9] {
        [
            self.point_mlp[0],
            self.point_mlp[1],
            self.fuse_mlp[0],
            self.fuse_mlp[1],
            self.attention,
            self.expand_reduce,
            self.expand_mlp[0],
            self.expand_mlp[1],
            self.offset_hidden,
        ]
    }

    pub(crate) fn from_array(a: [usize; 9]) -> Self {
        Self {
            point_mlp: [a[0], a[1]],
            fuse_mlp: [a[2], a[3]],
            attention: a[4],
            expand_reduce: a[5],
            expand_mlp: [a[6], a[7]],
            offset_hidden: a[8],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cascade_rates_multiply_to_four() {
        for n in 1..=5 {
            let rates = StageConfig::cascade_rates(n).unwrap();
            assert_eq!(rates.len(), n);
            assert_eq!(rates.iter().product::<usize>(), 4);
        }
        assert_eq!(StageConfig::cascade_rates(3).unwrap(), vec![2, 2, 1]);
    }

    #[test]
    fn dense_gcn_is_rejected_with_a_clear_error() {
        let mut c = StageConfig::with_rate(2);
        c.extractor = "dense_gcn".parse().unwrap();
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("dense_gcn_stub"), "{msg}");
        assert!("mystery".parse::<FeatureExtractor>().is_err());
    }
}
