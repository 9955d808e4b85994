use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Stride-2 conv/BN/ReLU blocks followed by global average pooling.
    SmallConv,
    /// Bottleneck residual network; the default layout is ResNet-50.
    Resnet50,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Output feature width; derived from the layout when omitted.
    pub feature_dim: Option<usize>,
    /// Channel widths of the small_conv blocks.
    pub channels: Vec<usize>,
    /// Bottleneck blocks per residual stage.
    pub resnet_blocks: Vec<usize>,
    /// Width of the residual stem and first stage.
    pub resnet_width: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Resnet50,
            feature_dim: None,
            channels: vec![32, 64, 128, 256],
            resnet_blocks: vec![3, 4, 6, 3],
            resnet_width: 64,
        }
    }
}

impl EncoderConfig {
    pub fn small_conv() -> Self {
        Self {
            kind: EncoderKind::SmallConv,
            ..Self::default()
        }
    }

    pub fn derived_feature_dim(&self) -> usize {
        match self.kind {
            EncoderKind::SmallConv => self.channels.last().copied().unwrap_or(0),
            EncoderKind::Resnet50 => self.resnet_width * (1 << self.resnet_blocks.len().saturating_sub(1)) * 4,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim.unwrap_or_else(|| self.derived_feature_dim())
    }

    pub fn input_channels(&self) -> usize {
        match self.kind {
            EncoderKind::SmallConv => 1,
            EncoderKind::Resnet50 => 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            EncoderKind::SmallConv => {
                if self.channels.is_empty() || self.channels.contains(&0) {
                    return Err(Error::validation("encoder.channels must be non-empty and positive"));
                }
            }
            EncoderKind::Resnet50 => {
                if self.resnet_blocks.is_empty() || self.resnet_blocks.contains(&0) || self.resnet_width == 0 {
                    return Err(Error::validation("encoder.resnet_blocks/resnet_width must be positive"));
                }
            }
        }
        if let Some(d) = self.feature_dim {
            if d != self.derived_feature_dim() {
                return Err(Error::validation(format!(
                    "encoder.feature_dim {d} does not match {:?} layout ({})",
                    self.kind,
                    self.derived_feature_dim()
                )));
            }
        }
        Ok(())
    }

    /// Copy with `feature_dim` filled in.
    pub fn resolved(&self) -> Self {
        Self {
            feature_dim: Some(self.feature_dim()),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MlpConfig {
    pub hidden_size: usize,
    pub output_size: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden_size: 4096,
            output_size: 256,
        }
    }
}

impl MlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_size == 0 || self.output_size == 0 {
            return Err(Error::validation("mlp.hidden_size and mlp.output_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SslHyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub tau: f64,
    /// Adds the swapped-view cross-model term. Off reproduces the plain
    /// two-term objective.
    pub symmetrize: bool,
}

impl Default for SslHyperparams {
    fn default() -> Self {
        Self {
            epochs: 80,
            batch_size: 256,
            learning_rate: 0.03,
            momentum: 0.9,
            weight_decay: 0.0004,
            tau: 0.996,
            symmetrize: false,
        }
    }
}

impl SslHyperparams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::validation(format!("hyper.tau = {} outside [0, 1]", self.tau)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::validation(format!("hyper.learning_rate = {} must be > 0", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::validation(format!("hyper.momentum = {} outside [0, 1)", self.momentum)));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(Error::validation(format!("hyper.weight_decay = {} must be >= 0", self.weight_decay)));
        }
        if self.batch_size < 2 {
            return Err(Error::validation("hyper.batch_size must be >= 2 (batch statistics)"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_dims_follow_kind() {
        assert_eq!(EncoderConfig::small_conv().feature_dim(), 256);
        assert_eq!(EncoderConfig::default().feature_dim(), 2048);
        let bad = EncoderConfig {
            feature_dim: Some(2048),
            ..EncoderConfig::small_conv()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tau_range_enforced() {
        let h = SslHyperparams {
            tau: 2.0,
            ..Default::default()
        };
        assert!(h.validate().is_err());
        assert!(SslHyperparams::default().validate().is_ok());
    }
}
