//! Experiment configuration file: one JSON object with optional blocks.
//! Omitted keys take their documented defaults; unknown keys are errors.

use std::path::Path;

use anyhow::{bail, Context, Result};
use gxssl_core::augment::AugmentConfig;
use gxssl_core::evaluate::FinetuneConfig;
use gxssl_core::patcher::TilingSpec;
use gxssl_core::ssl::{EncoderConfig, MlpConfig, SslHyperparams};
use gxssl_core::synthgen::SynthConfig;
use serde::{Deserialize, Serialize};

fn default_sigma() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub mlp: MlpConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
    #[serde(default)]
    pub hyper: SslHyperparams,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default = "TilingSpec::paper")]
    pub tiling: TilingSpec,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            mlp: MlpConfig::default(),
            augment: AugmentConfig::default(),
            hyper: SslHyperparams::default(),
            finetune: FinetuneConfig::default(),
            tiling: TilingSpec::paper(),
            sigma: default_sigma(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    /// Desk-scale preset: small_conv encoder, 64-pixel patches on a 32 grid,
    /// 32-pixel views, batch 64, 30 epochs.
    pub fn synthetic() -> Self {
        Self {
            encoder: EncoderConfig::small_conv(),
            mlp: MlpConfig {
                hidden_size: 512,
                output_size: 128,
            },
            augment: AugmentConfig::synthetic(),
            hyper: SslHyperparams {
                epochs: 30,
                batch_size: 64,
                ..SslHyperparams::default()
            },
            tiling: TilingSpec::synthetic(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate().context("encoder")?;
        self.mlp.validate().context("mlp")?;
        self.augment.validate().context("augment")?;
        self.hyper.validate().context("hyper")?;
        self.finetune.validate().context("finetune")?;
        self.tiling.validate().context("tiling")?;
        if !(0.0..=1.0).contains(&self.sigma) {
            bail!("sigma = {} outside [0, 1]", self.sigma);
        }
        Ok(())
    }

    /// Every derived field made explicit. Resolving twice changes nothing.
    pub fn resolved(&self) -> Self {
        Self {
            encoder: self.encoder.resolved(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Parses config text, naming the offending key on type errors.
pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        anyhow::anyhow!("config key `{path}`: {}", e.into_inner())
    })?;
    cfg.validate()?;
    Ok(cfg.resolved())
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    parse_config_str(&text).with_context(|| format!("in config {}", path.display()))
}

/// Generator settings for `synth --config`.
pub fn parse_synth_config(path: &Path) -> Result<SynthConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let cfg: SynthConfig = serde_path_to_error::deserialize(de)
        .map_err(|e| anyhow::anyhow!("synth config key `{}`: {}", e.path(), e.inner()))
        .with_context(|| format!("in config {}", path.display()))?;
    cfg.validate()?;
    Ok(cfg)
}
