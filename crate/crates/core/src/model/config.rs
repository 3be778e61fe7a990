use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::UpsampleMethod;

/// Inputs concatenated in front of the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionInput {
    /// Output of the contextual module: `concat(Feature1, fused)`.
    Context,
    Feature2,
    /// Feature3 after upsampling to stride 8.
    Feature3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_channels: usize,
    pub use_contextual_module: bool,
    pub use_inception_blocks: bool,
    pub contextual_scales: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    pub feature3_upsample: UpsampleMethod,
    /// Scales every channel count of the network; 1.0 is the full model.
    pub width_multiplier: f64,
    pub fusion_order: Vec<FusionInput>,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_channels: 3,
            use_contextual_module: true,
            use_inception_blocks: true,
            contextual_scales: vec![1, 2, 3, 6],
            decoder_channels: vec![256, 128, 64],
            feature3_upsample: UpsampleMethod::Bilinear,
            width_multiplier: 1.0,
            fusion_order: vec![FusionInput::Context, FusionInput::Feature2, FusionInput::Feature3],
            seed: 0,
        }
    }
}

/// The two ablations of the component analysis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    NoContext,
    NoInception,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no-context" => Ok(Ablation::NoContext),
            "no-inception" => Ok(Ablation::NoInception),
            other => Err(Error::Config(format!("unknown ablation {other:?} (expected no-context or no-inception)"))),
        }
    }
}

impl ModelConfig {
    pub fn with_ablation(mut self, ablation: Option<Ablation>) -> Self {
        match ablation {
            Some(Ablation::NoContext) => self.use_contextual_module = false,
            Some(Ablation::NoInception) => self.use_inception_blocks = false,
            None => {}
        }
        self
    }

    pub fn is_ablation(&self) -> bool {
        !(self.use_contextual_module && self.use_inception_blocks)
    }

    /// Channel count after width scaling.
    pub fn channels(&self, full: usize) -> usize {
        ((full as f64 * self.width_multiplier).round() as usize).max(1)
    }

    /// Fusion inputs that are actually present, in configured order.
    pub fn active_fusion_inputs(&self) -> Vec<FusionInput> {
        self.fusion_order
            .iter()
            .copied()
            .filter(|f| match f {
                FusionInput::Context => self.use_contextual_module,
                FusionInput::Feature2 | FusionInput::Feature3 => self.use_inception_blocks,
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::Config("input_channels must be positive".into()));
        }
        if self.contextual_scales.is_empty() || self.contextual_scales[0] < 1 {
            return Err(Error::Config("contextual scales must be non-empty and at least 1".into()));
        }
        if self.contextual_scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "contextual scales must be strictly increasing, got {:?}",
                self.contextual_scales
            )));
        }
        if self.decoder_channels.is_empty() || self.decoder_channels.contains(&0) {
            return Err(Error::Config("decoder channel plan must be non-empty and positive".into()));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Config(format!("width multiplier must be positive, got {}", self.width_multiplier)));
        }
        let mut seen = self.fusion_order.clone();
        seen.sort_by_key(|f| *f as u8);
        seen.dedup();
        if seen.len() != 3 || self.fusion_order.len() != 3 {
            return Err(Error::Config(format!(
                "fusion order must list context, feature2 and feature3 once each, got {:?}",
                self.fusion_order
            )));
        }
        if !self.use_contextual_module && !self.use_inception_blocks {
            return Err(Error::Config(
                "both context paths are disabled, leaving nothing to fuse for the decoder".into(),
            ));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("model config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_and_full() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert!(!c.is_ablation());
        assert_eq!(c.channels(192), 192);
    }

    #[test]
    fn scales_must_increase() {
        let c = ModelConfig { contextual_scales: vec![1, 3, 3], ..Default::default() };
        assert!(c.validate().is_err());
        let c = ModelConfig { contextual_scales: vec![0, 2], ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn both_ablations_rejected() {
        let c = ModelConfig::default().with_ablation(Some(Ablation::NoContext)).with_ablation(Some(Ablation::NoInception));
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn json_round_trip() {
        let c = ModelConfig { width_multiplier: 0.25, seed: 9, ..Default::default() };
        assert_eq!(ModelConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
