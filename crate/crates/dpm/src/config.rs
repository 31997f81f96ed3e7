//! One JSON config drives every command; unknown keys are rejected so a
//! typo never silently falls back to a default.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::SynthSpec;
use crate::encoder::EncoderConfig;
use crate::error::DpmError;
use crate::eval::EvalOptions;
use crate::hmg::MaskGeneratorConfig;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub hmg: MaskGeneratorConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub synth: SynthSpec,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), DpmError> {
        self.model_config().validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        if self.encoder.cameras < self.synth.cameras {
            return Err(DpmError::invalid(
                "cameras",
                format!(
                    "encoder supports {} cameras but the dataset uses {}",
                    self.encoder.cameras, self.synth.cameras
                ),
            ));
        }
        if self.encoder.image_h != self.synth.image_h
            || self.encoder.image_w != self.synth.image_w
            || self.encoder.channels != self.synth.channels
        {
            return Err(DpmError::invalid(
                "image",
                format!(
                    "encoder expects {}x{}x{}, dataset provides {}x{}x{}",
                    self.encoder.image_h,
                    self.encoder.image_w,
                    self.encoder.channels,
                    self.synth.image_h,
                    self.synth.image_w,
                    self.synth.channels
                ),
            ));
        }
        Ok(())
    }

    /// The model view of this config; classes come from the dataset spec.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoder.clone(),
            hmg: self.hmg.clone(),
            weights: self.weights.clone(),
            classes: self.synth.classes,
        }
    }

    pub fn load(path: &Path) -> Result<Self, DpmError> {
        let text = fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| DpmError::invalid("config", format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), DpmError> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| DpmError::Format(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }
}
