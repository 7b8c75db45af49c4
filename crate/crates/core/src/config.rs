//! Run configuration: model architecture, training hyperparameters, and the
//! config hash embedded in checkpoints and metric reports.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::AlignWeights;
use crate::input::PatchConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Read out the first sequence position (the leading sensor token for
    /// touch, the class token for vision).
    Cls,
    /// Mean over all positions.
    Mean,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub d: usize,
    pub heads: usize,
    pub pooling: Pooling,
    pub embed_dim: usize,
}

impl EncoderConfig {
    /// Mean pooling by default: the masked-modeling stage trains patch-token
    /// features but never reads out the leading position, so a cls readout
    /// enters stage 2 uninformative; the mean inherits stage-1 structure
    /// immediately.
    pub fn desk_default() -> Self {
        EncoderConfig { layers: 4, d: 64, heads: 4, pooling: Pooling::Mean, embed_dim: 64 }
    }
}

/// Reconstruction decoder size. Full-scale reference uses 8 layers at 512;
/// the desk default is 2 layers at 64.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub d_dec: usize,
}

impl DecoderConfig {
    pub fn desk_default() -> Self {
        DecoderConfig { layers: 2, d_dec: 64 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub patch: PatchConfig,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    /// Registered (seen) sensors, index order = token bank order.
    pub sensors: Vec<String>,
    /// Sensor tokens per sensor (L).
    pub sensor_tokens: usize,
    pub text_vocab: usize,
    pub text_dim: usize,
}

impl ModelConfig {
    pub fn desk_default(sensors: Vec<String>) -> Self {
        ModelConfig {
            patch: PatchConfig::desk_default(),
            encoder: EncoderConfig::desk_default(),
            decoder: DecoderConfig::desk_default(),
            sensors,
            sensor_tokens: 5,
            text_vocab: 4096,
            text_dim: 64,
        }
    }

    pub fn validate(&self) -> crate::Result<()> {
        self.patch.validate()?;
        if self.encoder.d % self.encoder.heads != 0 {
            return Err(crate::Error::InvalidConfig(format!(
                "encoder d {} not divisible by heads {}",
                self.encoder.d, self.encoder.heads
            )));
        }
        if self.patch.d != self.encoder.d {
            return Err(crate::Error::InvalidConfig(
                "patch projection dim must equal encoder dim".into(),
            ));
        }
        if self.sensors.is_empty() || self.sensor_tokens == 0 {
            return Err(crate::Error::InvalidConfig(
                "need at least one sensor and one sensor token".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
pub struct Ablation {
    pub no_match: bool,
    pub no_text: bool,
    pub no_vision: bool,
    pub no_dynamic: bool,
    pub no_universal_tokens: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrainStage {
    Stage1,
    Stage2,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub stage: TrainStage,
    pub epochs: usize,
    pub base_lr: f32,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    /// Mask ratio for stage-1 reconstruction.
    pub mask_ratio: f32,
    pub align: AlignWeights,
    /// Cross-sensor matching weight in the stage-2 loss.
    pub lambda_match: f32,
    /// Endpoint of the linear universal-token probability schedule.
    pub p_u_max: f32,
    pub weight_decay: f32,
    pub seed: u64,
    pub drop_last: bool,
    /// Alternate media kinds per batch (image, video, image, ...).
    pub per_batch_alternation: bool,
    pub ablation: Ablation,
}

impl TrainConfig {
    pub fn stage1_default(seed: u64) -> Self {
        TrainConfig {
            stage: TrainStage::Stage1,
            epochs: 5,
            base_lr: 2e-4,
            warmup_epochs: 1,
            batch_size: 16,
            mask_ratio: 0.75,
            align: AlignWeights::default(),
            lambda_match: 0.1,
            p_u_max: 0.75,
            weight_decay: 0.05,
            seed,
            drop_last: false,
            per_batch_alternation: true,
            ablation: Ablation::default(),
        }
    }

    pub fn stage2_default(seed: u64) -> Self {
        TrainConfig { stage: TrainStage::Stage2, epochs: 3, ..TrainConfig::stage1_default(seed) }
    }

    pub fn validate(&self) -> crate::Result<()> {
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(crate::Error::InvalidConfig("mask_ratio must be in [0,1)".into()));
        }
        if !(0.0..=1.0).contains(&self.p_u_max) {
            return Err(crate::Error::InvalidConfig("p_u_max must be in [0,1]".into()));
        }
        if self.lambda_match < 0.0 {
            return Err(crate::Error::InvalidConfig("lambda_match must be >= 0".into()));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(crate::Error::InvalidConfig("batch_size/epochs must be positive".into()));
        }
        self.align.validate()
    }
}

/// Everything a run needs; serialized into checkpoints and reports.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    /// Stable hex hash of the canonical JSON serialization.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        let mut hex = String::with_capacity(16);
        for b in digest.iter().take(8) {
            hex.push_str(&format!("{b:02x}"));
        }
        hex
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let cfg = RunConfig {
            model: ModelConfig::desk_default(vec!["gelsight".into()]),
            train: TrainConfig::stage1_default(7),
        };
        let h1 = cfg.config_hash();
        let h2 = cfg.config_hash();
        assert_eq!(h1, h2);
        assert_eq!(h1.len(), 16);

        let mut other = cfg.clone();
        other.train.seed = 8;
        assert_ne!(h1, other.config_hash());
    }
}
