//! Runtime configuration: architecture, training, and ablation switches.
//!
//! Configs load from JSON with unknown keys rejected; every run echoes the
//! fully resolved config next to its outputs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{SpeechShape, VideoShape};
use crate::error::{RestError, Result};

#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub no_id_sink: bool,
    pub no_context_cache: bool,
    pub no_smooth: bool,
    pub no_contrastive: bool,
    pub no_asd: bool,
}

impl Ablation {
    pub fn from_flags(flags: &[String]) -> Result<Self> {
        let mut a = Ablation::default();
        for f in flags {
            match f.as_str() {
                "no_id_sink" => a.no_id_sink = true,
                "no_context_cache" => a.no_context_cache = true,
                "no_smooth" => a.no_smooth = true,
                "no_contrastive" => a.no_contrastive = true,
                "no_asd" => a.no_asd = true,
                other => {
                    return Err(RestError::Config(format!(
                        "unknown ablation flag '{other}'"
                    )))
                }
            }
        }
        Ok(a)
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub video: VideoShape,
    pub speech: SpeechShape,
    /// Transformer blocks.
    pub blocks: usize,
    /// Model width d.
    pub model_dim: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    /// Sinusoidal timestep feature width.
    pub time_dim: usize,
    /// Latent frames per chunk, including the shared boundary frame.
    pub chunk_len: usize,
    /// Joint CFG guidance scale.
    pub cfg_alpha: f32,
    /// Sampling steps.
    pub steps: usize,
    pub ablation: Ablation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk(2)
    }
}

impl ModelConfig {
    /// Desk-scale defaults: 4 blocks, d=64, 4 heads, 4x4 latent grid,
    /// 4 latent frames per chunk, 8-step sampling with alpha = 6.0.
    pub fn desk(chunks: usize) -> Self {
        let chunk_len = 4usize;
        let f_total = 1 + chunks * (chunk_len - 1);
        let video = VideoShape::desk(1 + (f_total - 1) * 4);
        let speech = SpeechShape::desk(video.frames);
        ModelConfig {
            video,
            speech,
            blocks: 4,
            model_dim: 64,
            heads: 4,
            mlp_hidden: 128,
            time_dim: 32,
            chunk_len,
            cfg_alpha: 6.0,
            steps: 8,
            ablation: Ablation::default(),
        }
    }

    /// A tiny config for gradient checks.
    pub fn tiny(blocks: usize, heads: usize, chunks: usize) -> Self {
        let chunk_len = 3usize;
        let f_total = 1 + chunks * (chunk_len - 1);
        let video = VideoShape {
            height: 8,
            width: 8,
            frames: 1 + (f_total - 1) * 2,
            ratio_h: 4,
            ratio_w: 4,
            ratio_f: 2,
            pixel_channels: 3,
            latent_channels: 4,
        };
        let speech = SpeechShape {
            samples_per_frame: 16,
            feature_frames: video.frames,
            ratio_f: 2,
            window: 2,
            feature_dim: 4,
            latent_dim: 4,
        };
        ModelConfig {
            video,
            speech,
            blocks,
            model_dim: 8,
            heads,
            mlp_hidden: 16,
            time_dim: 8,
            chunk_len,
            cfg_alpha: 6.0,
            steps: 8,
            ablation: Ablation::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.video.validate()?;
        self.speech.validate()?;
        if self.model_dim % self.heads != 0 {
            return Err(RestError::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.speech.ratio_f != self.video.ratio_f {
            return Err(RestError::Config(
                "speech and video temporal ratios must match".into(),
            ));
        }
        if self.speech.feature_frames != self.video.frames {
            return Err(RestError::Config(format!(
                "speech frames {} must match video frames {}",
                self.speech.feature_frames, self.video.frames
            )));
        }
        if self.time_dim % 2 != 0 {
            return Err(RestError::Config("time_dim must be even".into()));
        }
        Ok(())
    }

    /// Total latent frames excluding the reference slot.
    pub fn f_total(&self) -> usize {
        self.video.latent_frames()
    }

    pub fn layout(&self) -> Result<crate::chunk::ChunkLayout> {
        crate::chunk::ChunkLayout::new(self.f_total(), self.chunk_len)
    }

    /// Spatial tokens per latent frame.
    pub fn tokens_per_frame(&self) -> usize {
        self.video.latent_h() * self.video.latent_w()
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub lambda_con: f32,
    pub lambda_smo: f32,
    pub temperature: f32,
    pub steps: usize,
    pub seed: u64,
    /// Probability of zeroing the audio condition for a step.
    pub drop_audio_p: f32,
    /// Probability of zeroing the identity condition for a step.
    pub drop_id_p: f32,
    /// Global-norm gradient clip.
    pub clip_norm: f32,
    /// Use the printed (signed tensor sum) smoothness form instead of the
    /// squared second-difference divergence.
    pub literal_smoothness: bool,
    /// Include the positive pair in the contrastive denominator (standard
    /// InfoNCE) instead of the printed exclusive form.
    pub infonce_denominator: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-5,
            batch_size: 1,
            lambda_con: 1.0,
            lambda_smo: 1.0,
            temperature: 0.07,
            steps: 200,
            seed: 0,
            drop_audio_p: 0.1,
            drop_id_p: 0.1,
            clip_norm: 1.0,
            literal_smoothness: false,
            infonce_denominator: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_con < 0.0 || self.lambda_smo < 0.0 {
            return Err(RestError::Config("loss weights must be >= 0".into()));
        }
        if self.temperature <= 0.0 {
            return Err(RestError::Config("temperature must be > 0".into()));
        }
        Ok(())
    }
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| RestError::Config(format!("{}: {e}", path.display())))
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| RestError::Config(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_config_is_valid() {
        ModelConfig::desk(2).validate().unwrap();
        ModelConfig::desk(2).layout().unwrap();
    }

    #[test]
    fn tiny_config_is_valid() {
        ModelConfig::tiny(1, 1, 2).validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<Ablation>(r#"{"no_id_sink": true, "bogus": 1}"#);
        assert!(err.is_err());
    }

    #[test]
    fn ablation_flags_parse() {
        let a = Ablation::from_flags(&["no_id_sink".into(), "no_asd".into()]).unwrap();
        assert!(a.no_id_sink && a.no_asd && !a.no_smooth);
        assert!(Ablation::from_flags(&["typo".into()]).is_err());
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = ModelConfig::desk(3);
        let s = serde_json::to_string(&c).unwrap();
        let back: ModelConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
