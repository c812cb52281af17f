//! Run configuration: one TOML file drives synthesis, retrieval,
//! training, evaluation and the ablation study. Unknown keys are
//! rejected, and every command writes the fully resolved config next to
//! its outputs so a run can be reproduced from that file alone.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::events::provider::LiveProviderConfig;
use crate::events::TemplateId;
use crate::fusion::FusionKind;
use crate::model::{EventMode, ModelConfig, TrainConfig};
use crate::stenc::STEncoderConfig;
use crate::synth::GeneratorConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderChoice {
    Mock,
    Live,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSection {
    /// Gaussian kernel width in km; omitted means the std of the nonzero
    /// pairwise distances.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    pub threshold: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub h_in: usize,
    pub h_out: usize,
    pub stride: usize,
    pub train_frac: f64,
    pub val_frac: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden: usize,
    pub temporal_kernel: usize,
    pub dropout_rate: f64,
    pub fusion: FusionKind,
    pub heads: usize,
    pub ffn_layers: usize,
    pub d_text: usize,
    pub event_mode: EventMode,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventsSection {
    pub template: TemplateId,
    /// Query time bucket in minutes; omitted means h_out * interval.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity_minutes: Option<u32>,
    pub provider: ProviderChoice,
    /// JSON map of canonical query key to provider response.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub live: Option<LiveProviderConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub seeds: Vec<u64>,
    /// Variant labels to run; omitted means all five.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variants: Option<Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub synth: GeneratorConfig,
    /// Scripted events JSON; omitted means an auto-generated script.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events_script: Option<PathBuf>,
    pub graph: GraphSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub events: EventsSection,
    pub study: StudySection,
}

impl Default for RunConfig {
    /// Desk-scale study defaults: 20 sensors, ten days at five minutes.
    fn default() -> Self {
        Self {
            seed: 1,
            out_dir: PathBuf::from("runs/study"),
            synth: GeneratorConfig {
                n_sensors: 20,
                n_steps: 2880,
                interval_minutes: 5,
                base_speed: 60.0,
                daily_amplitude: 15.0,
                noise_std: 0.8,
                neighbor_decay: 0.7,
                seed: 1,
                start_time: chrono::NaiveDate::from_ymd_opt(2012, 3, 1)
                    .unwrap()
                    .and_hms_opt(0, 0, 0)
                    .unwrap(),
            },
            events_script: None,
            graph: GraphSection { sigma: Some(1.0), threshold: 0.1 },
            data: DataSection { h_in: 12, h_out: 12, stride: 4, train_frac: 0.7, val_frac: 0.1 },
            model: ModelSection {
                layers: 2,
                hidden: 16,
                temporal_kernel: 3,
                dropout_rate: 0.0,
                fusion: FusionKind::CrossAttention,
                heads: 2,
                ffn_layers: 2,
                d_text: 256,
                event_mode: EventMode::Enabled,
            },
            train: TrainSection { lr: 3e-3, batch_size: 8, max_epochs: 80, patience: 20 },
            events: EventsSection {
                template: TemplateId::P1,
                granularity_minutes: Some(30),
                provider: ProviderChoice::Mock,
                fixture: None,
                live: None,
            },
            study: StudySection { seeds: vec![1, 2, 3], variants: None },
        }
    }
}

impl RunConfig {
    /// Four nodes, small widths: the gradient-check configuration.
    pub fn toy() -> Self {
        let mut cfg = Self::default();
        cfg.out_dir = PathBuf::from("runs/toy");
        cfg.synth.n_sensors = 4;
        cfg.synth.n_steps = 64;
        cfg.data = DataSection { h_in: 6, h_out: 3, stride: 1, train_frac: 0.7, val_frac: 0.1 };
        cfg.model.hidden = 8;
        cfg.model.heads = 2;
        cfg.model.temporal_kernel = 2;
        cfg.model.d_text = 16;
        cfg
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply command-line overrides, keeping seeds consistent.
    pub fn apply_overrides(
        &mut self,
        seed: Option<u64>,
        out_dir: Option<PathBuf>,
        provider: Option<ProviderChoice>,
    ) {
        if let Some(s) = seed {
            self.seed = s;
            self.synth.seed = s;
        }
        if let Some(dir) = out_dir {
            self.out_dir = dir;
        }
        if let Some(p) = provider {
            self.events.provider = p;
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            st: STEncoderConfig {
                layers: self.model.layers,
                hidden: self.model.hidden,
                temporal_kernel: self.model.temporal_kernel,
                dropout_rate: self.model.dropout_rate,
            },
            fusion_kind: self.model.fusion,
            heads: self.model.heads,
            ffn_layers: self.model.ffn_layers,
            d_text: self.model.d_text,
            h_in: self.data.h_in,
            h_out: self.data.h_out,
            event_mode: self.model.event_mode,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            lr: self.train.lr,
            batch_size: self.train.batch_size,
            max_epochs: self.train.max_epochs,
            patience: self.train.patience,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.model_config().validate()?;
        self.train_config(self.seed).validate()?;
        if !(0.0..=1.0).contains(&self.graph.threshold) {
            return Err(Error::config("graph.threshold must lie in [0, 1]"));
        }
        if self.data.stride == 0 {
            return Err(Error::config("data.stride must be positive"));
        }
        let test = 1.0 - self.data.train_frac - self.data.val_frac;
        if self.data.train_frac <= 0.0 || self.data.val_frac <= 0.0 || test <= 0.0 {
            return Err(Error::config("split fractions must be positive and sum below 1"));
        }
        if self.study.seeds.is_empty() {
            return Err(Error::config("study.seeds must be nonempty"));
        }
        if self.events.provider == ProviderChoice::Live && self.events.live.is_none() {
            return Err(Error::config("provider = live requires an [events.live] section"));
        }
        Ok(())
    }

    /// Serialized form written next to run outputs.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(format!("serialize config: {e}")))
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join("resolved_config.toml");
        std::fs::write(&path, self.to_toml()?)?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_toml().unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.seed, cfg.seed);
        assert_eq!(back.synth.n_steps, cfg.synth.n_steps);
        assert_eq!(back.model.fusion, cfg.model.fusion);
    }

    #[test]
    fn toy_config_matches_gradcheck_dimensions() {
        let cfg = RunConfig::toy();
        cfg.validate().unwrap();
        assert_eq!(cfg.synth.n_sensors, 4);
        assert_eq!(cfg.model.hidden, 8);
        assert_eq!(cfg.model.heads, 2);
        assert_eq!(cfg.data.h_in, 6);
        assert_eq!(cfg.data.h_out, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::default().to_toml().unwrap();
        text.push_str("\nunknown_key = 5\n");
        assert!(toml::from_str::<RunConfig>(&text).is_err());
        let nested = text.replace("\nunknown_key = 5\n", "") + "\n[model2]\nx = 1\n";
        assert!(toml::from_str::<RunConfig>(&nested).is_err());
    }

    #[test]
    fn unknown_nested_key_is_rejected() {
        let text = RunConfig::default().to_toml().unwrap();
        let poisoned = text.replace("[train]", "[train]\nmomentum = 0.9");
        assert!(toml::from_str::<RunConfig>(&poisoned).is_err());
    }

    #[test]
    fn seed_override_reaches_the_generator() {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides(Some(99), None, Some(ProviderChoice::Mock));
        assert_eq!(cfg.seed, 99);
        assert_eq!(cfg.synth.seed, 99);
    }

    #[test]
    fn live_provider_requires_live_section() {
        let mut cfg = RunConfig::default();
        cfg.events.provider = ProviderChoice::Live;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn resolved_config_reproduces_itself() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default();
        let path = cfg.write_resolved(dir.path()).unwrap();
        let reloaded = RunConfig::load(&path).unwrap();
        assert_eq!(reloaded.to_toml().unwrap(), cfg.to_toml().unwrap());
    }
}
