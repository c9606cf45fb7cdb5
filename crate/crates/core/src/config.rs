//! Run configuration: one TOML document of flat tables layered over a
//! named preset. Precedence, lowest first: preset, file, command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Layout, SyntheticConfig};
use crate::dcp::DcpParams;
use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::metrics::MetricParams;
use crate::networks::{CriticSpec, GeneratorSpec};
use crate::trainer::TrainConfig;
use crate::vgg::VggConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 256×256, full-width networks, 1000 + 100 epochs.
    Paper,
    /// 64×64 synthetic data with narrow networks; minutes on one CPU core.
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected paper or desk)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root directory or manifest file.
    pub dataset: Option<PathBuf>,
    pub layout: Layout,
    pub test_ratio: f64,
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            layout: Layout::default(),
            test_ratio: 0.2,
            split_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub n_critic: u32,
    pub batch_size: usize,
    pub epochs: u64,
    pub transfer_epochs: u64,
    pub max_generator_steps: Option<u64>,
    pub image_size: usize,
    pub checkpoint_interval: u64,
    pub cache_budget_mb: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            n_critic: t.n_critic,
            batch_size: t.batch_size,
            epochs: 1000,
            transfer_epochs: 100,
            max_generator_steps: None,
            image_size: t.image_size,
            checkpoint_interval: 100,
            cache_budget_mb: t.cache_budget_mb,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub train: TrainSection,
    pub loss: LossWeights,
    pub generator: GeneratorSpec,
    pub critic: CriticSpec,
    pub vgg: VggConfig,
    pub dcp: DcpParams,
    pub metrics: MetricParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Paper)
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let base = Self {
            preset,
            seed: 0,
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            train: TrainSection::default(),
            loss: LossWeights::default(),
            generator: GeneratorSpec::default(),
            critic: CriticSpec::default(),
            vgg: VggConfig::default(),
            dcp: DcpParams::default(),
            metrics: MetricParams::default(),
        };
        match preset {
            Preset::Paper => base,
            Preset::Desk => Self {
                train: TrainSection {
                    epochs: 50,
                    transfer_epochs: 10,
                    image_size: 64,
                    checkpoint_interval: 500,
                    ..base.train
                },
                generator: GeneratorSpec {
                    base_width: 16,
                    depth: 6,
                    ..base.generator
                },
                critic: CriticSpec {
                    widths: vec![16, 32, 64, 64],
                    ..base.critic
                },
                vgg: VggConfig {
                    width_divisor: 8,
                    ..base.vgg
                },
                ..base
            },
        }
    }

    /// Parses a TOML document over its `preset` (paper when absent).
    pub fn from_toml(text: &str) -> Result<Self> {
        let doc: toml::Table = text.parse().map_err(|e| Error::Config(format!("invalid TOML: {e}")))?;
        let preset = match doc.get("preset") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(other) => return Err(Error::Config(format!("preset must be a string, got {other}"))),
            None => Preset::Paper,
        };
        let mut merged = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut merged, doc);
        let cfg: Self = toml::Value::Table(merged)
            .try_into()
            .map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.data.test_ratio > 0.0 && self.data.test_ratio < 1.0) {
            return Err(Error::invalid(format!("test ratio must lie in (0, 1), got {}", self.data.test_ratio)));
        }
        self.synthetic.validate()?;
        self.dcp.validate()?;
        self.metrics.validate()?;
        if self.train.epochs == 0 {
            return Err(Error::invalid("epochs must be >= 1"));
        }
        self.train_config(None).validate()
    }

    pub fn train_config(&self, checkpoint_dir: Option<PathBuf>) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            n_critic: t.n_critic,
            batch_size: t.batch_size,
            epochs: t.epochs,
            max_generator_steps: t.max_generator_steps,
            seed: self.seed,
            image_size: t.image_size,
            weights: self.loss,
            generator: self.generator.clone(),
            critic: self.critic.clone(),
            vgg: self.vgg.clone(),
            checkpoint_dir,
            checkpoint_interval: t.checkpoint_interval,
            cache_budget_mb: t.cache_budget_mb,
        }
    }

    /// The same run configured for a transfer stage.
    pub fn transfer_config(&self, checkpoint_dir: Option<PathBuf>) -> TrainConfig {
        TrainConfig {
            epochs: self.train.transfer_epochs,
            ..self.train_config(checkpoint_dir)
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid_and_roundtrip() {
        for p in [Preset::Paper, Preset::Desk] {
            let cfg = RunConfig::preset(p);
            cfg.validate().unwrap();
            assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        }
    }

    #[test]
    fn file_values_override_preset() {
        let cfg = RunConfig::from_toml("preset = \"desk\"\nseed = 5\n[train]\nbatch_size = 2\n").unwrap();
        assert_eq!(cfg.seed, 5);
        assert_eq!(cfg.train.batch_size, 2);
        assert_eq!(cfg.train.image_size, 64);
        assert_eq!(cfg.generator.base_width, 16);
    }

    #[test]
    fn paper_preset_matches_published_schedule() {
        let cfg = RunConfig::preset(Preset::Paper);
        assert_eq!(cfg.train.epochs, 1000);
        assert_eq!(cfg.train.transfer_epochs, 100);
        assert_eq!(cfg.train.image_size, 256);
        assert_eq!(cfg.train.n_critic, 5);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(RunConfig::from_toml("[train]\nbatch_sise = 2\n"), Err(Error::Config(_))));
        assert!(RunConfig::from_toml("[train]\nn_critic = 0\n").is_err());
        assert!(RunConfig::from_toml("[data]\ntest_ratio = 1.5\n").is_err());
        assert!(RunConfig::from_toml("preset = \"huge\"\n").is_err());
    }
}
