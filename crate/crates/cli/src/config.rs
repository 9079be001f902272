//! Experiment configuration: a TOML file with sections, overridable by
//! command-line flags (flags win).

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use histnorm::decode::{DecodeMode, LexiconPolicy};
use histnorm::model::{DimProfile, Preset};
use histnorm::train::TrainConfig;
use serde::{Deserialize, Serialize};

/// Name of the environment variable holding the default output directory.
pub const OUT_DIR_ENV: &str = "HISTNORM_OUT_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub paths: PathsSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub decode: DecodeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// One of the named presets (NoAtt-RNN ... BPE-Transformer).
    pub preset: String,
    /// BPE vocabulary budget; 0 selects character level.
    #[serde(default)]
    pub bpe_size: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub mode: DecodeMode,
    #[serde(default)]
    pub lexicon_policy: LexiconPolicy,
    /// `toy` (desk-scale dims and schedule) or `full` (full-size values).
    #[serde(default)]
    pub profile: Profile,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    #[default]
    Toy,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub train: PathBuf,
    pub dev: PathBuf,
    pub test: PathBuf,
    /// Defaults to `$HISTNORM_OUT_DIR/<preset>` or `runs/<preset>`.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub base_lr: Option<f64>,
    pub warmup_steps: Option<u64>,
    pub checkpoint_every: Option<u64>,
    pub patience: Option<u64>,
    pub batch_size: Option<usize>,
    pub max_updates: Option<u64>,
    pub clip_norm: Option<f64>,
    pub label_smoothing: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub num_layers: Option<usize>,
    pub embed_dim: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub num_heads: Option<usize>,
    pub ffn_dim: Option<usize>,
    pub dropout: Option<f64>,
    pub tie_output_embeddings: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecodeSection {
    pub beam_size: usize,
    pub length_norm: f64,
    pub case_fold_lexicon: bool,
}

impl Default for DecodeSection {
    fn default() -> Self {
        DecodeSection { beam_size: 5, length_norm: 0.0, case_fold_lexicon: false }
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("cannot read config {}", path.as_ref().display()))?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.as_ref().display()))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn preset(&self) -> Result<Preset> {
        Preset::parse(&self.experiment.preset).ok_or_else(|| {
            anyhow!(
                "unknown preset {:?}; expected one of {}",
                self.experiment.preset,
                Preset::ALL.map(|p| p.name()).join(", ")
            )
        })
    }

    /// Preset/BPE compatibility: subword presets need a positive budget,
    /// character presets demand 0.
    pub fn validate(&self) -> Result<()> {
        let preset = self.preset()?;
        if preset.needs_bpe() && self.experiment.bpe_size == 0 {
            bail!(
                "preset {} is subword-level and needs bpe_size > 0",
                preset.name()
            );
        }
        if !preset.needs_bpe() && self.experiment.bpe_size != 0 {
            bail!(
                "preset {} is character-level; bpe_size must be 0 (got {})",
                preset.name(),
                self.experiment.bpe_size
            );
        }
        if self.decode.beam_size == 0 {
            bail!("beam_size must be positive");
        }
        Ok(())
    }

    pub fn dim_profile(&self) -> DimProfile {
        let mut dims = match self.experiment.profile {
            Profile::Toy => DimProfile::toy(),
            Profile::Full => DimProfile::full(),
        };
        let m = &self.model;
        if let Some(v) = m.num_layers {
            dims.num_layers = v;
        }
        if let Some(v) = m.embed_dim {
            dims.embed_dim = v;
        }
        if let Some(v) = m.hidden_dim {
            dims.hidden_dim = v;
        }
        if let Some(v) = m.num_heads {
            dims.num_heads = v;
        }
        if let Some(v) = m.ffn_dim {
            dims.ffn_dim = v;
        }
        if let Some(v) = m.dropout {
            dims.dropout = v;
        }
        dims
    }

    pub fn train_config(&self) -> TrainConfig {
        let mut cfg = match self.experiment.profile {
            Profile::Toy => TrainConfig::toy(),
            Profile::Full => TrainConfig::full(),
        };
        cfg.seed = self.experiment.seed;
        let t = &self.train;
        if let Some(v) = t.base_lr {
            cfg.base_lr = v;
        }
        if let Some(v) = t.warmup_steps {
            cfg.warmup_steps = v;
        }
        if let Some(v) = t.checkpoint_every {
            cfg.checkpoint_every = v;
        }
        if let Some(v) = t.patience {
            cfg.patience = v;
        }
        if let Some(v) = t.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = t.max_updates {
            cfg.max_updates = v;
        }
        if let Some(v) = t.clip_norm {
            cfg.clip_norm = if v > 0.0 { Some(v) } else { None };
        }
        if let Some(v) = t.label_smoothing {
            cfg.label_smoothing = v;
        }
        cfg
    }

    /// Output directory: explicit path, else `$HISTNORM_OUT_DIR/<preset>`,
    /// else `runs/<preset>`.
    pub fn out_dir(&self) -> PathBuf {
        if let Some(dir) = &self.paths.out_dir {
            return dir.clone();
        }
        let base = std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs"));
        base.join(&self.experiment.preset)
    }
}
