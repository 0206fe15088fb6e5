//! The TOML run configuration. Every key is optional; flags given on the
//! command line are applied on top of the file (see `main.rs`).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use depsev::augment::{AugmentOp, AugmentationPlan};
use depsev::corpus::Label;
use depsev::features::FeaturePreset;
use depsev::model::{HeadKind, ModelConfig};
use depsev::seed::derive_seed;
use depsev::textprep::{CleaningConfig, CleaningStep, ContractionTable};
use depsev::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::errors::invalid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Top-level seed; every stage seed is derived from it.
    pub seed: u64,
    pub data: DataConfig,
    pub prep: PrepConfig,
    pub encoder: EncoderConfig,
    pub features: FeaturesConfig,
    pub augment: AugmentConfig,
    pub model: ModelSection,
    pub trainer: TrainerSection,
    pub ablate: AblateConfig,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 0,
            data: DataConfig::default(),
            prep: PrepConfig::default(),
            encoder: EncoderConfig::default(),
            features: FeaturesConfig::default(),
            augment: AugmentConfig::default(),
            model: ModelSection::default(),
            trainer: TrainerSection::default(),
            ablate: AblateConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Raw dataset CSV (`text,label`).
    pub path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepConfig {
    pub steps: Vec<String>,
    /// Contraction table CSV replacing the shipped one.
    pub contractions: Option<PathBuf>,
}

impl Default for PrepConfig {
    fn default() -> Self {
        PrepConfig {
            steps: CleaningStep::CANONICAL.iter().map(|s| s.name().to_string()).collect(),
            contractions: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub model_id: String,
    pub max_tokens: usize,
    /// Build a randomly initialised encoder of the preset shape when no
    /// local checkpoint exists.
    pub allow_untrained: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            model_id: depsev::encoder::DEFAULT_MODEL_ID.into(),
            max_tokens: depsev::encoder::DEFAULT_MAX_TOKENS,
            allow_untrained: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesConfig {
    pub preset: String,
    /// `stub`, `precomputed:<csv>`, or a checkpoint id/directory.
    pub emotion_model_id: String,
    pub sentiment_model_id: String,
    /// Medication list replacing the shipped one.
    pub lexicon: Option<PathBuf>,
}

impl Default for FeaturesConfig {
    fn default() -> Self {
        FeaturesConfig {
            preset: FeaturePreset::EmotionSentiment.name().into(),
            emotion_model_id: "stub".into(),
            sentiment_model_id: "stub".into(),
            lexicon: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// `lexicon` for the offline predictor, otherwise a masked-LM
    /// checkpoint id/directory.
    pub predictor_model_id: String,
    /// Label name → number of posts to sample.
    pub per_class_samples: BTreeMap<String, usize>,
    pub ops: Vec<AugmentOp>,
    pub rate: f64,
    pub copies_per_sample: usize,
    /// Augment only each run's training split instead of the whole corpus
    /// before splitting.
    pub train_only_augmentation: bool,
    /// Whether `train` uses the augmented corpus.
    pub enabled: bool,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        let plan = AugmentationPlan::default();
        AugmentConfig {
            predictor_model_id: "bert-base-uncased".into(),
            per_class_samples: plan
                .per_class_samples
                .iter()
                .map(|(l, n)| (l.name().to_string(), *n))
                .collect(),
            ops: plan.ops.into_iter().collect(),
            rate: plan.rate,
            copies_per_sample: plan.copies_per_sample,
            train_only_augmentation: false,
            enabled: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub k: usize,
    pub head: String,
    pub head_hidden: usize,
    pub dropout: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        ModelSection {
            k: m.k,
            head: m.head.name().into(),
            head_hidden: m.head_hidden,
            dropout: m.dropout,
        }
    }
}

/// Trainer keys; `seeds` defaults to `seed, seed + 1, ...` (one per run).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub train_fraction: f64,
    pub runs: usize,
    pub seeds: Option<Vec<u64>>,
    pub fixed_split: bool,
    pub select_best_epoch: bool,
    pub freeze_encoder: bool,
}

impl Default for TrainerSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainerSection {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            train_fraction: t.train_fraction,
            runs: t.runs,
            seeds: None,
            fixed_split: t.fixed_split,
            select_best_epoch: t.select_best_epoch,
            freeze_encoder: t.freeze_encoder,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub k: Vec<usize>,
    pub head: Vec<String>,
    pub encoder_id: Vec<String>,
    /// Any of `on`, `off`.
    pub augmentation: Vec<String>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        AblateConfig {
            k: vec![4],
            head: vec!["mlp".into()],
            encoder_id: Vec::new(),
            augmentation: vec!["on".into()],
        }
    }
}

impl Config {
    /// Reads `path` (when given), applies `KEY=VALUE` overrides with dotted
    /// keys, then fills everything else from the defaults.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Config> {
        let mut table = match path {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| invalid(format!("cannot read config {}: {e}", path.display())))?;
                toml::from_str::<toml::Table>(&text).with_context(|| format!("parsing config {}", path.display()))?
            }
            None => toml::Table::new(),
        };
        for item in overrides {
            set_key(&mut table, item)?;
        }
        let config: Config = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| invalid(format!("invalid configuration: {e}")))?;
        config.check()?;
        Ok(config)
    }

    pub fn cleaning(&self) -> anyhow::Result<CleaningConfig> {
        let steps = self
            .prep
            .steps
            .iter()
            .map(|s| CleaningStep::parse(s).ok_or_else(|| invalid(format!("unknown cleaning step {s:?}"))))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let table = match &self.prep.contractions {
            Some(p) => ContractionTable::load(p)?,
            None => ContractionTable::shipped(),
        };
        Ok(CleaningConfig::new(steps, table)?)
    }

    pub fn preset(&self) -> anyhow::Result<FeaturePreset> {
        FeaturePreset::parse(&self.features.preset)
            .ok_or_else(|| invalid(format!("unknown feature preset {:?}", self.features.preset)))
    }

    pub fn head(&self) -> anyhow::Result<HeadKind> {
        Ok(self.model.head.parse()?)
    }

    pub fn augment_seed(&self) -> u64 {
        derive_seed(self.seed, "augment")
    }

    pub fn plan(&self) -> anyhow::Result<AugmentationPlan> {
        let mut per_class = BTreeMap::new();
        for (name, n) in &self.augment.per_class_samples {
            let label: Label = name.parse().map_err(|e: String| invalid(format!("augment.per_class_samples: {e}")))?;
            per_class.insert(label, *n);
        }
        Ok(AugmentationPlan {
            per_class_samples: per_class,
            ops: self.augment.ops.iter().copied().collect(),
            rate: self.augment.rate,
            copies_per_sample: self.augment.copies_per_sample,
            seed: self.augment_seed(),
        })
    }

    pub fn train_config(&self) -> anyhow::Result<TrainConfig> {
        let t = &self.trainer;
        let seeds = t
            .seeds
            .clone()
            .unwrap_or_else(|| (0..t.runs as u64).map(|i| self.seed + i).collect());
        let config = TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            weight_decay: t.weight_decay,
            train_fraction: t.train_fraction,
            runs: t.runs,
            seeds,
            fixed_split: t.fixed_split,
            select_best_epoch: t.select_best_epoch,
            freeze_encoder: t.freeze_encoder,
            ..TrainConfig::default()
        };
        config.validate()?;
        Ok(config)
    }

    pub fn check(&self) -> anyhow::Result<()> {
        self.cleaning()?;
        self.preset()?;
        self.head()?;
        self.plan()?;
        self.train_config()?;
        if self.encoder.max_tokens < 2 {
            return Err(invalid("encoder.max_tokens must be at least 2"));
        }
        Ok(())
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML value
/// when it parses as one (numbers, booleans, arrays, quoted strings) and
/// as a bare string otherwise.
fn set_key(table: &mut toml::Table, item: &str) -> anyhow::Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| invalid(format!("--set expects KEY=VALUE, got {item:?}")))?;
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut current = table;
    for part in parents {
        let entry = current
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        current = entry
            .as_table_mut()
            .ok_or_else(|| invalid(format!("--set {key}: {part} is not a table")))?;
    }
    current.insert(last.to_string(), value);
    Ok(())
}
