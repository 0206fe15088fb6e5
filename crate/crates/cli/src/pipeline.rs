//! Pieces shared by several commands: resolving scorers, predictors and
//! encoders from config ids, and locating the artifacts each stage needs.

use std::path::{Path, PathBuf};

use anyhow::Context;
use depsev::augment::{LexiconPredictor, MaskedTokenPredictor};
use depsev::corpus::{load_dataset, Corpus, DatasetFormat};
use depsev::encoder::{model_dir, ClassifierScorer, EncoderAdapter, MlmPredictor, TransformerEncoder};
use depsev::features::{
    load_features, FeatureExtractor, FeatureSchema, FeatureTable, HashScorer, MedicationLexicon, PrecomputedScorer,
    Scorer,
};
use depsev::model::{HeadKind, HybridModel, ModelConfig};
use depsev::seed::{content_hash, derive_seed};

use crate::config::Config;
use crate::errors::invalid;
use crate::run_dir::RunDir;

pub struct Ctx {
    pub cfg: Config,
    pub run: RunDir,
    pub cache: Option<PathBuf>,
}

pub fn hash_file(path: &Path) -> anyhow::Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(content_hash(&bytes))
}

pub fn read_corpus(path: &Path) -> anyhow::Result<Corpus> {
    load_dataset(path, DatasetFormat::Csv).with_context(|| format!("loading {}", path.display()))
}

fn scorer(ctx: &Ctx, id: &str, stub: fn() -> HashScorer) -> anyhow::Result<Box<dyn Scorer>> {
    if id == "stub" {
        return Ok(Box::new(stub()));
    }
    if let Some(path) = id.strip_prefix("precomputed:") {
        return Ok(Box::new(PrecomputedScorer::load(Path::new(path))?));
    }
    match model_dir(ctx.cache.as_deref(), id) {
        Some(dir) => Ok(Box::new(ClassifierScorer::from_dir(id, &dir)?)),
        None => Err(invalid(format!(
            "scorer {id:?} not found: use \"stub\", \"precomputed:<csv>\", or place a checkpoint under $DEPSEV_CACHE_DIR/{id}/"
        ))),
    }
}

pub fn extractor(ctx: &Ctx) -> anyhow::Result<FeatureExtractor> {
    let f = &ctx.cfg.features;
    let lexicon = match &f.lexicon {
        Some(path) => MedicationLexicon::load(path)?,
        None => MedicationLexicon::shipped(),
    };
    Ok(FeatureExtractor {
        emotion: scorer(ctx, &f.emotion_model_id, HashScorer::emotion)?,
        sentiment: scorer(ctx, &f.sentiment_model_id, HashScorer::sentiment)?,
        lexicon,
        preset: ctx.cfg.preset()?,
    })
}

/// Every setting that changes extracted feature values, as a stable key.
pub fn feature_settings(cfg: &Config) -> anyhow::Result<String> {
    let lexicon = match &cfg.features.lexicon {
        Some(path) => hash_file(path)?,
        None => "shipped".into(),
    };
    let precomputed = |id: &str| -> anyhow::Result<String> {
        Ok(match id.strip_prefix("precomputed:") {
            Some(path) => hash_file(Path::new(path))?,
            None => String::new(),
        })
    };
    Ok(serde_json::json!({
        "preset": cfg.features.preset,
        "emotion": [cfg.features.emotion_model_id, precomputed(&cfg.features.emotion_model_id)?],
        "sentiment": [cfg.features.sentiment_model_id, precomputed(&cfg.features.sentiment_model_id)?],
        "lexicon": lexicon,
    })
    .to_string())
}

pub fn predictor(ctx: &Ctx) -> anyhow::Result<Box<dyn MaskedTokenPredictor>> {
    let id = ctx.cfg.augment.predictor_model_id.as_str();
    if id == "lexicon" {
        return Ok(Box::new(LexiconPredictor::default()));
    }
    match model_dir(ctx.cache.as_deref(), id) {
        Some(dir) => Ok(Box::new(MlmPredictor::from_dir(id, &dir)?)),
        None => Err(invalid(format!(
            "masked-token predictor {id:?} not found: place its checkpoint under $DEPSEV_CACHE_DIR/{id}/ \
             or set augment.predictor_model_id = \"lexicon\" for the offline predictor"
        ))),
    }
}

pub fn encoder(ctx: &Ctx, model_id: &str, seed: u64) -> anyhow::Result<TransformerEncoder> {
    let mut enc = TransformerEncoder::resolve(
        model_id,
        ctx.cache.as_deref(),
        derive_seed(seed, "encoder"),
        ctx.cfg.encoder.allow_untrained,
    )?;
    let limit = enc.config().max_positions;
    if ctx.cfg.encoder.max_tokens > limit {
        log::warn!("encoder.max_tokens {} exceeds {model_id}'s {limit} positions; using {limit}", ctx.cfg.encoder.max_tokens);
    }
    enc.set_max_tokens(ctx.cfg.encoder.max_tokens.min(limit))?;
    Ok(enc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelChoice {
    pub encoder_id: String,
    pub head: HeadKind,
    pub k: usize,
}

impl ModelChoice {
    pub fn from_config(cfg: &Config) -> anyhow::Result<ModelChoice> {
        Ok(ModelChoice {
            encoder_id: cfg.encoder.model_id.clone(),
            head: cfg.head()?,
            k: cfg.model.k,
        })
    }

    pub fn label(&self) -> String {
        format!("{} + {} (k={})", self.encoder_id, self.head, self.k)
    }
}

pub fn model_config(cfg: &Config, choice: &ModelChoice, encoder: &dyn EncoderAdapter, schema: &FeatureSchema) -> ModelConfig {
    ModelConfig {
        k: choice.k,
        encoder_dim: encoder.hidden_dim(),
        feature_dim: schema.len(),
        head: choice.head,
        head_hidden: cfg.model.head_hidden,
        dropout: cfg.model.dropout,
        num_labels: depsev::corpus::Label::COUNT,
    }
}

pub fn build_model(ctx: &Ctx, choice: &ModelChoice, schema: &FeatureSchema, seed: u64) -> depsev::Result<HybridModel> {
    let enc = encoder(ctx, &choice.encoder_id, seed).map_err(|e| depsev::Error::Config(format!("{e:#}")))?;
    if choice.k > enc.config().layers {
        return Err(depsev::Error::Config(format!(
            "k = {} exceeds the {} layers of {}",
            choice.k,
            enc.config().layers,
            choice.encoder_id
        )));
    }
    let config = model_config(&ctx.cfg, choice, &enc, schema);
    HybridModel::new(config, Box::new(enc), schema.clone(), derive_seed(seed, "head"))
}

/// The corpus a training command works on. With augmentation on (and not
/// deferred to each run's training split) this is the augmented corpus.
pub fn training_corpus(ctx: &Ctx, augmentation: bool) -> anyhow::Result<Corpus> {
    if augmentation && !ctx.cfg.augment.train_only_augmentation {
        let path = ctx.run.augmented();
        ctx.run.require(&path, "augment")?;
        return read_corpus(&path);
    }
    let path = ctx.run.corpus();
    ctx.run.require(&path, "prep")?;
    let corpus = read_corpus(&path)?;
    if corpus.iter().any(|p| !p.is_original()) {
        return Err(invalid(format!("{} holds augmented rows; expected the prepared corpus", path.display())));
    }
    Ok(corpus)
}

/// Loads the feature cache, refusing it when the feature settings changed
/// since `depsev features` wrote it.
pub fn feature_table(ctx: &Ctx) -> anyhow::Result<FeatureTable> {
    let path = ctx.run.features();
    ctx.run.require(&path, "features")?;
    let record = ctx
        .run
        .stage("features")?
        .ok_or_else(|| invalid("features.csv has no manifest entry; re-run `depsev features`"))?;
    let stored = record.details.get("settings").and_then(|v| v.as_str()).unwrap_or_default();
    if stored != feature_settings(&ctx.cfg)? {
        return Err(invalid("feature settings changed since `depsev features` ran; re-run it"));
    }
    let hash = record.details.get("config_hash").and_then(|v| v.as_str()).unwrap_or_default();
    Ok(load_features(&path, hash)?)
}
