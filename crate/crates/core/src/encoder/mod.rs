//! Transformer encoders exposing the CLS hidden state of every block.
//!
//! One implementation, [`TransformerEncoder`], serves both the pretrained
//! checkpoints (loaded from a local directory) and the small seeded toy
//! encoder the tests run on.

pub mod params;
pub mod pretrained;
pub mod tokenizer;
pub mod transformer;

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use params::ParamStore;
pub use pretrained::{ClassifierScorer, MlmPredictor};
pub use tokenizer::{HashTokenizer, Tokenizer, HubTokenizer};
pub use transformer::{Architecture, ForwardCtx, Transformer, TransformerConfig};

pub const DEFAULT_MODEL_ID: &str = "distilbert-base-uncased";
pub const DEFAULT_MAX_TOKENS: usize = 512;
/// Environment variable naming the model/feature cache root.
pub const CACHE_DIR_ENV: &str = "DEPSEV_CACHE_DIR";

/// Sequences per forward pass inside [`encode`].
const ENCODE_CHUNK: usize = 16;

/// CLS vectors of the retained layers for one input, shallowest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStates {
    pub cls_by_layer: Vec<Vec<f64>>,
}

impl LayerStates {
    pub fn new(cls_by_layer: Vec<Vec<f64>>) -> Result<Self> {
        let dim = cls_by_layer.first().map(Vec::len).unwrap_or(0);
        if cls_by_layer.is_empty() || dim == 0 {
            return Err(Error::Shape("layer states need at least one non-empty layer".into()));
        }
        if cls_by_layer.iter().any(|v| v.len() != dim) {
            return Err(Error::Shape("layer vectors differ in length".into()));
        }
        if cls_by_layer.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::Shape("layer states contain non-finite values".into()));
        }
        Ok(LayerStates { cls_by_layer })
    }

    pub fn k(&self) -> usize {
        self.cls_by_layer.len()
    }

    pub fn dim(&self) -> usize {
        self.cls_by_layer[0].len()
    }
}

/// Uniform view over an encoder that reports per-block CLS states.
pub trait EncoderAdapter: Send + Sync {
    fn model_id(&self) -> &str;
    fn hidden_dim(&self) -> usize;
    fn num_layers(&self) -> usize;
    fn max_tokens(&self) -> usize;

    /// Trainable parameters, zero while frozen.
    fn param_count(&self) -> usize;

    fn trainable_vars(&self) -> Vec<Var>;
    fn is_frozen(&self) -> bool;
    fn set_frozen(&mut self, frozen: bool);

    /// Whether `cls_layers` may be called from several threads at once.
    fn concurrent_encode(&self) -> bool {
        true
    }

    fn dtype(&self) -> DType;
    fn device(&self) -> &Device;

    /// One `(batch, hidden)` tensor per block, shallowest first. Inputs are
    /// tokenized and truncated to `max_tokens`.
    fn cls_layers(&self, texts: &[&str], ctx: &mut ForwardCtx) -> Result<Vec<Tensor>>;

    /// Copies of the current weights by name.
    fn snapshot(&self) -> Result<HashMap<String, Tensor>>;

    /// Overwrites every weight from `weights`, which must name them all.
    fn restore(&self, weights: &HashMap<String, Tensor>) -> Result<()>;
}

pub struct TransformerEncoder {
    model_id: String,
    net: Transformer,
    tokenizer: Box<dyn Tokenizer>,
    store: ParamStore,
    max_tokens: usize,
    frozen: bool,
}

impl std::fmt::Debug for TransformerEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TransformerEncoder")
            .field("model_id", &self.model_id)
            .field("config", self.net.config())
            .field("frozen", &self.frozen)
            .finish()
    }
}

impl TransformerEncoder {
    /// Seeded encoder with a hashing tokenizer sized to `cfg.vocab_size`.
    pub fn toy(cfg: &TransformerConfig, seed: u64) -> Result<Self> {
        let store = ParamStore::new(seed, transformer::default_dtype(cfg), Device::Cpu);
        let net = Transformer::new(cfg, store.var_builder())?;
        Ok(TransformerEncoder {
            model_id: if cfg.layers == TransformerConfig::toy().layers {
                "toy".into()
            } else {
                format!("toy-{}", cfg.layers)
            },
            net,
            tokenizer: Box::new(HashTokenizer::new(cfg.vocab_size)?),
            store,
            max_tokens: DEFAULT_MAX_TOKENS.min(cfg.max_positions),
            frozen: false,
        })
    }

    /// Randomly initialised network with the preset shape of `model_id`.
    /// Parameter counts are exact; outputs are meaningless until weights
    /// are loaded.
    pub fn untrained(model_id: &str, seed: u64) -> Result<Self> {
        let cfg = TransformerConfig::preset(model_id)
            .ok_or_else(|| Error::Config(format!("no built-in shape for encoder {model_id:?}")))?;
        let mut enc = Self::toy(&cfg, seed)?;
        enc.model_id = model_id.to_string();
        Ok(enc)
    }

    /// Loads `config.json`, `vocab.txt` and `model.safetensors` from `dir`.
    pub fn from_dir(model_id: &str, dir: &Path) -> Result<Self> {
        let (cfg, tokenizer, store) = load_checkpoint_dir(dir)?;
        let net = Transformer::new(&cfg, store.var_builder())?;
        check_all_loaded(&store, dir)?;
        Ok(TransformerEncoder {
            model_id: model_id.to_string(),
            max_tokens: DEFAULT_MAX_TOKENS.min(cfg.max_positions),
            net,
            tokenizer: Box::new(tokenizer),
            store,
            frozen: false,
        })
    }

    /// Resolves `model_id`: `toy` (or `toy-<layers>`) builds the toy
    /// encoder, anything else is
    /// looked up under the cache directory. Without a local checkpoint a
    /// known preset falls back to random weights (with a warning) when
    /// `allow_untrained` is set.
    pub fn resolve(
        model_id: &str,
        cache_dir: Option<&Path>,
        seed: u64,
        allow_untrained: bool,
    ) -> Result<Self> {
        if let Some(layers) = toy_layers(model_id) {
            return Self::toy(&TransformerConfig::toy().with_layers(layers?), seed);
        }
        if let Some(dir) = model_dir(cache_dir, model_id) {
            return Self::from_dir(model_id, &dir);
        }
        if allow_untrained {
            log::warn!(
                "no local checkpoint for {model_id}; using randomly initialised weights of the same shape"
            );
            return Self::untrained(model_id, seed);
        }
        Err(Error::Config(format!(
            "encoder {model_id:?} not found; place config.json, vocab.txt and model.safetensors under ${CACHE_DIR_ENV}/{model_id}/"
        )))
    }

    pub fn config(&self) -> &TransformerConfig {
        self.net.config()
    }

    pub fn transformer(&self) -> &Transformer {
        &self.net
    }

    pub fn tokenizer(&self) -> &dyn Tokenizer {
        self.tokenizer.as_ref()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn set_max_tokens(&mut self, max_tokens: usize) -> Result<()> {
        if max_tokens < 2 || max_tokens > self.net.config().max_positions {
            return Err(Error::Config(format!(
                "max_tokens must lie in 2..={}, got {max_tokens}",
                self.net.config().max_positions
            )));
        }
        self.max_tokens = max_tokens;
        Ok(())
    }

    /// Total parameter count regardless of the frozen flag.
    pub fn total_params(&self) -> usize {
        self.store.element_count()
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.tokenizer.encode(text, self.max_tokens)
    }
}

impl EncoderAdapter for TransformerEncoder {
    fn model_id(&self) -> &str {
        &self.model_id
    }
    fn hidden_dim(&self) -> usize {
        self.net.config().hidden
    }
    fn num_layers(&self) -> usize {
        self.net.config().layers
    }
    fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    fn param_count(&self) -> usize {
        if self.frozen {
            0
        } else {
            self.total_params()
        }
    }

    fn trainable_vars(&self) -> Vec<Var> {
        if self.frozen {
            Vec::new()
        } else {
            self.store.vars()
        }
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn device(&self) -> &Device {
        self.store.device()
    }

    fn cls_layers(&self, texts: &[&str], ctx: &mut ForwardCtx) -> Result<Vec<Tensor>> {
        let batch: Vec<Vec<u32>> = texts.iter().map(|t| self.tokenize(t)).collect();
        let out = self.net.forward(&batch, self.tokenizer.pad_id(), ctx)?;
        if self.frozen {
            Ok(out.cls_by_layer.iter().map(Tensor::detach).collect())
        } else {
            Ok(out.cls_by_layer)
        }
    }

    fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        self.store.snapshot()
    }

    fn restore(&self, weights: &HashMap<String, Tensor>) -> Result<()> {
        self.store.assign_from(weights)
    }
}

/// Layer count for `toy` / `toy-<n>` identifiers, `None` for anything else.
pub(crate) fn toy_layers(model_id: &str) -> Option<Result<usize>> {
    let rest = model_id.strip_prefix("toy")?;
    if rest.is_empty() {
        return Some(Ok(TransformerConfig::toy().layers));
    }
    let n = rest.strip_prefix('-')?;
    Some(
        n.parse::<usize>()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| Error::Config(format!("bad toy encoder id {model_id:?}; use toy or toy-<layers>"))),
    )
}

/// Evaluation-mode CLS states of the last `k` blocks for each text.
pub fn encode(texts: &[&str], adapter: &dyn EncoderAdapter, k: usize) -> Result<Vec<LayerStates>> {
    if k == 0 || k > adapter.num_layers() {
        return Err(Error::Argument(format!(
            "k must lie in 1..={}, got {k}",
            adapter.num_layers()
        )));
    }
    if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
        return Err(Error::Encode {
            index,
            reason: "text is empty after cleaning".into(),
        });
    }
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(ENCODE_CHUNK) {
        let layers = adapter.cls_layers(chunk, &mut ForwardCtx::eval())?;
        let retained: Vec<Vec<Vec<f64>>> = last_k(&layers, k)
            .iter()
            .map(|t| t.to_dtype(DType::F64)?.to_vec2::<f64>())
            .collect::<candle_core::Result<_>>()?;
        for i in 0..chunk.len() {
            out.push(LayerStates::new(
                retained.iter().map(|layer| layer[i].clone()).collect(),
            )?);
        }
    }
    Ok(out)
}

/// The deepest `k` entries of a shallowest-first list, order preserved.
pub fn last_k<T>(layers: &[T], k: usize) -> &[T] {
    &layers[layers.len().saturating_sub(k)..]
}

/// Cache root: the explicit argument, else `$DEPSEV_CACHE_DIR`.
pub fn cache_root(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(CACHE_DIR_ENV).map(PathBuf::from))
}

/// `<cache>/<model_id>` when it holds a `config.json`.
pub fn model_dir(cache_dir: Option<&Path>, model_id: &str) -> Option<PathBuf> {
    let direct = Path::new(model_id);
    if direct.join("config.json").is_file() {
        return Some(direct.to_path_buf());
    }
    let dir = cache_root(cache_dir)?.join(model_id);
    dir.join("config.json").is_file().then_some(dir)
}

fn load_checkpoint_dir(dir: &Path) -> Result<(TransformerConfig, HubTokenizer, ParamStore)> {
    let config_path = dir.join("config.json");
    let raw = std::fs::read_to_string(&config_path).map_err(|e| Error::io(&config_path, e))?;
    let json: serde_json::Value = serde_json::from_str(&raw)?;
    let cfg = TransformerConfig::from_hub_json(&json)?;
    let tokenizer = HubTokenizer::from_dir(dir)?;
    let weights_path = dir.join("model.safetensors");
    if !weights_path.is_file() {
        return Err(Error::Config(format!(
            "{} missing (only safetensors checkpoints are read)",
            weights_path.display()
        )));
    }
    let tensors = candle_core::safetensors::load(&weights_path, &Device::Cpu)?;
    let store = ParamStore::new(0, DType::F32, Device::Cpu)
        .with_preload(transformer::normalize_weight_names(tensors));
    Ok((cfg, tokenizer, store))
}

fn check_all_loaded(store: &ParamStore, dir: &Path) -> Result<()> {
    let missing = store.fresh_names();
    if let Some(first) = missing.first() {
        return Err(Error::Config(format!(
            "checkpoint in {} lacks {} tensors, e.g. {first}",
            dir.display(),
            missing.len()
        )));
    }
    Ok(())
}
