//! The hybrid classifier: learned weighted pooling of the last `k` CLS
//! states, fusion with the auxiliary feature vector, dropout, and one of
//! four classification heads.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Module, Tensor, Var, D};
use candle_nn::rnn::{LSTMConfig, LSTM, RNN};
use candle_nn::{Init, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::encoder::transformer::Linear;
use crate::encoder::{last_k, EncoderAdapter, ForwardCtx, LayerStates, ParamStore, TransformerConfig, TransformerEncoder};
use crate::error::{Error, Result};
use crate::features::{FeatureSchema, FeatureVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Mlp,
    Lstm,
    MmGate,
    MmXatt,
}

impl HeadKind {
    pub const ALL: [HeadKind; 4] = [HeadKind::Mlp, HeadKind::Lstm, HeadKind::MmGate, HeadKind::MmXatt];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Mlp => "mlp",
            HeadKind::Lstm => "lstm",
            HeadKind::MmGate => "mm_gate",
            HeadKind::MmXatt => "mm_xatt",
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|h| h.name() == s.trim().to_lowercase())
            .ok_or_else(|| Error::Config(format!("unknown head {s:?} (mlp, lstm, mm_gate, mm_xatt)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub k: usize,
    pub encoder_dim: usize,
    pub feature_dim: usize,
    pub head: HeadKind,
    pub head_hidden: usize,
    pub dropout: f64,
    pub num_labels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            k: 4,
            encoder_dim: 768,
            feature_dim: 31,
            head: HeadKind::Mlp,
            head_hidden: 512,
            dropout: 0.1,
            num_labels: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if self.encoder_dim == 0 || self.feature_dim == 0 || self.head_hidden == 0 || self.num_labels == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn fused_dim(&self) -> usize {
        self.encoder_dim + self.feature_dim
    }

    /// Closed-form trainable count of the head alone (no alpha, no encoder).
    pub fn head_param_count(&self) -> usize {
        let (d, f, h, l) = (self.encoder_dim, self.feature_dim, self.head_hidden, self.num_labels);
        let mlp = |inp: usize| inp * h + h + h * l + l;
        match self.head {
            HeadKind::Mlp => mlp(d + f),
            HeadKind::Lstm => 4 * h * (d + f) + 4 * h * h + 8 * h + h * l + l,
            HeadKind::MmGate => (d + f) * d + d + f * d + d + mlp(d),
            HeadKind::MmXatt => 2 * f * d + mlp(d),
        }
    }
}

/// The layer weights α, one per retained layer, shallowest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatorWeights {
    pub alpha: Vec<f64>,
}

impl AggregatorWeights {
    pub fn new(alpha: Vec<f64>) -> Result<Self> {
        if alpha.is_empty() || alpha.iter().any(|a| !a.is_finite()) {
            return Err(Error::Shape("alpha must be a non-empty finite vector".into()));
        }
        Ok(AggregatorWeights { alpha })
    }

    /// 1/k each.
    pub fn uniform(k: usize) -> Self {
        AggregatorWeights {
            alpha: vec![1.0 / k as f64; k],
        }
    }
}

/// H_avg = Σᵢ αᵢ Hᵢ over the retained layers.
pub fn aggregate_layers(states: &LayerStates, alpha: &AggregatorWeights) -> Result<Vec<f64>> {
    if states.k() != alpha.alpha.len() {
        return Err(Error::Shape(format!(
            "{} layer states but {} alpha weights",
            states.k(),
            alpha.alpha.len()
        )));
    }
    let mut out = vec![0.0; states.dim()];
    for (layer, a) in states.cls_by_layer.iter().zip(&alpha.alpha) {
        for (o, h) in out.iter_mut().zip(layer) {
            *o += a * h;
        }
    }
    Ok(out)
}

/// `[h_avg : features]`, encoder block first.
pub fn fuse(h_avg: &[f64], features: &[f64], config: &ModelConfig) -> Result<Vec<f64>> {
    if h_avg.len() != config.encoder_dim || features.len() != config.feature_dim {
        return Err(Error::Shape(format!(
            "fuse expects {} + {} values, got {} + {}",
            config.encoder_dim,
            config.feature_dim,
            h_avg.len(),
            features.len()
        )));
    }
    Ok(h_avg.iter().chain(features).copied().collect())
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

struct MlpStack {
    hidden: Linear,
    out: Linear,
}

impl MlpStack {
    fn new(inp: usize, hidden: usize, labels: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(MlpStack {
            hidden: Linear::new(inp, hidden, vb.pp("hidden"))?,
            out: Linear::new(hidden, labels, vb.pp("out"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.out.forward(&self.hidden.forward(x)?.relu()?)
    }
}

enum Head {
    Mlp(MlpStack),
    Lstm {
        rnn: LSTM,
        out: Linear,
    },
    MmGate {
        gate: Linear,
        project: Linear,
        mlp: MlpStack,
    },
    MmXatt {
        keys: Tensor,
        values: Tensor,
        mlp: MlpStack,
    },
}

impl Head {
    fn new(cfg: &ModelConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let (d, f, h, l) = (cfg.encoder_dim, cfg.feature_dim, cfg.head_hidden, cfg.num_labels);
        Ok(match cfg.head {
            HeadKind::Mlp => Head::Mlp(MlpStack::new(d + f, h, l, vb.pp("mlp"))?),
            HeadKind::Lstm => {
                let bound = 1.0 / (h as f64).sqrt();
                let init = Init::Uniform { lo: -bound, up: bound };
                let lstm_cfg = LSTMConfig {
                    w_ih_init: init,
                    w_hh_init: init,
                    b_ih_init: Some(init),
                    b_hh_init: Some(init),
                    ..Default::default()
                };
                Head::Lstm {
                    rnn: LSTM::new(d + f, h, lstm_cfg, vb.pp("lstm"))?,
                    out: Linear::new(h, l, vb.pp("out"))?,
                }
            }
            HeadKind::MmGate => Head::MmGate {
                gate: Linear::new(d + f, d, vb.pp("gate"))?,
                project: Linear::new(f, d, vb.pp("project"))?,
                mlp: MlpStack::new(d, h, l, vb.pp("mlp"))?,
            },
            HeadKind::MmXatt => {
                let bound = 1.0 / (d as f64).sqrt();
                let init = Init::Uniform { lo: -bound, up: bound };
                Head::MmXatt {
                    keys: vb.get_with_hints((f, d), "xatt.key_embeddings", init)?,
                    values: vb.get_with_hints((f, d), "xatt.value_embeddings", init)?,
                    mlp: MlpStack::new(d, h, l, vb.pp("mlp"))?,
                }
            }
        })
    }
}

/// Output of a batched forward pass.
pub struct Prediction {
    pub labels: Vec<usize>,
    pub probabilities: Vec<Vec<f64>>,
}

pub struct HybridModel {
    config: ModelConfig,
    encoder: Box<dyn EncoderAdapter>,
    head_store: ParamStore,
    alpha: Tensor,
    head: Head,
    schema: FeatureSchema,
}

impl fmt::Debug for HybridModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HybridModel")
            .field("config", &self.config)
            .field("encoder", &self.encoder.model_id())
            .field("params", &self.count_parameters())
            .finish()
    }
}

impl HybridModel {
    /// Builds the head over `encoder` with seeded initialisation.
    pub fn new(
        config: ModelConfig,
        encoder: Box<dyn EncoderAdapter>,
        schema: FeatureSchema,
        seed: u64,
    ) -> Result<Self> {
        let store = ParamStore::new(seed, encoder.dtype(), encoder.device().clone());
        Self::with_store(config, encoder, schema, store)
    }

    /// Every head weight and bias zero; alpha still starts at 1/k.
    pub fn zeroed(config: ModelConfig, encoder: Box<dyn EncoderAdapter>, schema: FeatureSchema) -> Result<Self> {
        let store = ParamStore::zeros(encoder.dtype(), encoder.device().clone());
        Self::with_store(config, encoder, schema, store)
    }

    fn with_store(
        config: ModelConfig,
        encoder: Box<dyn EncoderAdapter>,
        schema: FeatureSchema,
        store: ParamStore,
    ) -> Result<Self> {
        config.validate()?;
        if config.k > encoder.num_layers() {
            return Err(Error::Config(format!(
                "k = {} exceeds the encoder's {} layers",
                config.k,
                encoder.num_layers()
            )));
        }
        if config.encoder_dim != encoder.hidden_dim() {
            return Err(Error::Config(format!(
                "model expects encoder_dim {}, encoder has {}",
                config.encoder_dim,
                encoder.hidden_dim()
            )));
        }
        if config.feature_dim != schema.len() {
            return Err(Error::Config(format!(
                "model expects {} features, schema has {}",
                config.feature_dim,
                schema.len()
            )));
        }
        let vb = store.var_builder();
        let alpha = vb.get_with_hints(config.k, "alpha", Init::Const(1.0 / config.k as f64))?;
        store
            .get_var("alpha")
            .expect("alpha was just created")
            .set(&Tensor::full(1.0 / config.k as f64, config.k, encoder.device())?.to_dtype(encoder.dtype())?)?;
        let head = Head::new(&config, vb.pp("head"))?;
        Ok(HybridModel {
            config,
            encoder,
            head_store: store,
            alpha,
            head,
            schema,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn encoder(&self) -> &dyn EncoderAdapter {
        self.encoder.as_ref()
    }

    pub fn encoder_mut(&mut self) -> &mut dyn EncoderAdapter {
        self.encoder.as_mut()
    }

    pub fn schema(&self) -> &FeatureSchema {
        &self.schema
    }

    pub fn dtype(&self) -> DType {
        self.encoder.dtype()
    }

    pub fn device(&self) -> &Device {
        self.encoder.device()
    }

    pub fn alpha(&self) -> Result<AggregatorWeights> {
        let values = self.alpha.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        AggregatorWeights::new(values)
    }

    /// Alpha first, then head weights in name order.
    pub fn head_vars(&self) -> Vec<(String, Var)> {
        self.head_store.named_vars()
    }

    pub fn trainable_vars(&self) -> Vec<Var> {
        let mut vars = self.head_store.vars();
        vars.extend(self.encoder.trainable_vars());
        vars
    }

    /// Encoder (when trainable) + k alphas + head.
    pub fn count_parameters(&self) -> usize {
        self.encoder.param_count() + self.head_store.element_count()
    }

    /// k alphas + head.
    pub fn head_parameter_count(&self) -> usize {
        self.head_store.element_count()
    }

    /// `(batch, k, dim)` CLS states of the retained layers.
    pub fn layer_states(&self, texts: &[&str], ctx: &mut ForwardCtx) -> Result<Tensor> {
        if let Some(index) = texts.iter().position(|t| t.trim().is_empty()) {
            return Err(Error::Encode {
                index,
                reason: "text is empty after cleaning".into(),
            });
        }
        let layers = self.encoder.cls_layers(texts, ctx)?;
        Ok(Tensor::stack(last_k(&layers, self.config.k), 1)?)
    }

    /// Logits from precomputed `(batch, k, dim)` layer states and
    /// `(batch, feature_dim)` features.
    pub fn forward_states(&self, states: &Tensor, features: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let (b, k, d) = states.dims3()?;
        if k != self.config.k || d != self.config.encoder_dim {
            return Err(Error::Shape(format!(
                "layer states {:?} do not match k = {}, dim = {}",
                states.dims(),
                self.config.k,
                self.config.encoder_dim
            )));
        }
        if features.dims() != [b, self.config.feature_dim] {
            return Err(Error::Shape(format!(
                "features {:?} do not match batch {b} x {}",
                features.dims(),
                self.config.feature_dim
            )));
        }
        let weighted = states.broadcast_mul(&self.alpha.reshape((1, k, 1))?)?;
        let h_avg = weighted.sum(1)?;
        let p = self.config.dropout;
        let logits = match &self.head {
            Head::Mlp(mlp) => {
                let fused = ctx.dropout(&Tensor::cat(&[&h_avg, features], 1)?, p)?;
                mlp.forward(&fused)?
            }
            Head::Lstm { rnn, out } => {
                let f = features.unsqueeze(1)?.broadcast_as((b, k, self.config.feature_dim))?;
                let seq = ctx.dropout(&Tensor::cat(&[&weighted, &f.contiguous()?], 2)?, p)?;
                let outputs = rnn.seq(&seq)?;
                let last = &outputs.last().expect("k >= 1").h;
                out.forward(last)?
            }
            Head::MmGate { gate, project, mlp } => {
                let fused = ctx.dropout(&Tensor::cat(&[&h_avg, features], 1)?, p)?;
                let h = fused.narrow(1, 0, d)?;
                let f = fused.narrow(1, d, self.config.feature_dim)?;
                let g = candle_nn::ops::sigmoid(&gate.forward(&fused)?)?;
                let z = (h + g.mul(&project.forward(&f)?)?)?;
                mlp.forward(&z)?
            }
            Head::MmXatt { keys, values, mlp } => {
                let fused = ctx.dropout(&Tensor::cat(&[&h_avg, features], 1)?, p)?;
                let h = fused.narrow(1, 0, d)?;
                let f = fused.narrow(1, d, self.config.feature_dim)?.unsqueeze(2)?;
                let k_emb = f.broadcast_mul(&keys.unsqueeze(0)?)?;
                let v_emb = f.broadcast_mul(&values.unsqueeze(0)?)?;
                let scores = (k_emb.matmul(&h.unsqueeze(2)?)?.squeeze(2)? / (d as f64).sqrt())?;
                let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
                let attended = weights.unsqueeze(1)?.matmul(&v_emb)?.squeeze(1)?;
                mlp.forward(&(h + attended)?)?
            }
        };
        Ok(logits)
    }

    pub fn forward(&self, texts: &[&str], features: &Tensor, ctx: &mut ForwardCtx) -> Result<Tensor> {
        let states = self.layer_states(texts, ctx)?;
        self.forward_states(&states, features, ctx)
    }

    /// Stacks feature rows into a `(batch, feature_dim)` tensor.
    pub fn feature_tensor(&self, rows: &[&[f64]]) -> Result<Tensor> {
        let dim = self.config.feature_dim;
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::Shape(format!("feature row of {} values, expected {dim}", bad.len())));
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Ok(Tensor::from_vec(flat, (rows.len(), dim), self.device())?.to_dtype(self.dtype())?)
    }

    /// Evaluation-mode softmax probabilities and argmax labels.
    pub fn predict(&self, texts: &[&str], features: &[FeatureVector]) -> Result<Prediction> {
        if texts.len() != features.len() {
            return Err(Error::Argument(format!(
                "{} texts but {} feature vectors",
                texts.len(),
                features.len()
            )));
        }
        let expected = self.schema.hash();
        if let Some(fv) = features.iter().find(|fv| fv.schema.hash() != expected) {
            return Err(Error::Inference(format!(
                "feature schema {} does not match the model's training schema {}",
                &fv.schema.hash()[..12],
                &expected[..12]
            )));
        }
        let rows: Vec<&[f64]> = features.iter().map(|fv| fv.values.as_slice()).collect();
        self.predict_rows(texts, &rows)
    }

    /// As [`HybridModel::predict`] for raw rows already known to follow
    /// the model's schema.
    pub fn predict_rows(&self, texts: &[&str], rows: &[&[f64]]) -> Result<Prediction> {
        let mut labels = Vec::with_capacity(texts.len());
        let mut probabilities = Vec::with_capacity(texts.len());
        for (tc, rc) in texts.chunks(16).zip(rows.chunks(16)) {
            let feats = self.feature_tensor(rc)?;
            let logits = self.forward(tc, &feats, &mut ForwardCtx::eval())?;
            let probs = candle_nn::ops::softmax(&logits.to_dtype(DType::F64)?, D::Minus1)?;
            for row in probs.to_vec2::<f64>()? {
                labels.push(argmax(&row));
                probabilities.push(row);
            }
        }
        Ok(Prediction { labels, probabilities })
    }

    /// Every weight (head and encoder) by a namespaced name.
    pub fn snapshot(&self) -> Result<HashMap<String, Tensor>> {
        let mut all: HashMap<String, Tensor> = self
            .head_store
            .snapshot()?
            .into_iter()
            .map(|(k, v)| (format!("model.{k}"), v))
            .collect();
        if !self.encoder.is_frozen() {
            for (k, v) in self.encoder.snapshot()? {
                all.insert(format!("encoder.{k}"), v);
            }
        }
        Ok(all)
    }

    pub fn restore(&self, weights: &HashMap<String, Tensor>) -> Result<()> {
        let pick = |prefix: &str| -> HashMap<String, Tensor> {
            weights
                .iter()
                .filter_map(|(k, v)| k.strip_prefix(prefix).map(|n| (n.to_string(), v.clone())))
                .collect()
        };
        self.head_store.assign_from(&pick("model."))?;
        let encoder_weights = pick("encoder.");
        if !encoder_weights.is_empty() {
            self.encoder.restore(&encoder_weights)?;
        }
        Ok(())
    }

    /// Writes `weights.safetensors`, `config.json`, `alpha.json` and
    /// `feature_schema.json` into `dir`.
    pub fn save(&self, dir: &Path, encoder_seed: u64) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        candle_core::safetensors::save(&self.snapshot()?, dir.join("weights.safetensors"))?;
        let meta = CheckpointMeta {
            model: self.config.clone(),
            encoder_model_id: self.encoder.model_id().to_string(),
            encoder_layers: self.encoder.num_layers(),
            encoder_frozen: self.encoder.is_frozen(),
            encoder_seed,
            schema_hash: self.schema.hash(),
        };
        write_json(&dir.join("config.json"), &meta)?;
        write_json(&dir.join("alpha.json"), &self.alpha()?)?;
        write_json(&dir.join("feature_schema.json"), &self.schema)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`HybridModel::save`]. Fails unless
    /// the stored feature schema hashes to `expected_schema_hash` (when
    /// given). The encoder is re-resolved by id and then overwritten with
    /// any fine-tuned weights in the checkpoint.
    pub fn load(dir: &Path, expected_schema_hash: Option<&str>, cache_dir: Option<&Path>) -> Result<Self> {
        let meta: CheckpointMeta = read_json(&dir.join("config.json"))?;
        let schema: FeatureSchema = read_json(&dir.join("feature_schema.json"))?;
        if schema.hash() != meta.schema_hash {
            return Err(Error::Checkpoint("feature_schema.json does not match config.json".into()));
        }
        if let Some(expected) = expected_schema_hash {
            if expected != meta.schema_hash {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was trained on feature schema {}, current schema is {}",
                    &meta.schema_hash[..12.min(meta.schema_hash.len())],
                    &expected[..12.min(expected.len())]
                )));
            }
        }
        let mut encoder: Box<dyn EncoderAdapter> = if crate::encoder::toy_layers(&meta.encoder_model_id).is_some() {
            Box::new(TransformerEncoder::toy(
                &TransformerConfig::toy().with_layers(meta.encoder_layers),
                meta.encoder_seed,
            )?)
        } else {
            Box::new(TransformerEncoder::resolve(&meta.encoder_model_id, cache_dir, meta.encoder_seed, true)?)
        };
        encoder.set_frozen(meta.encoder_frozen);
        let store = ParamStore::zeros(encoder.dtype(), encoder.device().clone());
        let model = HybridModel::with_store(meta.model, encoder, schema, store)?;
        let weights = candle_core::safetensors::load(dir.join("weights.safetensors"), model.device())?;
        model.restore(&weights)?;
        Ok(model)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    model: ModelConfig,
    encoder_model_id: String,
    encoder_layers: usize,
    encoder_frozen: bool,
    encoder_seed: u64,
    schema_hash: String,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
