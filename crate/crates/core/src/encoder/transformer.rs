//! A BERT-style transformer written against candle primitives that all
//! carry gradients (candle's fused layer norm does not), with weight names
//! matching the public DistilBERT and BERT checkpoints.

use std::collections::HashMap;

use candle_core::{DType, Module, Tensor, D};
use candle_nn::{Init, VarBuilder};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    DistilBert,
    Bert,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub architecture: Architecture,
    pub vocab_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub layers: usize,
    pub max_positions: usize,
    /// Only read for [`Architecture::Bert`].
    pub type_vocab_size: usize,
    pub dropout: f64,
    pub attention_dropout: f64,
    pub layer_norm_eps: f64,
    pub initializer_range: f64,
}

impl TransformerConfig {
    pub fn distilbert_base_uncased() -> Self {
        TransformerConfig {
            architecture: Architecture::DistilBert,
            vocab_size: 30522,
            hidden: 768,
            heads: 12,
            ffn: 3072,
            layers: 6,
            max_positions: 512,
            type_vocab_size: 0,
            dropout: 0.1,
            attention_dropout: 0.1,
            layer_norm_eps: 1e-12,
            initializer_range: 0.02,
        }
    }

    pub fn bert_base_uncased() -> Self {
        TransformerConfig {
            architecture: Architecture::Bert,
            layers: 12,
            type_vocab_size: 2,
            ..Self::distilbert_base_uncased()
        }
    }

    /// 2-layer, 8-dim, dropout-free encoder used throughout the tests.
    pub fn toy() -> Self {
        TransformerConfig {
            architecture: Architecture::DistilBert,
            vocab_size: 256,
            hidden: 8,
            heads: 2,
            ffn: 16,
            layers: 2,
            max_positions: 512,
            type_vocab_size: 0,
            dropout: 0.0,
            attention_dropout: 0.0,
            layer_norm_eps: 1e-12,
            initializer_range: 0.2,
        }
    }

    pub fn with_layers(mut self, layers: usize) -> Self {
        self.layers = layers;
        self
    }

    /// Preset for a model identifier, matched on the usual hub names.
    pub fn preset(model_id: &str) -> Option<Self> {
        let name = model_id.rsplit('/').next().unwrap_or(model_id);
        match name {
            "distilbert-base-uncased" => Some(Self::distilbert_base_uncased()),
            "bert-base-uncased" => Some(Self::bert_base_uncased()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    /// Reads a hub-style `config.json`.
    pub fn from_hub_json(value: &serde_json::Value) -> Result<Self> {
        let model_type = value
            .get("model_type")
            .and_then(|v| v.as_str())
            .unwrap_or_default();
        let int = |key: &str| -> Result<usize> {
            value
                .get(key)
                .and_then(|v| v.as_u64())
                .map(|v| v as usize)
                .ok_or_else(|| Error::Config(format!("encoder config.json lacks {key}")))
        };
        let real = |key: &str, default: f64| value.get(key).and_then(|v| v.as_f64()).unwrap_or(default);
        match model_type {
            "distilbert" => Ok(TransformerConfig {
                architecture: Architecture::DistilBert,
                vocab_size: int("vocab_size")?,
                hidden: int("dim")?,
                heads: int("n_heads")?,
                ffn: int("hidden_dim")?,
                layers: int("n_layers")?,
                max_positions: int("max_position_embeddings")?,
                type_vocab_size: 0,
                dropout: real("dropout", 0.1),
                attention_dropout: real("attention_dropout", 0.1),
                layer_norm_eps: 1e-12,
                initializer_range: real("initializer_range", 0.02),
            }),
            "bert" => Ok(TransformerConfig {
                architecture: Architecture::Bert,
                vocab_size: int("vocab_size")?,
                hidden: int("hidden_size")?,
                heads: int("num_attention_heads")?,
                ffn: int("intermediate_size")?,
                layers: int("num_hidden_layers")?,
                max_positions: int("max_position_embeddings")?,
                type_vocab_size: int("type_vocab_size")?,
                dropout: real("hidden_dropout_prob", 0.1),
                attention_dropout: real("attention_probs_dropout_prob", 0.1),
                layer_norm_eps: real("layer_norm_eps", 1e-12),
                initializer_range: real("initializer_range", 0.02),
            }),
            other => Err(Error::Config(format!(
                "unsupported encoder model_type {other:?} (expected distilbert or bert)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 || self.heads == 0 || self.ffn == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) || !(0.0..1.0).contains(&self.attention_dropout) {
            return Err(Error::Config("encoder dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count from the declared shapes.
    pub fn param_count(&self) -> usize {
        let (d, f) = (self.hidden, self.ffn);
        let mut embeddings = self.vocab_size * d + self.max_positions * d + 2 * d;
        if self.architecture == Architecture::Bert {
            embeddings += self.type_vocab_size * d;
        }
        let attention = 4 * (d * d + d);
        let feed_forward = d * f + f + f * d + d;
        let norms = 4 * d;
        embeddings + self.layers * (attention + feed_forward + norms)
    }
}

/// Training flag plus the random stream dropout draws from.
pub struct ForwardCtx {
    pub train: bool,
    rng: Option<ChaCha8Rng>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        ForwardCtx {
            train: false,
            rng: None,
        }
    }

    pub fn train(seed: u64, tag: &str) -> Self {
        ForwardCtx {
            train: true,
            rng: Some(rng_for(seed, tag)),
        }
    }

    /// Inverted dropout; the identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, x: &Tensor, p: f64) -> candle_core::Result<Tensor> {
        if !self.train || p <= 0.0 {
            return Ok(x.clone());
        }
        let rng = self.rng.as_mut().expect("training context carries an rng");
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..x.elem_count())
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { scale })
            .collect();
        let mask = Tensor::from_vec(mask, x.shape(), x.device())?.to_dtype(x.dtype())?;
        x.mul(&mask)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    /// `weight` is `(out, in)`, initialised like PyTorch's default
    /// (uniform in ±1/√in for weight and bias).
    pub fn new(inp: usize, out: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let bound = 1.0 / (inp as f64).sqrt();
        let init = Init::Uniform {
            lo: -bound,
            up: bound,
        };
        Ok(Linear {
            weight: vb.get_with_hints((out, inp), "weight", init)?,
            bias: vb.get_with_hints(out, "bias", init)?,
        })
    }

    pub fn with_normal_init(inp: usize, out: usize, std: f64, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(Linear {
            weight: vb.get_with_hints((out, inp), "weight", Init::Randn { mean: 0.0, stdev: std })?,
            bias: vb.get_with_hints(out, "bias", Init::Const(0.0))?,
        })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }
}

impl Module for Linear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let w = self.weight.t()?;
        let y = match x.rank() {
            2 => x.matmul(&w)?,
            _ => x.broadcast_matmul(&w)?,
        };
        y.broadcast_add(&self.bias)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(dim: usize, eps: f64, vb: VarBuilder) -> candle_core::Result<Self> {
        Ok(LayerNorm {
            weight: vb.get_with_hints(dim, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(dim, "bias", Init::Const(0.0))?,
            eps,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        normed.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)
    }
}

struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    dropout: f64,
}

impl Attention {
    /// `mask_bias` is `(batch, 1, 1, seq)`, zero on real tokens and a large
    /// negative number on padding.
    fn forward(&self, x: &Tensor, mask_bias: &Tensor, ctx: &mut ForwardCtx) -> candle_core::Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let dh = d / self.heads;
        let split = |y: Tensor| -> candle_core::Result<Tensor> {
            y.reshape((b, t, self.heads, dh))?.transpose(1, 2)?.contiguous()
        };
        let q = split((self.q.forward(x)? / (dh as f64).sqrt())?)?;
        let k = split(self.k.forward(x)?)?;
        let v = split(self.v.forward(x)?)?;
        let scores = q.matmul(&k.t()?.contiguous()?)?.broadcast_add(mask_bias)?;
        let probs = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let probs = ctx.dropout(&probs, self.dropout)?;
        let mixed = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, t, d))?;
        self.out.forward(&mixed)
    }
}

struct Block {
    attention: Attention,
    attention_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    output_norm: LayerNorm,
    dropout: f64,
}

impl Block {
    fn new(cfg: &TransformerConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let (d, f, std) = (cfg.hidden, cfg.ffn, cfg.initializer_range);
        let lin = |inp, out, vb: VarBuilder| Linear::with_normal_init(inp, out, std, vb);
        match cfg.architecture {
            Architecture::DistilBert => {
                let a = vb.pp("attention");
                Ok(Block {
                    attention: Attention {
                        q: lin(d, d, a.pp("q_lin"))?,
                        k: lin(d, d, a.pp("k_lin"))?,
                        v: lin(d, d, a.pp("v_lin"))?,
                        out: lin(d, d, a.pp("out_lin"))?,
                        heads: cfg.heads,
                        dropout: cfg.attention_dropout,
                    },
                    attention_norm: LayerNorm::new(d, cfg.layer_norm_eps, vb.pp("sa_layer_norm"))?,
                    ffn_in: lin(d, f, vb.pp("ffn").pp("lin1"))?,
                    ffn_out: lin(f, d, vb.pp("ffn").pp("lin2"))?,
                    output_norm: LayerNorm::new(d, cfg.layer_norm_eps, vb.pp("output_layer_norm"))?,
                    dropout: cfg.dropout,
                })
            }
            Architecture::Bert => {
                let a = vb.pp("attention");
                let s = a.pp("self");
                Ok(Block {
                    attention: Attention {
                        q: lin(d, d, s.pp("query"))?,
                        k: lin(d, d, s.pp("key"))?,
                        v: lin(d, d, s.pp("value"))?,
                        out: lin(d, d, a.pp("output").pp("dense"))?,
                        heads: cfg.heads,
                        dropout: cfg.attention_dropout,
                    },
                    attention_norm: LayerNorm::new(
                        d,
                        cfg.layer_norm_eps,
                        a.pp("output").pp("LayerNorm"),
                    )?,
                    ffn_in: lin(d, f, vb.pp("intermediate").pp("dense"))?,
                    ffn_out: lin(f, d, vb.pp("output").pp("dense"))?,
                    output_norm: LayerNorm::new(d, cfg.layer_norm_eps, vb.pp("output").pp("LayerNorm"))?,
                    dropout: cfg.dropout,
                })
            }
        }
    }

    fn forward(&self, x: &Tensor, mask_bias: &Tensor, ctx: &mut ForwardCtx) -> candle_core::Result<Tensor> {
        let attended = self.attention.forward(x, mask_bias, ctx)?;
        let attended = ctx.dropout(&attended, self.dropout)?;
        let x = self.attention_norm.forward(&(x + attended)?)?;
        let h = self.ffn_in.forward(&x)?.gelu_erf()?;
        let h = ctx.dropout(&self.ffn_out.forward(&h)?, self.dropout)?;
        self.output_norm.forward(&(x + h)?)
    }
}

/// Hidden states of one forward pass.
pub struct TransformerOutput {
    /// One `(batch, hidden)` tensor per block, shallowest first.
    pub cls_by_layer: Vec<Tensor>,
    /// `(batch, seq, hidden)` output of the deepest block.
    pub last_hidden: Tensor,
}

pub struct Transformer {
    cfg: TransformerConfig,
    word_embeddings: Tensor,
    position_embeddings: Tensor,
    token_type_embeddings: Option<Tensor>,
    embedding_norm: LayerNorm,
    blocks: Vec<Block>,
}

impl Transformer {
    /// Builds the network under `vb`, whose root corresponds to the bare
    /// encoder (no `distilbert.` / `bert.` prefix).
    pub fn new(cfg: &TransformerConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let (d, std) = (cfg.hidden, cfg.initializer_range);
        let normal = Init::Randn { mean: 0.0, stdev: std };
        let e = vb.pp("embeddings");
        let word_embeddings = e.get_with_hints((cfg.vocab_size, d), "word_embeddings.weight", normal)?;
        let position_embeddings =
            e.get_with_hints((cfg.max_positions, d), "position_embeddings.weight", normal)?;
        let token_type_embeddings = match cfg.architecture {
            Architecture::Bert => Some(e.get_with_hints(
                (cfg.type_vocab_size, d),
                "token_type_embeddings.weight",
                normal,
            )?),
            Architecture::DistilBert => None,
        };
        let embedding_norm = LayerNorm::new(d, cfg.layer_norm_eps, e.pp("LayerNorm"))?;
        let layer_root = match cfg.architecture {
            Architecture::DistilBert => vb.pp("transformer").pp("layer"),
            Architecture::Bert => vb.pp("encoder").pp("layer"),
        };
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(cfg, layer_root.pp(i.to_string())))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Transformer {
            cfg: cfg.clone(),
            word_embeddings,
            position_embeddings,
            token_type_embeddings,
            embedding_norm,
            blocks,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.cfg
    }

    pub fn word_embeddings(&self) -> &Tensor {
        &self.word_embeddings
    }

    /// Runs a batch of already-tokenized sequences, right-padding them to
    /// the longest one with `pad_id`.
    pub fn forward(&self, batch: &[Vec<u32>], pad_id: u32, ctx: &mut ForwardCtx) -> Result<TransformerOutput> {
        let device = self.word_embeddings.device();
        let dtype = self.word_embeddings.dtype();
        let b = batch.len();
        let t = batch.iter().map(Vec::len).max().unwrap_or(0);
        if b == 0 || t == 0 {
            return Err(Error::Shape("empty encoder batch".into()));
        }
        if t > self.cfg.max_positions {
            return Err(Error::Shape(format!(
                "sequence of {t} tokens exceeds {} positions",
                self.cfg.max_positions
            )));
        }
        let mut ids = Vec::with_capacity(b * t);
        let mut bias = Vec::with_capacity(b * t);
        for seq in batch {
            for j in 0..t {
                match seq.get(j) {
                    Some(&id) => {
                        if id as usize >= self.cfg.vocab_size {
                            return Err(Error::Shape(format!(
                                "token id {id} outside vocabulary of {}",
                                self.cfg.vocab_size
                            )));
                        }
                        ids.push(id);
                        bias.push(0.0);
                    }
                    None => {
                        ids.push(pad_id);
                        bias.push(-1e9);
                    }
                }
            }
        }
        let ids = Tensor::from_vec(ids, b * t, device)?;
        let mask_bias = Tensor::from_vec(bias, (b, 1, 1, t), device)?.to_dtype(dtype)?;

        let words = self.word_embeddings.index_select(&ids, 0)?.reshape((b, t, self.cfg.hidden))?;
        let positions = self.position_embeddings.narrow(0, 0, t)?;
        let mut x = words.broadcast_add(&positions)?;
        if let Some(types) = &self.token_type_embeddings {
            x = x.broadcast_add(&types.narrow(0, 0, 1)?)?;
        }
        let x = self.embedding_norm.forward(&x)?;
        let mut x = ctx.dropout(&x, self.cfg.dropout)?;

        let mut cls_by_layer = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            x = block.forward(&x, &mask_bias, ctx)?;
            cls_by_layer.push(x.narrow(1, 0, 1)?.squeeze(1)?);
        }
        Ok(TransformerOutput {
            cls_by_layer,
            last_hidden: x,
        })
    }
}

/// Rewrites hub checkpoint names onto the bare-encoder naming used by
/// [`Transformer`]: drops a leading model prefix and maps the legacy
/// `gamma`/`beta` layer-norm names.
pub fn normalize_weight_names(tensors: HashMap<String, Tensor>) -> HashMap<String, Tensor> {
    tensors
        .into_iter()
        .map(|(name, t)| {
            let stripped = name
                .strip_prefix("distilbert.")
                .or_else(|| name.strip_prefix("bert."))
                .unwrap_or(&name);
            let renamed = if let Some(base) = stripped.strip_suffix(".gamma") {
                format!("{base}.weight")
            } else if let Some(base) = stripped.strip_suffix(".beta") {
                format!("{base}.bias")
            } else {
                stripped.to_string()
            };
            (renamed, t)
        })
        .collect()
}

pub fn default_dtype(cfg: &TransformerConfig) -> DType {
    if cfg.hidden <= 64 {
        DType::F64
    } else {
        DType::F32
    }
}
