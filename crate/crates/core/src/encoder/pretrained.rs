//! Task heads on top of a pretrained checkpoint directory: a masked-token
//! predictor for augmentation and a sequence classifier usable as a
//! feature scorer. Both read the same `config.json` / `vocab.txt` /
//! `model.safetensors` layout as the encoder.

use std::path::Path;

use candle_core::{DType, Module, Tensor, D};

use super::tokenizer::{Tokenizer, HubTokenizer};
use super::transformer::{Architecture, ForwardCtx, LayerNorm, Linear, Transformer};
use super::{check_all_loaded, load_checkpoint_dir, DEFAULT_MAX_TOKENS};
use crate::augment::{Candidate, MaskedTokenPredictor, Slot};
use crate::error::{Error, Result};
use crate::features::Scorer;

pub struct MlmPredictor {
    model_id: String,
    net: Transformer,
    tokenizer: HubTokenizer,
    transform: Linear,
    norm: LayerNorm,
    decoder_weight: Tensor,
    decoder_bias: Tensor,
    top_k: usize,
}

impl MlmPredictor {
    pub fn from_dir(model_id: &str, dir: &Path) -> Result<Self> {
        let (cfg, tokenizer, store) = load_checkpoint_dir(dir)?;
        let vb = store.var_builder();
        let net = Transformer::new(&cfg, vb.clone())?;
        let (d, v) = (cfg.hidden, cfg.vocab_size);
        let (transform, norm, decoder_name, bias) = match cfg.architecture {
            Architecture::DistilBert => (
                Linear::new(d, d, vb.pp("vocab_transform"))?,
                LayerNorm::new(d, cfg.layer_norm_eps, vb.pp("vocab_layer_norm"))?,
                "vocab_projector.weight",
                vb.get(v, "vocab_projector.bias")?,
            ),
            Architecture::Bert => {
                let p = vb.pp("cls").pp("predictions");
                (
                    Linear::new(d, d, p.pp("transform").pp("dense"))?,
                    LayerNorm::new(d, cfg.layer_norm_eps, p.pp("transform").pp("LayerNorm"))?,
                    "cls.predictions.decoder.weight",
                    p.get(v, "bias")?,
                )
            }
        };
        // Output embeddings are usually tied to the input ones and then
        // absent from the file.
        let decoder_weight = if vb.contains_tensor(decoder_name) {
            vb.get((v, d), decoder_name)?
        } else {
            net.word_embeddings().clone()
        };
        check_all_loaded(&store, dir)?;
        Ok(MlmPredictor {
            model_id: model_id.to_string(),
            net,
            tokenizer,
            transform,
            norm,
            decoder_weight,
            decoder_bias: bias,
            top_k: 10,
        })
    }

    /// Token ids with `[MASK]` at the slot, plus the mask's position. Long
    /// contexts are windowed around the mask.
    fn masked_ids(&self, context: &[String], slot: Slot) -> std::result::Result<(Vec<u32>, usize), String> {
        let (at, skip) = match slot {
            Slot::Insert(i) if i <= context.len() => (i, false),
            Slot::Replace(i) if i < context.len() => (i, true),
            _ => return Err(format!("slot {slot:?} outside context of {}", context.len())),
        };
        let mut pieces = Vec::new();
        let mut mask_pos = 0;
        for (j, word) in context.iter().enumerate() {
            if j == at {
                mask_pos = pieces.len();
                pieces.push(self.tokenizer.mask_id());
            }
            if !(skip && j == at) {
                pieces.extend(self.tokenizer.word_ids(word));
            }
        }
        if at == context.len() {
            mask_pos = pieces.len();
            pieces.push(self.tokenizer.mask_id());
        }
        let budget = DEFAULT_MAX_TOKENS.min(self.net.config().max_positions) - 2;
        let start = if pieces.len() > budget {
            mask_pos.saturating_sub(budget / 2).min(pieces.len() - budget)
        } else {
            0
        };
        let end = (start + budget).min(pieces.len());
        let mut ids = vec![self.tokenizer.cls_id()];
        ids.extend_from_slice(&pieces[start..end]);
        ids.push(self.tokenizer.sep_id());
        Ok((ids, mask_pos - start + 1))
    }

    fn logits(&self, ids: Vec<u32>, pos: usize) -> Result<Vec<f64>> {
        let out = self.net.forward(&[ids], self.tokenizer.pad_id(), &mut ForwardCtx::eval())?;
        let h = out.last_hidden.narrow(1, pos, 1)?.squeeze(1)?;
        let h = self.norm.forward(&self.transform.forward(&h)?.gelu_erf()?)?;
        let logits = h
            .matmul(&self.decoder_weight.t()?)?
            .broadcast_add(&self.decoder_bias)?;
        Ok(logits.squeeze(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
    }
}

impl MaskedTokenPredictor for MlmPredictor {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn propose(&self, context: &[String], slot: Slot) -> std::result::Result<Vec<Candidate>, String> {
        let (ids, pos) = self.masked_ids(context, slot)?;
        let logits = self.logits(ids, pos).map_err(|e| e.to_string())?;
        let probs = crate::features::softmax(&logits);
        let mut ranked: Vec<(usize, f64)> = probs.into_iter().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let candidates: Vec<Candidate> = ranked
            .into_iter()
            .filter_map(|(id, p)| {
                let text = self.tokenizer.token_text(id as u32)?;
                text.chars()
                    .all(char::is_alphanumeric)
                    .then(|| Candidate::new(text, p))
            })
            .take(self.top_k)
            .collect();
        if candidates.is_empty() {
            return Err("predictor produced no word candidates".into());
        }
        Ok(candidates)
    }
}

/// Single-label sequence classifier: softmax over the classification
/// head's logits, labels ordered by id as in `config.json`.
pub struct ClassifierScorer {
    model_id: String,
    net: Transformer,
    tokenizer: HubTokenizer,
    pre: Linear,
    classifier: Linear,
    labels: Vec<String>,
}

impl ClassifierScorer {
    pub fn from_dir(model_id: &str, dir: &Path) -> Result<Self> {
        let (cfg, tokenizer, store) = load_checkpoint_dir(dir)?;
        let labels = read_labels(dir)?;
        let vb = store.var_builder();
        let net = Transformer::new(&cfg, vb.clone())?;
        let d = cfg.hidden;
        let pre = match cfg.architecture {
            Architecture::DistilBert => Linear::new(d, d, vb.pp("pre_classifier"))?,
            Architecture::Bert => Linear::new(d, d, vb.pp("pooler").pp("dense"))?,
        };
        let classifier = Linear::new(d, labels.len(), vb.pp("classifier"))?;
        check_all_loaded(&store, dir)?;
        Ok(ClassifierScorer {
            model_id: model_id.to_string(),
            net,
            tokenizer,
            pre,
            classifier,
            labels,
        })
    }

    fn architecture(&self) -> Architecture {
        self.net.config().architecture
    }
}

fn read_labels(dir: &Path) -> Result<Vec<String>> {
    let path = dir.join("config.json");
    let raw = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let json: serde_json::Value = serde_json::from_str(&raw)?;
    let map = json
        .get("id2label")
        .and_then(|v| v.as_object())
        .ok_or_else(|| Error::Config(format!("{} has no id2label", path.display())))?;
    let mut pairs: Vec<(usize, String)> = map
        .iter()
        .map(|(k, v)| {
            let id = k
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("non-numeric label id {k:?}")))?;
            Ok((id, v.as_str().unwrap_or_default().to_lowercase()))
        })
        .collect::<Result<_>>()?;
    pairs.sort();
    if pairs.iter().enumerate().any(|(i, (id, _))| i != *id) {
        return Err(Error::Config("id2label ids are not 0..n".into()));
    }
    Ok(pairs.into_iter().map(|(_, l)| l).collect())
}

impl Scorer for ClassifierScorer {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn score(&self, text: &str) -> std::result::Result<Vec<f64>, String> {
        let run = || -> Result<Vec<f64>> {
            let ids = self.tokenizer.encode(text, DEFAULT_MAX_TOKENS);
            let out = self.net.forward(&[ids], self.tokenizer.pad_id(), &mut ForwardCtx::eval())?;
            let cls = out.last_hidden.narrow(1, 0, 1)?.squeeze(1)?;
            let pooled = match self.architecture() {
                Architecture::DistilBert => self.pre.forward(&cls)?.relu()?,
                Architecture::Bert => self.pre.forward(&cls)?.tanh()?,
            };
            let logits = self.classifier.forward(&pooled)?;
            let probs = candle_nn::ops::softmax(&logits, D::Minus1)?;
            Ok(probs.squeeze(0)?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
        };
        run().map_err(|e| e.to_string())
    }
}
