//! Central finite differences against autograd on the toy encoder (f64).

use candle_core::{Tensor, Var};
use candle_nn::loss::cross_entropy;
use depsev::encoder::{ForwardCtx, TransformerConfig, TransformerEncoder};
use depsev::features::{FeatureExtractor, FeaturePreset};
use depsev::model::{HeadKind, HybridModel, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{offline_features, synthetic_corpus};

pub const STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const GRAD_FLOOR: f64 = 1e-6;

pub struct Case {
    pub model: HybridModel,
    texts: Vec<String>,
    feats: Tensor,
    targets: Tensor,
}

pub fn case(head: HeadKind, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.random_range(2..=3);
    let k = rng.random_range(1..=layers);
    let enc = TransformerEncoder::toy(&TransformerConfig::toy().with_layers(layers), seed).unwrap();
    let schema = FeatureExtractor::offline(FeaturePreset::EmotionSentiment).schema();
    let config = ModelConfig {
        k,
        encoder_dim: 8,
        feature_dim: schema.len(),
        head,
        head_hidden: rng.random_range(3..=6),
        dropout: 0.1,
        num_labels: 4,
    };
    let model = HybridModel::new(config, Box::new(enc), schema, seed + 100).unwrap();
    let corpus = synthetic_corpus(1, seed);
    let table = offline_features(&corpus);
    let batch = rng.random_range(2..=4);
    let posts: Vec<_> = corpus.iter().take(batch).collect();
    let rows: Vec<&[f64]> = posts.iter().map(|p| table.values(&p.id).unwrap()).collect();
    let feats = model.feature_tensor(&rows).unwrap();
    let targets = Tensor::new(posts.iter().map(|p| p.label.index() as u32).collect::<Vec<_>>(), model.device()).unwrap();
    Case {
        texts: posts.iter().map(|p| p.text.clone()).collect(),
        model,
        feats,
        targets,
    }
}

pub fn loss(c: &Case) -> Tensor {
    let texts: Vec<&str> = c.texts.iter().map(String::as_str).collect();
    let logits = c.model.forward(&texts, &c.feats, &mut ForwardCtx::eval()).unwrap();
    cross_entropy(&logits, &c.targets).unwrap()
}

fn scalar(t: &Tensor) -> f64 {
    t.to_scalar::<f64>().unwrap()
}

fn nudge(var: &Var, index: usize, delta: f64) {
    let t = var.as_tensor();
    let mut values = t.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    values[index] += delta;
    var.set(&Tensor::from_vec(values, t.shape(), t.device()).unwrap()).unwrap();
}

/// Largest relative error over the chosen elements of `var`.
pub fn check_var(c: &Case, name: &str, var: &Var, grad: &Tensor, indices: &[usize]) -> Result<f64, String> {
    let analytic = grad.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let mut worst = 0.0f64;
    for &i in indices {
        nudge(var, i, STEP);
        let up = scalar(&loss(c));
        nudge(var, i, -2.0 * STEP);
        let down = scalar(&loss(c));
        nudge(var, i, STEP);
        let numeric = (up - down) / (2.0 * STEP);
        let a = analytic[i];
        // The difference quotient carries ~1e-11 of rounding noise, so
        // magnitudes are floored before dividing.
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        if rel > REL_TOL {
            return Err(format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}, relative error {rel:e}"));
        }
        worst = worst.max(rel);
    }
    Ok(worst)
}

pub struct SweepRow {
    pub seed: u64,
    pub head: HeadKind,
    pub k: usize,
    pub weights: usize,
    pub worst: f64,
}

/// Checks every alpha and head weight for `configs` seeded configurations,
/// cycling through the heads.
pub fn head_sweep(configs: u64) -> Result<Vec<SweepRow>, String> {
    let mut rows = Vec::new();
    for seed in 0..configs {
        let head = HeadKind::ALL[seed as usize % HeadKind::ALL.len()];
        let c = case(head, seed);
        let grads = loss(&c).backward().map_err(|e| e.to_string())?;
        let mut row = SweepRow {
            seed,
            head,
            k: c.model.config().k,
            weights: 0,
            worst: 0.0,
        };
        for (name, var) in c.model.head_vars() {
            let grad = grads.get(var.as_tensor()).ok_or_else(|| format!("no gradient for {name}"))?;
            let all: Vec<usize> = (0..var.elem_count()).collect();
            row.worst = row.worst.max(check_var(&c, &name, &var, grad, &all)?);
            row.weights += all.len();
        }
        rows.push(row);
    }
    Ok(rows)
}

