mod common;

use candle_core::Tensor;
use common::{offline_features, synthetic_corpus, toy_config, toy_model};
use depsev::corpus::{Label, Post};
use depsev::encoder::{EncoderAdapter, ForwardCtx, TransformerConfig, TransformerEncoder};
use depsev::error::Error;
use depsev::features::{FeatureExtractor, FeaturePreset, FeatureSchema};
use depsev::model::{HeadKind, HybridModel, ModelConfig};
use depsev::trainer::{train, TrainConfig};

fn schema() -> FeatureSchema {
    FeatureExtractor::offline(FeaturePreset::EmotionSentiment).schema()
}

fn texts_and_rows(n: usize) -> (Vec<String>, Vec<Vec<f64>>) {
    let corpus = synthetic_corpus(n.div_ceil(4), 7);
    let table = offline_features(&corpus);
    corpus
        .iter()
        .take(n)
        .map(|p| (p.text.clone(), table.values(&p.id).unwrap().to_vec()))
        .unzip()
}

fn refs<'a>(texts: &'a [String], rows: &'a [Vec<f64>]) -> (Vec<&'a str>, Vec<&'a [f64]>) {
    (
        texts.iter().map(String::as_str).collect(),
        rows.iter().map(Vec::as_slice).collect(),
    )
}

#[test]
fn toy_parameter_identity_for_every_k_and_head() {
    let layers = 6;
    let encoder_params = TransformerConfig::toy().with_layers(layers).param_count();
    for head in HeadKind::ALL {
        for k in 1..=layers {
            let enc = TransformerEncoder::toy(&TransformerConfig::toy().with_layers(layers), 0).unwrap();
            assert_eq!(enc.param_count(), encoder_params);
            let cfg = toy_config(head, k, 12);
            let head_params = cfg.head_param_count();
            let model = HybridModel::new(cfg, Box::new(enc), schema(), 0).unwrap();
            assert_eq!(model.count_parameters(), encoder_params + k + head_params, "{head} k={k}");
        }
    }
}

#[test]
fn frozen_head_counts() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.head_param_count(), 799 * 512 + 512 + 512 * 4 + 4);
    assert_eq!(cfg.head_param_count(), 411_652);
    let k1 = ModelConfig { k: 1, ..ModelConfig::default() };
    assert_eq!(k1.head_param_count() + k1.k, 411_653);
}

#[test]
fn probabilities_are_distributions_and_batches_match_singles() {
    let (texts, rows) = texts_and_rows(11);
    let (t, r) = refs(&texts, &rows);
    for head in HeadKind::ALL {
        let model = toy_model(head, 2, 2, 5);
        let batch = model.predict_rows(&t, &r).unwrap();
        for (i, probs) in batch.probabilities.iter().enumerate() {
            assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            let single = model.predict_rows(&t[i..=i], &r[i..=i]).unwrap();
            for (a, b) in probs.iter().zip(&single.probabilities[0]) {
                assert!((a - b).abs() <= 1e-6, "{head} row {i}: batched {a} vs single {b}");
            }
            assert_eq!(batch.labels[i], single.labels[0]);
        }
    }
}

#[test]
fn eval_mode_is_bitwise_deterministic_and_dropout_only_in_training() {
    let (texts, rows) = texts_and_rows(4);
    let (t, r) = refs(&texts, &rows);
    let model = toy_model(HeadKind::Mlp, 2, 2, 1);
    let feats = model.feature_tensor(&r).unwrap();
    let a = model.forward(&t, &feats, &mut ForwardCtx::eval()).unwrap().to_vec2::<f64>().unwrap();
    let b = model.forward(&t, &feats, &mut ForwardCtx::eval()).unwrap().to_vec2::<f64>().unwrap();
    assert_eq!(a, b);
    let c = model.forward(&t, &feats, &mut ForwardCtx::train(0, "x")).unwrap().to_vec2::<f64>().unwrap();
    assert_ne!(a, c);
}

#[test]
fn zero_model_predicts_first_class() {
    let enc = TransformerEncoder::toy(&TransformerConfig::toy(), 0).unwrap();
    let model = HybridModel::zeroed(toy_config(HeadKind::Mlp, 2, 8), Box::new(enc), schema()).unwrap();
    let extractor = FeatureExtractor::offline(FeaturePreset::EmotionSentiment);
    let fv = extractor.extract(&Post::original("q", "i am fine today", Label::Minimum)).unwrap();
    let pred = model.predict(&["i am fine today"], &[fv]).unwrap();
    assert_eq!(pred.labels, vec![0]);
    assert!(pred.probabilities[0].iter().all(|p| (p - 0.25).abs() < 1e-12));
}

#[test]
fn dominant_logit_wins_with_high_probability() {
    let enc = TransformerEncoder::toy(&TransformerConfig::toy(), 0).unwrap();
    let model = HybridModel::zeroed(toy_config(HeadKind::Mlp, 2, 8), Box::new(enc), schema()).unwrap();
    let (_, bias) = model
        .head_vars()
        .into_iter()
        .find(|(n, _)| n == "head.mlp.out.bias")
        .expect("output bias");
    bias.set(&Tensor::new(&[10.0f64, 0.0, 0.0, 0.0], model.device()).unwrap()).unwrap();
    let (texts, rows) = texts_and_rows(1);
    let (t, r) = refs(&texts, &rows);
    let pred = model.predict_rows(&t, &r).unwrap();
    assert_eq!(pred.labels, vec![0]);
    assert!(pred.probabilities[0][0] > 0.99);
}

#[test]
fn lstm_head_accepts_a_single_layer() {
    let model = toy_model(HeadKind::Lstm, 1, 2, 0);
    let (texts, rows) = texts_and_rows(3);
    let (t, r) = refs(&texts, &rows);
    assert_eq!(model.predict_rows(&t, &r).unwrap().labels.len(), 3);
}

#[test]
fn checkpoints_round_trip_for_every_head() {
    let corpus = synthetic_corpus(2, 3);
    let features = offline_features(&corpus);
    let (texts, rows) = texts_and_rows(6);
    let (t, r) = refs(&texts, &rows);
    let config = TrainConfig {
        epochs: 2,
        learning_rate: 1e-3,
        runs: 1,
        seeds: vec![0],
        ..TrainConfig::default()
    };
    for head in HeadKind::ALL {
        let mut model = toy_model(head, 2, 3, 9);
        train(&mut model, &corpus, &features, &config, 9, None).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), 9).unwrap();
        let loaded = HybridModel::load(dir.path(), Some(&schema().hash()), None).unwrap();
        assert_eq!(loaded.encoder().model_id(), "toy-3");
        let feats = model.feature_tensor(&r).unwrap();
        let a = model.forward(&t, &feats, &mut ForwardCtx::eval()).unwrap().to_vec2::<f64>().unwrap();
        let b = loaded.forward(&t, &feats, &mut ForwardCtx::eval()).unwrap().to_vec2::<f64>().unwrap();
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() <= 1e-6, "{head}: {x} vs {y}");
        }
        assert_eq!(loaded.alpha().unwrap(), model.alpha().unwrap());
    }
}

#[test]
fn checkpoint_refuses_a_different_feature_schema() {
    let model = toy_model(HeadKind::Mlp, 1, 2, 0);
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path(), 0).unwrap();
    let other = FeatureExtractor::offline(FeaturePreset::EmotionSentimentMedication).schema();
    match HybridModel::load(dir.path(), Some(&other.hash()), None) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("schema"), "{msg}"),
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}

#[test]
fn prediction_rejects_foreign_feature_schema() {
    let model = toy_model(HeadKind::Mlp, 1, 2, 0);
    let extractor = FeatureExtractor::offline(FeaturePreset::EmotionSentimentMedication);
    let fv = extractor.extract(&Post::original("q", "on sertraline", Label::Mild)).unwrap();
    assert!(matches!(model.predict(&["on sertraline"], &[fv]), Err(Error::Inference(_))));
}

#[test]
fn unknown_head_is_a_config_error() {
    assert!(matches!("transformer".parse::<HeadKind>(), Err(Error::Config(_))));
}
