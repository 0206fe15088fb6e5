//! Hub-format checkpoints written by `fixtures/make_checkpoints.py` with the
//! reference implementation, and the outputs it produced for them.

use std::path::PathBuf;

use depsev::augment::{MaskedTokenPredictor, Slot};
use depsev::encoder::{encode, ClassifierScorer, EncoderAdapter, MlmPredictor, TransformerEncoder};
use depsev::features::Scorer;
use serde_json::Value;

const TOL: f64 = 1e-4;

fn fixture(arch: &str) -> (PathBuf, Value) {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(arch);
    let raw = std::fs::read_to_string(root.join("expected.json")).unwrap();
    (root, serde_json::from_str(&raw).unwrap())
}

fn matrix(v: &Value) -> Vec<Vec<f64>> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|row| row.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect())
        .collect()
}

fn sentences(expected: &Value) -> Vec<String> {
    expected["sentences"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s.as_str().unwrap().to_string())
        .collect()
}

fn assert_close(got: &[f64], want: &[f64], what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (g, w)) in got.iter().zip(want).enumerate() {
        assert!((g - w).abs() <= TOL, "{what}[{i}]: got {g}, want {w}");
    }
}

fn check_encoder(arch: &str) {
    let (root, expected) = fixture(arch);
    let enc = TransformerEncoder::from_dir(arch, &root.join("mlm")).unwrap();
    let texts = sentences(&expected);
    let ids: Vec<Vec<u32>> = texts.iter().map(|t| enc.tokenize(t)).collect();
    let want_ids: Vec<Vec<u32>> = serde_json::from_value(expected["input_ids"].clone()).unwrap();
    assert_eq!(ids, want_ids, "{arch} tokenization");

    let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
    let k = enc.num_layers();
    for (text_index, text) in refs.iter().enumerate() {
        let states = encode(&[text], &enc, k).unwrap();
        let per_layer = &expected["cls_by_layer"][text_index];
        for layer in 0..k {
            let want = &matrix(&per_layer[layer])[0];
            assert_close(&states[0].cls_by_layer[layer], want, &format!("{arch} text {text_index} layer {layer}"));
        }
    }
    // padded batch gives each row the same states as the reference batch
    let batch = encode(&refs, &enc, k).unwrap();
    for layer in 0..k {
        let want = matrix(&expected["batch_cls_by_layer"][layer]);
        for (i, row) in want.iter().enumerate() {
            assert_close(&batch[i].cls_by_layer[layer], row, &format!("{arch} batch row {i} layer {layer}"));
        }
    }
}

#[test]
fn distilbert_hidden_states_match_reference() {
    check_encoder("distilbert");
}

#[test]
fn bert_hidden_states_match_reference() {
    check_encoder("bert");
}

fn check_mlm(arch: &str) {
    let (root, expected) = fixture(arch);
    let mlm = MlmPredictor::from_dir("mlm", &root.join("mlm")).unwrap();
    let vocab: Vec<String> = std::fs::read_to_string(root.join("mlm/vocab.txt"))
        .unwrap()
        .lines()
        .map(str::to_string)
        .collect();
    for case in expected["masked"].as_array().unwrap() {
        let context: Vec<String> = serde_json::from_value(case["context"].clone()).unwrap();
        let slot = case["slot"].as_u64().unwrap() as usize;
        let logits: Vec<f64> = serde_json::from_value(case["logits"].clone()).unwrap();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let mut want: Vec<(String, f64)> = logits
            .iter()
            .enumerate()
            .map(|(i, l)| (vocab[i].clone(), (l - max).exp() / z))
            .filter(|(t, _)| t.chars().all(char::is_alphanumeric))
            .collect();
        want.sort_by(|a, b| b.1.total_cmp(&a.1));
        want.truncate(10);

        let got = mlm.propose(&context, Slot::Insert(slot)).unwrap();
        assert_eq!(got.len(), want.len());
        for (g, (token, p)) in got.iter().zip(&want) {
            assert_eq!(&g.token, token, "{arch} candidate order");
            assert!((g.score - p).abs() <= TOL, "{arch} {token}: got {}, want {p}", g.score);
        }
    }
}

#[test]
fn distilbert_mlm_candidates_match_reference() {
    check_mlm("distilbert");
}

#[test]
fn bert_mlm_candidates_match_reference() {
    check_mlm("bert");
}

fn check_classifier(arch: &str) {
    let (root, expected) = fixture(arch);
    let scorer = ClassifierScorer::from_dir("clf", &root.join("classifier")).unwrap();
    assert_eq!(scorer.labels(), ["negative", "neutral", "positive"]);
    let want = matrix(&expected["classifier_probs"]);
    for (text, probs) in sentences(&expected).iter().zip(&want) {
        assert_close(&scorer.score(text).unwrap(), probs, &format!("{arch} classifier {text:?}"));
    }
}

#[test]
fn distilbert_classifier_matches_reference() {
    check_classifier("distilbert");
}

#[test]
fn bert_classifier_matches_reference() {
    check_classifier("bert");
}

#[test]
fn classifier_directory_also_serves_as_encoder() {
    let (root, _) = fixture("bert");
    let enc = TransformerEncoder::from_dir("bert", &root.join("classifier")).unwrap();
    assert_eq!(enc.hidden_dim(), 16);
    assert_eq!(enc.num_layers(), 3);
}
