#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;

use depsev::corpus::{Corpus, Label, Post};
use depsev::encoder::{TransformerConfig, TransformerEncoder};
use depsev::features::{FeatureExtractor, FeaturePreset, FeatureTable};
use depsev::model::{HeadKind, HybridModel, ModelConfig};

const CUES: [&str; 4] = ["calm", "tired", "hopeless", "unbearable"];
const FILLER: [&str; 12] = [
    "today", "work", "sleep", "friends", "night", "again", "really", "feel", "week", "home", "still", "always",
];

/// `per_class` posts per label; each text carries a label cue word among
/// seeded filler words.
pub fn synthetic_corpus(per_class: usize, seed: u64) -> Corpus {
    let mut posts = Vec::new();
    for (l, label) in Label::ALL.into_iter().enumerate() {
        for i in 0..per_class {
            let n = posts.len() as u64;
            let mut words = Vec::new();
            for j in 0..4 {
                let h = (seed ^ n.wrapping_mul(0x9e37_79b9_7f4a_7c15)).wrapping_add(j * 31) >> 7;
                words.push(FILLER[(h % FILLER.len() as u64) as usize]);
            }
            words.insert(i % 4, CUES[l]);
            posts.push(Post::original(format!("p{}", posts.len()), words.join(" "), label));
        }
    }
    Corpus::new(posts).unwrap()
}

pub fn offline_features(corpus: &Corpus) -> FeatureTable {
    let extractor = FeatureExtractor::offline(FeaturePreset::EmotionSentiment);
    extractor.extract_corpus(corpus, "test").unwrap()
}

pub fn toy_config(head: HeadKind, k: usize, hidden: usize) -> ModelConfig {
    ModelConfig {
        k,
        encoder_dim: TransformerConfig::toy().hidden,
        feature_dim: 31,
        head,
        head_hidden: hidden,
        dropout: 0.1,
        num_labels: 4,
    }
}

pub fn toy_model(head: HeadKind, k: usize, layers: usize, seed: u64) -> HybridModel {
    let enc = TransformerEncoder::toy(&TransformerConfig::toy().with_layers(layers), seed).unwrap();
    let schema = FeatureExtractor::offline(FeaturePreset::EmotionSentiment).schema();
    HybridModel::new(toy_config(head, k, 16), Box::new(enc), schema, seed).unwrap()
}
