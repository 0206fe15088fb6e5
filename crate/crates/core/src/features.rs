//! Auxiliary per-post feature vectors: emotion probabilities, sentiment
//! probabilities and (optionally) a normalised medication-mention count.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::{Arc, LazyLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Corpus, Post};
use crate::error::{Error, Result};
use crate::seed::content_hash;

const SHIPPED_LEXICON: &str = include_str!("../data/medications.txt");

/// The 28-way emotion taxonomy (27 emotions plus neutral) used by the
/// default emotion scorer.
pub const EMOTION_TAXONOMY: [&str; 28] = [
    "admiration",
    "amusement",
    "anger",
    "annoyance",
    "approval",
    "caring",
    "confusion",
    "curiosity",
    "desire",
    "disappointment",
    "disapproval",
    "disgust",
    "embarrassment",
    "excitement",
    "fear",
    "gratitude",
    "grief",
    "joy",
    "love",
    "nervousness",
    "optimism",
    "pride",
    "realization",
    "relief",
    "remorse",
    "sadness",
    "surprise",
    "neutral",
];

pub const SENTIMENT_LABELS: [&str; 3] = ["negative", "neutral", "positive"];

/// Medication counts are clipped here before normalising to [0, 1].
pub const MEDICATION_CAP: usize = 5;

const PROBABILITY_TOLERANCE: f64 = 1e-6;

/// A text classifier that returns a probability distribution over a fixed,
/// ordered label set. Implementations must be deterministic.
pub trait Scorer: Send + Sync {
    fn model_id(&self) -> &str;
    fn labels(&self) -> &[String];
    fn score(&self, text: &str) -> std::result::Result<Vec<f64>, String>;
}

/// Offline stand-in for a pretrained classifier: softmax over logits drawn
/// from a hash of `(salt, text, label index)`. Same text, same output.
#[derive(Debug, Clone)]
pub struct HashScorer {
    model_id: String,
    labels: Vec<String>,
}

impl HashScorer {
    pub fn new(model_id: impl Into<String>, labels: &[&str]) -> Self {
        HashScorer {
            model_id: model_id.into(),
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn emotion() -> Self {
        Self::new("stub-emotion", &EMOTION_TAXONOMY)
    }

    pub fn sentiment() -> Self {
        Self::new("stub-sentiment", &SENTIMENT_LABELS)
    }
}

impl Scorer for HashScorer {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn score(&self, text: &str) -> std::result::Result<Vec<f64>, String> {
        let mut hasher = Sha256::new();
        hasher.update(self.model_id.as_bytes());
        hasher.update([0u8]);
        hasher.update(text.as_bytes());
        let base = hasher.finalize();
        let logits: Vec<f64> = (0..self.labels.len())
            .map(|i| {
                let mut h = Sha256::new();
                h.update(base);
                h.update((i as u64).to_le_bytes());
                let d = h.finalize();
                let x = u64::from_le_bytes(d[..8].try_into().unwrap());
                // [-2, 2)
                (x >> 11) as f64 / (1u64 << 53) as f64 * 4.0 - 2.0
            })
            .collect();
        Ok(softmax(&logits))
    }
}

/// Returns the uniform distribution for every input.
#[derive(Debug, Clone)]
pub struct UniformScorer {
    labels: Vec<String>,
}

impl UniformScorer {
    pub fn new(labels: &[&str]) -> Self {
        UniformScorer {
            labels: labels.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl Scorer for UniformScorer {
    fn model_id(&self) -> &str {
        "uniform"
    }

    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn score(&self, _text: &str) -> std::result::Result<Vec<f64>, String> {
        let n = self.labels.len();
        Ok(vec![1.0 / n as f64; n])
    }
}

/// Scores computed elsewhere (for example by a hosted model) and stored as
/// CSV: a `text_sha256` column followed by one probability column per
/// label. Lookups hash the exact text passed to [`Scorer::score`].
#[derive(Debug, Clone)]
pub struct PrecomputedScorer {
    model_id: String,
    labels: Vec<String>,
    rows: BTreeMap<String, Vec<f64>>,
}

impl PrecomputedScorer {
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(format!("file:{}", path.display()), file)
    }

    pub fn from_reader<R: Read>(model_id: String, reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.get(0) != Some("text_sha256") || headers.len() < 2 {
            return Err(Error::Schema(
                "precomputed scores need a `text_sha256` column followed by label columns".into(),
            ));
        }
        let labels: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
        let mut rows = BTreeMap::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            let values = record
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::Validation(vec![(i + 1, e.to_string())]))?;
            rows.insert(record[0].to_string(), values);
        }
        Ok(PrecomputedScorer {
            model_id,
            labels,
            rows,
        })
    }

    pub fn text_key(text: &str) -> String {
        content_hash(text.as_bytes())
    }
}

impl Scorer for PrecomputedScorer {
    fn model_id(&self) -> &str {
        &self.model_id
    }

    fn labels(&self) -> &[String] {
        &self.labels
    }

    fn score(&self, text: &str) -> std::result::Result<Vec<f64>, String> {
        self.rows
            .get(&Self::text_key(text))
            .cloned()
            .ok_or_else(|| "no precomputed score for this text".to_string())
    }
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MedicationLexicon {
    names: BTreeSet<String>,
}

impl MedicationLexicon {
    /// Antidepressant generic and brand names bundled with the crate.
    pub fn shipped() -> Self {
        Self::from_lines(SHIPPED_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_lines(&text)
    }

    /// Newline-delimited names; blank lines and `#` comments ignored.
    pub fn from_lines(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn new<I, S>(names: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let names: BTreeSet<String> = names
            .into_iter()
            .map(|n| n.as_ref().trim().to_lowercase())
            .filter(|n| !n.is_empty())
            .collect();
        if names.is_empty() {
            return Err(Error::Config("medication lexicon is empty".into()));
        }
        Ok(MedicationLexicon { names })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.contains(name)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn hash(&self) -> String {
        let joined: Vec<&str> = self.names.iter().map(String::as_str).collect();
        content_hash(joined.join("\n").as_bytes())
    }

    fn max_words(&self) -> usize {
        self.names
            .iter()
            .map(|n| n.split_whitespace().count())
            .max()
            .unwrap_or(1)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MedicationMatches {
    pub count: usize,
    pub matches: BTreeSet<String>,
}

static WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[\p{L}\p{N}]+").unwrap());

/// Whole-token lexicon lookup. Multi-word names match consecutive tokens.
pub fn find_medications(text: &str, lexicon: &MedicationLexicon) -> Result<MedicationMatches> {
    if lexicon.is_empty() {
        return Err(Error::Config("medication lexicon is empty".into()));
    }
    let tokens: Vec<String> = WORD
        .find_iter(text)
        .map(|m| m.as_str().to_lowercase())
        .collect();
    let max_words = lexicon.max_words();
    let mut out = MedicationMatches::default();
    let mut i = 0;
    while i < tokens.len() {
        let mut hit = None;
        for len in (1..=max_words.min(tokens.len() - i)).rev() {
            let candidate = tokens[i..i + len].join(" ");
            if lexicon.contains(&candidate) {
                hit = Some((len, candidate));
                break;
            }
        }
        match hit {
            Some((len, name)) => {
                out.count += 1;
                out.matches.insert(name);
                i += len;
            }
            None => i += 1,
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturePreset {
    /// Emotion probabilities followed by sentiment probabilities (31 dims
    /// with the default 28-way taxonomy).
    #[serde(rename = "emotion28_sent3")]
    EmotionSentiment,
    /// As above plus `min(count, 5) / 5` medication mentions.
    #[serde(rename = "emotion28_sent3_med")]
    EmotionSentimentMedication,
}

impl FeaturePreset {
    pub fn name(self) -> &'static str {
        match self {
            FeaturePreset::EmotionSentiment => "emotion28_sent3",
            FeaturePreset::EmotionSentimentMedication => "emotion28_sent3_med",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.trim() {
            "emotion28_sent3" => Some(FeaturePreset::EmotionSentiment),
            "emotion28_sent3_med" => Some(FeaturePreset::EmotionSentimentMedication),
            _ => None,
        }
    }

    pub fn uses_medication(self) -> bool {
        self == FeaturePreset::EmotionSentimentMedication
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub names: Vec<String>,
}

impl FeatureSchema {
    pub fn for_preset(preset: FeaturePreset, emotion_labels: &[String]) -> Self {
        let mut names: Vec<String> = emotion_labels.iter().map(|l| format!("emotion.{l}")).collect();
        names.extend(SENTIMENT_LABELS.iter().map(|l| format!("sentiment.{l}")));
        if preset.uses_medication() {
            names.push("medication.count_norm".to_string());
        }
        FeatureSchema { names }
    }

    pub fn default_schema() -> Self {
        let labels: Vec<String> = EMOTION_TAXONOMY.iter().map(|s| s.to_string()).collect();
        Self::for_preset(FeaturePreset::EmotionSentiment, &labels)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn hash(&self) -> String {
        content_hash(self.names.join("\n").as_bytes())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub schema: Arc<FeatureSchema>,
}

impl FeatureVector {
    pub fn new(values: Vec<f64>, schema: Arc<FeatureSchema>) -> Result<Self> {
        if values.len() != schema.len() {
            return Err(Error::Schema(format!(
                "feature vector has {} values for a {}-entry schema",
                values.len(),
                schema.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Schema(format!(
                "feature {} is not finite",
                schema.names[i]
            )));
        }
        Ok(FeatureVector { values, schema })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn check_distribution(
    post: &Post,
    what: &str,
    probs: &[f64],
    expected_len: usize,
) -> Result<()> {
    if probs.len() != expected_len {
        return Err(Error::Schema(format!(
            "{what} scorer returned {} probabilities, expected {expected_len}",
            probs.len()
        )));
    }
    let sum: f64 = probs.iter().sum();
    let valid = probs.iter().all(|p| p.is_finite() && (0.0..=1.0).contains(p))
        && (sum - 1.0).abs() <= PROBABILITY_TOLERANCE;
    if !valid {
        return Err(Error::FeatureExtraction {
            post_id: post.id.clone(),
            reason: format!("{what} scorer returned an invalid distribution (sum {sum})"),
        });
    }
    Ok(())
}

/// Builds one post's auxiliary vector. Layout: emotion block, sentiment
/// block, then the medication entry for the `_med` preset.
pub fn build_feature_vector(
    post: &Post,
    emotion: &dyn Scorer,
    sentiment: &dyn Scorer,
    lexicon: &MedicationLexicon,
    preset: FeaturePreset,
) -> Result<FeatureVector> {
    let schema = Arc::new(FeatureSchema::for_preset(preset, emotion.labels()));
    build_with_schema(post, emotion, sentiment, lexicon, preset, schema)
}

fn build_with_schema(
    post: &Post,
    emotion: &dyn Scorer,
    sentiment: &dyn Scorer,
    lexicon: &MedicationLexicon,
    preset: FeaturePreset,
    schema: Arc<FeatureSchema>,
) -> Result<FeatureVector> {
    if sentiment.labels().len() != SENTIMENT_LABELS.len() {
        return Err(Error::Schema(format!(
            "sentiment scorer {} declares {} labels, expected 3",
            sentiment.model_id(),
            sentiment.labels().len()
        )));
    }
    let fail = |reason: String| Error::FeatureExtraction {
        post_id: post.id.clone(),
        reason,
    };
    let emo = emotion.score(&post.text).map_err(|e| fail(format!("emotion scorer: {e}")))?;
    check_distribution(post, "emotion", &emo, emotion.labels().len())?;
    let sent = sentiment
        .score(&post.text)
        .map_err(|e| fail(format!("sentiment scorer: {e}")))?;
    check_distribution(post, "sentiment", &sent, SENTIMENT_LABELS.len())?;

    let mut values = emo;
    values.extend(sent);
    if preset.uses_medication() {
        let hits = find_medications(&post.text, lexicon)?;
        values.push(hits.count.min(MEDICATION_CAP) as f64 / MEDICATION_CAP as f64);
    }
    FeatureVector::new(values, schema)
}

/// Scorers, lexicon and preset bundled for corpus-wide extraction.
pub struct FeatureExtractor {
    pub emotion: Box<dyn Scorer>,
    pub sentiment: Box<dyn Scorer>,
    pub lexicon: MedicationLexicon,
    pub preset: FeaturePreset,
}

impl FeatureExtractor {
    /// Hash-based stub scorers and the shipped lexicon.
    pub fn offline(preset: FeaturePreset) -> Self {
        FeatureExtractor {
            emotion: Box::new(HashScorer::emotion()),
            sentiment: Box::new(HashScorer::sentiment()),
            lexicon: MedicationLexicon::shipped(),
            preset,
        }
    }

    pub fn schema(&self) -> FeatureSchema {
        FeatureSchema::for_preset(self.preset, self.emotion.labels())
    }

    /// Identifies everything that influences extracted values. `extra`
    /// carries upstream settings (such as the cleaning configuration).
    pub fn config_hash(&self, extra: &str) -> String {
        let key = serde_json::json!({
            "preset": self.preset.name(),
            "schema": self.schema().names,
            "emotion_model_id": self.emotion.model_id(),
            "sentiment_model_id": self.sentiment.model_id(),
            "lexicon": if self.preset.uses_medication() { self.lexicon.hash() } else { String::new() },
            "extra": extra,
        });
        content_hash(key.to_string().as_bytes())
    }

    pub fn extract(&self, post: &Post) -> Result<FeatureVector> {
        build_feature_vector(
            post,
            self.emotion.as_ref(),
            self.sentiment.as_ref(),
            &self.lexicon,
            self.preset,
        )
    }

    pub fn extract_corpus(&self, corpus: &Corpus, config_hash: &str) -> Result<FeatureTable> {
        let schema = Arc::new(self.schema());
        let mut rows = BTreeMap::new();
        for post in corpus.iter() {
            let fv = build_with_schema(
                post,
                self.emotion.as_ref(),
                self.sentiment.as_ref(),
                &self.lexicon,
                self.preset,
                schema.clone(),
            )?;
            rows.insert(post.id.clone(), fv.values);
        }
        Ok(FeatureTable {
            schema,
            preset: self.preset,
            config_hash: config_hash.to_string(),
            rows,
        })
    }
}

/// Feature vectors keyed by post id, all sharing one schema.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub schema: Arc<FeatureSchema>,
    pub preset: FeaturePreset,
    pub config_hash: String,
    pub rows: BTreeMap<String, Vec<f64>>,
}

impl FeatureTable {
    pub fn get(&self, id: &str) -> Option<FeatureVector> {
        self.rows.get(id).map(|v| FeatureVector {
            values: v.clone(),
            schema: self.schema.clone(),
        })
    }

    pub fn values(&self, id: &str) -> Option<&[f64]> {
        self.rows.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.schema.len()
    }

    pub fn insert(&mut self, id: String, values: Vec<f64>) -> Result<()> {
        if values.len() != self.schema.len() {
            return Err(Error::Schema(format!(
                "row {id} has {} values, schema has {}",
                values.len(),
                self.schema.len()
            )));
        }
        self.rows.insert(id, values);
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheSidecar {
    schema: Vec<String>,
    preset: FeaturePreset,
    config_hash: String,
}

/// Sidecar path for a feature cache CSV: `features.csv` → `features.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Extracts features for every post and writes the cache pair (CSV plus
/// JSON sidecar).
pub fn cache_features(
    corpus: &Corpus,
    extractor: &FeatureExtractor,
    config_hash: &str,
    path: &Path,
) -> Result<FeatureTable> {
    let table = extractor.extract_corpus(corpus, config_hash)?;
    save_features(&table, path)?;
    Ok(table)
}

pub fn save_features(table: &FeatureTable, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    let mut header = vec!["id".to_string()];
    header.extend(table.schema.names.iter().cloned());
    w.write_record(&header)?;
    for (id, values) in &table.rows {
        let mut record = vec![id.clone()];
        // `{}` on f64 prints the shortest string that parses back exactly.
        record.extend(values.iter().map(|v| format!("{v}")));
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let sidecar = CacheSidecar {
        schema: table.schema.names.clone(),
        preset: table.preset,
        config_hash: table.config_hash.clone(),
    };
    let side = sidecar_path(path);
    std::fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))?;
    Ok(())
}

/// Loads a feature cache, refusing it when its config hash differs from
/// `expected_hash`.
pub fn load_features(path: &Path, expected_hash: &str) -> Result<FeatureTable> {
    let table = load_features_unchecked(path)?;
    if table.config_hash != expected_hash {
        return Err(Error::StaleCache {
            path: path.to_path_buf(),
            expected: expected_hash.to_string(),
            found: table.config_hash,
        });
    }
    Ok(table)
}

pub fn load_features_unchecked(path: &Path) -> Result<FeatureTable> {
    let side = sidecar_path(path);
    let sidecar: CacheSidecar = serde_json::from_str(
        &std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?,
    )?;
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.first().map(String::as_str) != Some("id") || header[1..] != sidecar.schema[..] {
        return Err(Error::Schema(format!(
            "feature cache header does not match sidecar schema in {}",
            side.display()
        )));
    }
    let mut rows = BTreeMap::new();
    for (i, record) in rdr.records().enumerate() {
        let record = record?;
        let values = record
            .iter()
            .skip(1)
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Validation(vec![(i + 1, e.to_string())]))?;
        rows.insert(record[0].to_string(), values);
    }
    Ok(FeatureTable {
        schema: Arc::new(FeatureSchema {
            names: sidecar.schema,
        }),
        preset: sidecar.preset,
        config_hash: sidecar.config_hash,
        rows,
    })
}
