//! Severity-labelled posts: loading, validation, label statistics and the
//! seeded stratified train/test split.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_for;

pub const SCHEMA_VERSION: &str = "1";

/// Ordinal depression-severity level. Class order is fixed everywhere:
/// minimum, mild, moderate, severe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Minimum = 0,
    Mild = 1,
    Moderate = 2,
    Severe = 3,
}

impl Label {
    pub const ALL: [Label; 4] = [Label::Minimum, Label::Mild, Label::Moderate, Label::Severe];
    pub const COUNT: usize = 4;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Label> {
        Label::ALL.get(index).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Minimum => "minimum",
            Label::Mild => "mild",
            Label::Moderate => "moderate",
            Label::Severe => "severe",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Label {
    type Err = String;

    /// Accepts the class names in any case, or the integers 0-3.
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let token = s.trim();
        if let Ok(i) = token.parse::<usize>() {
            return Label::from_index(i).ok_or_else(|| format!("unknown label {token:?}"));
        }
        match token.to_ascii_lowercase().as_str() {
            "minimum" => Ok(Label::Minimum),
            "mild" => Ok(Label::Mild),
            "moderate" => Ok(Label::Moderate),
            "severe" => Ok(Label::Severe),
            _ => Err(format!("unknown label {token:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Original,
    Augmented,
}

impl Origin {
    fn as_str(self) -> &'static str {
        match self {
            Origin::Original => "original",
            Origin::Augmented => "augmented",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Post {
    pub id: String,
    pub text: String,
    pub label: Label,
    pub origin: Origin,
    pub parent_id: Option<String>,
}

impl Post {
    pub fn original(id: impl Into<String>, text: impl Into<String>, label: Label) -> Self {
        Post {
            id: id.into(),
            text: text.into(),
            label,
            origin: Origin::Original,
            parent_id: None,
        }
    }

    pub fn is_original(&self) -> bool {
        self.origin == Origin::Original
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub posts: Vec<Post>,
    pub schema_version: String,
}

impl Corpus {
    /// Builds a corpus, checking every [`Post`] and cross-row invariant.
    pub fn new(posts: Vec<Post>) -> Result<Self> {
        validate_posts(&posts)?;
        Ok(Corpus {
            posts,
            schema_version: SCHEMA_VERSION.to_string(),
        })
    }

    /// The posts named by `ids`, in that order. Like a split half, the
    /// result may hold augmented rows without their parents.
    pub fn subset(&self, ids: &[String]) -> Result<Corpus> {
        let index = index_by_id(self);
        let mut seen = HashSet::new();
        let posts = ids
            .iter()
            .map(|id| match index.get(id.as_str()) {
                Some(&i) if seen.insert(i) => Ok(self.posts[i].clone()),
                Some(_) => Err(Error::Argument(format!("post {id} listed twice"))),
                None => Err(Error::Argument(format!("post {id} is not in the corpus"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(into_subset(posts))
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Post> {
        self.posts.iter()
    }

    pub fn get(&self, id: &str) -> Option<&Post> {
        self.posts.iter().find(|p| p.id == id)
    }

    pub fn ids(&self) -> HashSet<&str> {
        self.posts.iter().map(|p| p.id.as_str()).collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.posts.iter().map(|p| p.label).collect()
    }

    /// Number of original (non-augmented) posts per label.
    pub fn original_counts(&self) -> [usize; Label::COUNT] {
        let mut counts = [0; Label::COUNT];
        for p in self.posts.iter().filter(|p| p.is_original()) {
            counts[p.label.index()] += 1;
        }
        counts
    }

    /// Writes the canonical corpus CSV (`id,text,label,origin,parent_id`).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["id", "text", "label", "origin", "parent_id"])?;
        for p in &self.posts {
            w.write_record([
                p.id.as_str(),
                p.text.as_str(),
                p.label.name(),
                p.origin.as_str(),
                p.parent_id.as_deref().unwrap_or(""),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv writer>", e))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    Csv,
}

pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<Corpus> {
    match format {
        DatasetFormat::Csv => {
            let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            read_csv(file)
        }
    }
}

/// Parses a dataset CSV. Required columns: `text`, `label`. Optional columns
/// `id`, `origin` and `parent_id` are honoured when present (canonical
/// corpus files carry them); ids default to the 0-based row index.
pub fn read_csv<R: Read>(reader: R) -> Result<Corpus> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(reader);
    let headers = match rdr.headers() {
        Ok(h) => h.clone(),
        Err(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => return Err(e.into()),
        Err(_) => return Err(Error::EmptyCorpus),
    };
    if headers.is_empty() || (headers.len() == 1 && headers[0].trim().is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim().trim_start_matches('\u{feff}').eq_ignore_ascii_case(name))
    };
    let text_col = column("text").ok_or_else(|| Error::Schema("missing column `text`".into()))?;
    let label_col = column("label").ok_or_else(|| Error::Schema("missing column `label`".into()))?;
    let id_col = column("id");
    let origin_col = column("origin");
    let parent_col = column("parent_id");

    let mut posts = Vec::new();
    let mut bad = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record?;
        let text = record.get(text_col).unwrap_or_default().to_string();
        let label = match record.get(label_col).unwrap_or_default().parse::<Label>() {
            Ok(l) => Some(l),
            Err(reason) => {
                bad.push((row, reason));
                None
            }
        };
        if text.trim().is_empty() {
            bad.push((row, "empty text".to_string()));
        }
        let id = id_col
            .and_then(|c| record.get(c))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .unwrap_or_else(|| i.to_string());
        let origin = match origin_col.and_then(|c| record.get(c)).map(str::trim) {
            None | Some("") | Some("original") => Origin::Original,
            Some("augmented") => Origin::Augmented,
            Some(other) => {
                bad.push((row, format!("unknown origin {other:?}")));
                Origin::Original
            }
        };
        let parent_id = parent_col
            .and_then(|c| record.get(c))
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string);
        if let Some(label) = label {
            posts.push(Post {
                id,
                text,
                label,
                origin,
                parent_id,
            });
        }
    }
    if !bad.is_empty() {
        return Err(Error::Validation(bad));
    }
    if posts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Corpus::new(posts)
}

fn validate_posts(posts: &[Post]) -> Result<()> {
    let mut bad = Vec::new();
    let mut seen = HashSet::new();
    let originals: HashSet<&str> = posts
        .iter()
        .filter(|p| p.is_original())
        .map(|p| p.id.as_str())
        .collect();
    for (i, p) in posts.iter().enumerate() {
        let row = i + 1;
        if p.text.trim().is_empty() {
            bad.push((row, "empty text".to_string()));
        }
        if !seen.insert(p.id.as_str()) {
            bad.push((row, format!("duplicate id {:?}", p.id)));
        }
        match (p.origin, &p.parent_id) {
            (Origin::Original, None) => {}
            (Origin::Original, Some(_)) => {
                bad.push((row, "original post must not carry parent_id".to_string()))
            }
            (Origin::Augmented, None) => {
                bad.push((row, "augmented post is missing parent_id".to_string()))
            }
            (Origin::Augmented, Some(parent)) if !originals.contains(parent.as_str()) => bad.push((
                row,
                format!("parent_id {parent:?} does not name an original post"),
            )),
            (Origin::Augmented, Some(_)) => {}
        }
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(bad))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDistribution {
    pub counts: BTreeMap<Label, usize>,
    pub fractions: BTreeMap<Label, f64>,
}

impl LabelDistribution {
    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }

    pub fn count(&self, label: Label) -> usize {
        self.counts.get(&label).copied().unwrap_or(0)
    }

    pub fn fraction(&self, label: Label) -> f64 {
        self.fractions.get(&label).copied().unwrap_or(0.0)
    }
}

pub fn label_distribution(corpus: &Corpus) -> Result<LabelDistribution> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut counts: BTreeMap<Label, usize> = Label::ALL.iter().map(|&l| (l, 0)).collect();
    for p in corpus.iter() {
        *counts.entry(p.label).or_default() += 1;
    }
    let total = corpus.len() as f64;
    let fractions = counts
        .iter()
        .map(|(&l, &c)| (l, c as f64 / total))
        .collect();
    Ok(LabelDistribution { counts, fractions })
}

/// Stratified seeded split. See [`split_with`].
pub fn split(corpus: &Corpus, train_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    split_with(corpus, train_fraction, seed, true)
}

/// Partitions `corpus` into train and test sets.
///
/// The train size is `round(n * train_fraction)`. When `stratified`, that
/// total is apportioned to classes by largest remainder, so each class
/// contributes `floor` or `ceil` of `count * train_fraction`. Members are
/// chosen by a seeded shuffle; both halves keep the corpus order.
pub fn split_with(
    corpus: &Corpus,
    train_fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<(Corpus, Corpus)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Argument(format!(
            "train_fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let n = corpus.len();
    let target = (n as f64 * train_fraction).round() as usize;
    let mut rng = rng_for(seed, "split");
    let mut in_train = vec![false; n];

    if stratified {
        let mut groups: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
        for (i, p) in corpus.iter().enumerate() {
            groups.entry(p.label).or_default().push(i);
        }
        let mut quotas: Vec<(Label, usize, f64)> = groups
            .iter()
            .map(|(&l, idx)| {
                let exact = idx.len() as f64 * train_fraction;
                (l, exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let mut assigned: usize = quotas.iter().map(|q| q.1).sum();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| {
            quotas[b]
                .2
                .partial_cmp(&quotas[a].2)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        for &q in order.iter().cycle().take(order.len()) {
            if assigned >= target {
                break;
            }
            if quotas[q].2 > 0.0 {
                quotas[q].1 += 1;
                assigned += 1;
            }
        }
        for (label, quota, _) in quotas {
            let mut idx = groups[&label].clone();
            idx.shuffle(&mut rng);
            for &i in idx.iter().take(quota) {
                in_train[i] = true;
            }
        }
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(target) {
            in_train[i] = true;
        }
    }

    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (p, &t) in corpus.iter().zip(&in_train) {
        if t {
            train.push(p.clone());
        } else {
            test.push(p.clone());
        }
    }
    Ok((into_subset(train), into_subset(test)))
}

/// A subset may contain augmented rows whose parents fell on the other side
/// of a split, so it skips parent-link validation.
fn into_subset(posts: Vec<Post>) -> Corpus {
    Corpus {
        posts,
        schema_version: SCHEMA_VERSION.to_string(),
    }
}

/// Index from id to position, used by callers that join side tables.
pub fn index_by_id(corpus: &Corpus) -> HashMap<&str, usize> {
    corpus
        .iter()
        .enumerate()
        .map(|(i, p)| (p.id.as_str(), i))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus_from(labels: &[(Label, usize)]) -> Corpus {
        let mut posts = Vec::new();
        for &(label, count) in labels {
            for _ in 0..count {
                let id = posts.len().to_string();
                posts.push(Post::original(id, format!("post about {label}"), label));
            }
        }
        Corpus::new(posts).unwrap()
    }

    #[test]
    fn subset_keeps_order_and_allows_orphaned_augmented_rows() {
        let mut posts = corpus_from(&[(Label::Mild, 2)]).posts;
        posts.push(Post {
            id: "0-aug0".into(),
            text: "augmented".into(),
            label: Label::Mild,
            origin: Origin::Augmented,
            parent_id: Some("0".into()),
        });
        let corpus = Corpus::new(posts).unwrap();
        let sub = corpus.subset(&["0-aug0".into(), "1".into()]).unwrap();
        assert_eq!(sub.iter().map(|p| p.id.as_str()).collect::<Vec<_>>(), ["0-aug0", "1"]);
        assert!(corpus.subset(&["9".into()]).is_err());
        assert!(corpus.subset(&["1".into(), "1".into()]).is_err());
    }

    #[test]
    fn three_row_file_parses_labels() {
        let csv = "text,label\nfine today,minimum\nbit low,Mild\nawful,SEVERE\n";
        let corpus = read_csv(csv.as_bytes()).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.labels(), vec![Label::Minimum, Label::Mild, Label::Severe]);
        assert_eq!(corpus.posts[1].id, "1");
        assert!(corpus.iter().all(Post::is_original));
    }

    #[test]
    fn integer_labels_accepted() {
        let csv = "label,text\n0,a\n3,b\n";
        let corpus = read_csv(csv.as_bytes()).unwrap();
        assert_eq!(corpus.labels(), vec![Label::Minimum, Label::Severe]);
    }

    #[test]
    fn unknown_label_names_the_row() {
        let csv = "text,label\nok,mild\nhmm,extreme\n";
        let err = read_csv(csv.as_bytes()).unwrap_err();
        match err {
            Error::Validation(rows) => {
                assert_eq!(rows.len(), 1);
                assert_eq!(rows[0].0, 2);
                assert!(rows[0].1.contains("extreme"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn missing_column_is_schema_error() {
        let err = read_csv("body,label\nx,mild\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Schema(_)));
    }

    #[test]
    fn empty_inputs_are_empty_corpus() {
        assert!(matches!(read_csv("".as_bytes()), Err(Error::EmptyCorpus)));
        assert!(matches!(read_csv("text,label\n".as_bytes()), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn blank_text_rejected() {
        let err = read_csv("text,label\n\"   \",mild\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::Validation(ref r) if r[0].0 == 1));
    }

    #[test]
    fn augmented_rows_need_existing_parent() {
        let mut posts = vec![Post::original("a", "x", Label::Mild)];
        posts.push(Post {
            id: "b".into(),
            text: "y".into(),
            label: Label::Mild,
            origin: Origin::Augmented,
            parent_id: Some("zzz".into()),
        });
        assert!(matches!(Corpus::new(posts), Err(Error::Validation(_))));
    }

    #[test]
    fn distribution_arithmetic() {
        let corpus = corpus_from(&[(Label::Minimum, 3), (Label::Mild, 1)]);
        let dist = label_distribution(&corpus).unwrap();
        assert_eq!(dist.fraction(Label::Minimum), 0.75);
        assert_eq!(dist.fraction(Label::Mild), 0.25);
        assert_eq!(dist.fraction(Label::Moderate), 0.0);
        assert_eq!(dist.fraction(Label::Severe), 0.0);

        let single = corpus_from(&[(Label::Severe, 7)]);
        assert_eq!(label_distribution(&single).unwrap().fraction(Label::Severe), 1.0);
    }

    #[test]
    fn distribution_of_empty_corpus_fails() {
        let empty = Corpus {
            posts: vec![],
            schema_version: SCHEMA_VERSION.into(),
        };
        assert!(matches!(label_distribution(&empty), Err(Error::EmptyCorpus)));
    }

    #[test]
    fn split_sizes_and_determinism() {
        let corpus = corpus_from(&[(Label::Minimum, 50), (Label::Mild, 50)]);
        let (train, test) = split(&corpus, 0.8, 11).unwrap();
        assert_eq!((train.len(), test.len()), (80, 20));
        let (train2, _) = split(&corpus, 0.8, 11).unwrap();
        assert_eq!(train, train2);
        let (train3, _) = split(&corpus, 0.8, 12).unwrap();
        assert_ne!(train, train3);
    }

    #[test]
    fn split_rejects_bad_fraction() {
        let corpus = corpus_from(&[(Label::Minimum, 4)]);
        for f in [0.0, 1.0, -0.2, 1.5, f64::NAN] {
            assert!(matches!(split(&corpus, f, 0), Err(Error::Argument(_))));
        }
    }

    #[test]
    fn stratification_within_one_on_40_30_20_10() {
        let corpus = corpus_from(&[
            (Label::Minimum, 40),
            (Label::Mild, 30),
            (Label::Moderate, 20),
            (Label::Severe, 10),
        ]);
        for seed in 0..20 {
            for fraction in [0.8, 0.7, 0.33] {
                let (train, test) = split(&corpus, fraction, seed).unwrap();
                assert_eq!(train.len() + test.len(), corpus.len());
                for label in Label::ALL {
                    let total = corpus.iter().filter(|p| p.label == label).count() as f64;
                    let got = train.iter().filter(|p| p.label == label).count() as f64;
                    assert!((got - total * fraction).abs() <= 1.0, "{label} {got} vs {}", total * fraction);
                }
            }
        }
    }

    #[test]
    fn unstratified_split_is_partition() {
        let corpus = corpus_from(&[(Label::Minimum, 13), (Label::Severe, 6)]);
        let (train, test) = split_with(&corpus, 0.5, 3, false).unwrap();
        assert_eq!(train.len(), 10);
        let a = train.ids();
        let b = test.ids();
        assert!(a.is_disjoint(&b));
        assert_eq!(a.len() + b.len(), corpus.len());
    }
}
