//! Text cleaning applied before feature extraction, augmentation and
//! encoding.
//!
//! Steps always run in one canonical order regardless of how the caller
//! lists them:
//!
//! `strip_html → strip_urls → strip_mentions → strip_emoji → lowercase →
//! expand_contractions → strip_punct → collapse_whitespace`
//!
//! Contractions are expanded before punctuation is stripped so that
//! `can't` becomes `cannot` rather than `cant`.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Post};
use crate::error::{Error, Result};

const SHIPPED_CONTRACTIONS: &str = include_str!("../data/contractions.csv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CleaningStep {
    StripHtml,
    StripUrls,
    StripMentions,
    StripEmoji,
    Lowercase,
    ExpandContractions,
    StripPunct,
    CollapseWhitespace,
}

impl CleaningStep {
    /// Canonical execution order.
    pub const CANONICAL: [CleaningStep; 8] = [
        CleaningStep::StripHtml,
        CleaningStep::StripUrls,
        CleaningStep::StripMentions,
        CleaningStep::StripEmoji,
        CleaningStep::Lowercase,
        CleaningStep::ExpandContractions,
        CleaningStep::StripPunct,
        CleaningStep::CollapseWhitespace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CleaningStep::StripHtml => "strip_html",
            CleaningStep::StripUrls => "strip_urls",
            CleaningStep::StripMentions => "strip_mentions",
            CleaningStep::StripEmoji => "strip_emoji",
            CleaningStep::Lowercase => "lowercase",
            CleaningStep::ExpandContractions => "expand_contractions",
            CleaningStep::StripPunct => "strip_punct",
            CleaningStep::CollapseWhitespace => "collapse_whitespace",
        }
    }

    pub fn parse(name: &str) -> Option<CleaningStep> {
        CleaningStep::CANONICAL
            .into_iter()
            .find(|s| s.name() == name.trim())
    }
}

/// Lowercase contraction/abbreviation → expansion map.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContractionTable(BTreeMap<String, String>);

impl ContractionTable {
    /// The table bundled with the crate (contractions, their apostrophe-free
    /// spellings where unambiguous, and common abbreviations).
    pub fn shipped() -> Self {
        Self::from_reader(SHIPPED_CONTRACTIONS.as_bytes()).expect("bundled contraction table is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file)
    }

    /// Reads a two-column `contraction,expansion` CSV with a header row.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let mut map = BTreeMap::new();
        for record in rdr.records() {
            let record = record?;
            if record.len() != 2 {
                return Err(Error::Config(format!(
                    "contraction table rows need 2 columns, got {}",
                    record.len()
                )));
            }
            let key = record[0].trim().replace('\u{2019}', "'");
            if key.is_empty() || key != key.to_lowercase() {
                return Err(Error::Config(format!(
                    "contraction key {key:?} must be non-empty lowercase"
                )));
            }
            map.insert(key, record[1].trim().to_string());
        }
        Ok(ContractionTable(map))
    }

    pub fn from_pairs<I, K, V>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut map = BTreeMap::new();
        for (k, v) in pairs {
            let k: String = k.into();
            if k.is_empty() || k != k.to_lowercase() {
                return Err(Error::Config(format!("contraction key {k:?} must be non-empty lowercase")));
            }
            map.insert(k, v.into());
        }
        Ok(ContractionTable(map))
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CleaningConfig {
    steps: Vec<CleaningStep>,
    contraction_table: ContractionTable,
}

impl Default for CleaningConfig {
    fn default() -> Self {
        CleaningConfig {
            steps: CleaningStep::CANONICAL.to_vec(),
            contraction_table: ContractionTable::shipped(),
        }
    }
}

impl CleaningConfig {
    /// `steps` must be listed in canonical order without repeats.
    pub fn new(steps: Vec<CleaningStep>, contraction_table: ContractionTable) -> Result<Self> {
        if steps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "cleaning steps must be a subsequence of {:?}",
                CleaningStep::CANONICAL.map(CleaningStep::name)
            )));
        }
        Ok(CleaningConfig {
            steps,
            contraction_table,
        })
    }

    pub fn steps(&self) -> &[CleaningStep] {
        &self.steps
    }

    pub fn contraction_table(&self) -> &ContractionTable {
        &self.contraction_table
    }

    pub fn without(mut self, step: CleaningStep) -> Self {
        self.steps.retain(|&s| s != step);
        self
    }

    pub fn enabled(&self, step: CleaningStep) -> bool {
        self.steps.contains(&step)
    }
}

static HTML_TAG: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?s)<!--.*?-->|</?[A-Za-z][^<>]*>").unwrap());
static HTML_ENTITY: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"&(?:[A-Za-z]{2,8}|#[0-9]{1,7}|#[xX][0-9A-Fa-f]{1,6});").unwrap());
static URL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(?:(?:https?|ftp)://|www\.)\S+|\b[a-z0-9][a-z0-9.-]*\.(?:com|org|net|edu|gov|io|co|ly|me|us|uk|gl|tv|info|it)\b(?:/\S*)?",
    )
    .unwrap()
});
static SUB_USER_MENTION: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)(^|[^\w/])/?[ur]/[\w-]+").unwrap());
static AT_MENTION: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(^|[^\w])@\w+").unwrap());
static CONTRACTION_TOKEN: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"[\p{L}\p{N}\p{M}'\u{2019}]+").unwrap());
static PUNCT: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"[^\p{L}\p{N}\p{M}\s]").unwrap());

/// Runs every enabled step in canonical order. Total and idempotent.
pub fn clean(text: &str, config: &CleaningConfig) -> String {
    let mut out = text.to_string();
    for step in CleaningStep::CANONICAL {
        if !config.enabled(step) {
            continue;
        }
        out = match step {
            CleaningStep::StripHtml => strip_html(&out),
            CleaningStep::StripUrls => URL.replace_all(&out, " ").into_owned(),
            CleaningStep::StripMentions => strip_mentions(&out),
            CleaningStep::StripEmoji => out.chars().filter(|&c| !is_emoji(c)).collect(),
            CleaningStep::Lowercase => out.to_lowercase(),
            CleaningStep::ExpandContractions => expand_contractions(&out, &config.contraction_table),
            CleaningStep::StripPunct => PUNCT.replace_all(&out, " ").into_owned(),
            CleaningStep::CollapseWhitespace => out.split_whitespace().collect::<Vec<_>>().join(" "),
        };
    }
    out
}

/// Cleans every post. Posts left with no text are dropped and their ids
/// returned, since an empty input cannot be encoded.
pub fn clean_corpus(corpus: &Corpus, config: &CleaningConfig) -> Result<(Corpus, Vec<String>)> {
    let mut kept = Vec::with_capacity(corpus.len());
    let mut dropped = Vec::new();
    for post in corpus.iter() {
        let text = clean(&post.text, config);
        if text.trim().is_empty() {
            dropped.push(post.id.clone());
        } else {
            kept.push(Post { text, ..post.clone() });
        }
    }
    Ok((Corpus::new(kept)?, dropped))
}

fn strip_html(text: &str) -> String {
    let no_tags = HTML_TAG.replace_all(text, " ");
    HTML_ENTITY.replace_all(&no_tags, " ").into_owned()
}

fn strip_mentions(text: &str) -> String {
    let pass = SUB_USER_MENTION.replace_all(text, "$1 ");
    AT_MENTION.replace_all(&pass, "$1 ").into_owned()
}

/// Replaces whole tokens found in `table`. A token is a maximal run of
/// letters, digits, marks and apostrophes. When a token is not itself a
/// key, its apostrophe-separated segments are matched greedily (longest
/// joined run first) so that stripping apostrophes later cannot expose a
/// key that was skipped here. Curly apostrophes match straight ones.
pub fn expand_contractions(text: &str, table: &ContractionTable) -> String {
    CONTRACTION_TOKEN
        .replace_all(text, |caps: &regex::Captures<'_>| {
            let token = caps[0].replace('\u{2019}', "'");
            if let Some(exp) = table.get(&token) {
                return exp.to_string();
            }
            let segments: Vec<&str> = token.split('\'').collect();
            let mut parts: Vec<String> = Vec::with_capacity(segments.len());
            let mut i = 0;
            while i < segments.len() {
                let mut matched = None;
                for j in (i + 1..=segments.len()).rev() {
                    let joined = segments[i..j].join("'");
                    if let Some(exp) = table.get(&joined) {
                        matched = Some((j, exp.to_string()));
                        break;
                    }
                }
                match matched {
                    Some((j, exp)) => {
                        parts.push(exp);
                        i = j;
                    }
                    None => {
                        parts.push(segments[i].to_string());
                        i += 1;
                    }
                }
            }
            parts.join("'")
        })
        .into_owned()
}

/// Emoji and pictographic codepoints, plus the joiners, selectors and tag
/// characters used to compose emoji sequences. ASCII emoticons are left to
/// the punctuation step.
pub fn is_emoji(c: char) -> bool {
    matches!(c as u32,
        0x1F000..=0x1FAFF   // mahjong, cards, enclosed, pictographs, emoticons, transport, symbols & pictographs ext.
        | 0x2600..=0x27BF   // misc symbols, dingbats
        | 0x2300..=0x23FF   // misc technical (watch, hourglass, ...)
        | 0x2B00..=0x2BFF   // arrows, stars
        | 0x2190..=0x21FF   // arrows
        | 0x25A0..=0x25FF   // geometric shapes
        | 0x2900..=0x297F   // supplemental arrows
        | 0x3030 | 0x303D | 0x3297 | 0x3299
        | 0x00A9 | 0x00AE | 0x203C | 0x2049 | 0x2122 | 0x2139 | 0x24C2
        | 0x200D            // zero-width joiner
        | 0x20E3            // combining keycap
        | 0xFE00..=0xFE0F   // variation selectors
        | 0xE0020..=0xE007F // tag characters
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> CleaningConfig {
        CleaningConfig::default()
    }

    #[test]
    fn lowercases_and_expands() {
        assert_eq!(clean("I CAN'T sleep", &cfg()), "i cannot sleep");
    }

    #[test]
    fn removes_links_emoji_and_mentions() {
        let text = "feeling low https://t.co/xyz 😢 /r/depression u/someone";
        assert_eq!(clean(text, &cfg()), "feeling low");
    }

    #[test]
    fn cant_never_becomes_cant_without_apostrophe() {
        assert_eq!(clean("can't", &cfg()), "cannot");
        assert_eq!(clean("Can\u{2019}t", &cfg()), "cannot");
        assert_ne!(clean("can't", &cfg()), "cant");
    }

    #[test]
    fn expansion_examples() {
        let table = ContractionTable::shipped();
        assert_eq!(expand_contractions("don't won't", &table), "do not will not");
        assert_eq!(expand_contractions("dont", &table), "do not");
        assert_eq!(expand_contractions("donation", &table), "donation");
        assert_eq!(expand_contractions("idk what to do", &table), "i do not know what to do");
    }

    #[test]
    fn expansion_of_segments_inside_unknown_tokens() {
        let table = ContractionTable::shipped();
        assert_eq!(expand_contractions("dont'x", &table), "do not'x");
        assert_eq!(expand_contractions("someone's", &table), "someone's");
    }

    #[test]
    fn shipped_table_is_closed_under_expansion() {
        // No expansion word may itself be a key, otherwise a second pass
        // would expand it again.
        let table = ContractionTable::shipped();
        assert!(table.len() >= 130);
        for (key, exp) in table.iter() {
            for word in exp.split_whitespace() {
                assert!(table.get(word).is_none(), "{key} -> {exp} contains key {word}");
            }
            assert!(key.chars().count() >= 2, "single-character key {key}");
        }
    }

    #[test]
    fn html_is_removed() {
        assert_eq!(clean("<p>so <b>tired</b></p>&nbsp;today", &cfg()), "so tired today");
    }

    #[test]
    fn at_mentions_removed_but_emails_kept_as_words() {
        assert_eq!(clean("thanks @friend_1 for listening", &cfg()), "thanks for listening");
    }

    #[test]
    fn emoticons_fall_to_punctuation() {
        assert_eq!(clean("ok :)", &cfg()), "ok");
        let no_punct = cfg().without(CleaningStep::StripPunct);
        assert_eq!(clean("ok :)", &no_punct), "ok :)");
    }

    #[test]
    fn emoji_sequences_removed() {
        assert_eq!(clean("tired 👩\u{200d}💻 and 1\u{fe0f}\u{20e3} sad", &cfg()), "tired and 1 sad");
    }

    #[test]
    fn step_order_validation() {
        let table = ContractionTable::shipped();
        assert!(CleaningConfig::new(
            vec![CleaningStep::Lowercase, CleaningStep::StripHtml],
            table.clone()
        )
        .is_err());
        assert!(CleaningConfig::new(
            vec![CleaningStep::StripUrls, CleaningStep::StripPunct],
            table
        )
        .is_ok());
    }

    #[test]
    fn uppercase_keys_rejected() {
        assert!(ContractionTable::from_pairs([("Don't", "do not")]).is_err());
    }

    #[test]
    fn empty_string_allowed() {
        assert_eq!(clean("", &cfg()), "");
        assert_eq!(clean("   \n\t", &cfg()), "");
    }
}
