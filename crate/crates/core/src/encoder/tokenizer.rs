//! Tokenizers feeding the encoder: the checkpoint's own tokenizer and a
//! hashing tokenizer for the toy encoder.

use std::path::Path;

use tokenizers::models::wordpiece::WordPiece;
use tokenizers::normalizers::BertNormalizer;
use tokenizers::pre_tokenizers::bert::BertPreTokenizer;

use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub trait Tokenizer: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn cls_id(&self) -> u32;
    fn sep_id(&self) -> u32;
    fn pad_id(&self) -> u32;
    fn mask_id(&self) -> u32;

    /// Word-level pieces for one pre-split word, without special tokens.
    fn word_ids(&self, word: &str) -> Vec<u32>;

    /// Surface form of an id, or `None` for ids without one (specials,
    /// continuation pieces, hashed ids).
    fn token_text(&self, id: u32) -> Option<String>;

    /// Splits raw text into words the way `word_ids` expects them.
    fn pre_tokenize(&self, text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }

    /// `[CLS] pieces… [SEP]`, truncated so the whole sequence fits in
    /// `max_tokens`.
    fn encode(&self, text: &str, max_tokens: usize) -> Vec<u32> {
        let budget = max_tokens.saturating_sub(2);
        let mut ids = Vec::with_capacity(budget.min(512) + 2);
        ids.push(self.cls_id());
        'words: for word in self.pre_tokenize(text) {
            for id in self.word_ids(&word) {
                if ids.len() > budget {
                    break 'words;
                }
                ids.push(id);
            }
        }
        ids.push(self.sep_id());
        ids
    }
}

/// Maps each whitespace token to a bucket by hash. Ids 0..5 are reserved
/// for `[PAD] [UNK] [CLS] [SEP] [MASK]`.
#[derive(Debug, Clone)]
pub struct HashTokenizer {
    vocab_size: usize,
}

const HASH_RESERVED: usize = 5;

impl HashTokenizer {
    pub fn new(vocab_size: usize) -> Result<Self> {
        if vocab_size <= HASH_RESERVED {
            return Err(Error::Config(format!(
                "hash tokenizer needs more than {HASH_RESERVED} ids, got {vocab_size}"
            )));
        }
        Ok(HashTokenizer { vocab_size })
    }
}

impl Tokenizer for HashTokenizer {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
    fn pad_id(&self) -> u32 {
        0
    }
    fn cls_id(&self) -> u32 {
        2
    }
    fn sep_id(&self) -> u32 {
        3
    }
    fn mask_id(&self) -> u32 {
        4
    }

    fn word_ids(&self, word: &str) -> Vec<u32> {
        let buckets = (self.vocab_size - HASH_RESERVED) as u64;
        vec![(HASH_RESERVED as u64 + derive_seed(0, word) % buckets) as u32]
    }

    fn token_text(&self, _id: u32) -> Option<String> {
        None
    }
}

/// Tokenizer of a hub checkpoint: `tokenizer.json` when the directory has
/// one, otherwise an uncased BERT WordPiece pipeline over `vocab.txt`.
#[derive(Clone)]
pub struct HubTokenizer {
    inner: tokenizers::Tokenizer,
    cls: u32,
    sep: u32,
    pad: u32,
    mask: u32,
}

impl std::fmt::Debug for HubTokenizer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HubTokenizer")
            .field("vocab_size", &self.inner.get_vocab_size(true))
            .finish()
    }
}

fn hub_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("cannot build tokenizer from {}: {e}", path.display()))
}

impl HubTokenizer {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let json = dir.join("tokenizer.json");
        if json.is_file() {
            let inner = tokenizers::Tokenizer::from_file(&json).map_err(|e| hub_error(&json, e))?;
            return Self::new(inner, &json);
        }
        Self::from_vocab_file(&dir.join("vocab.txt"))
    }

    /// Uncased WordPiece over a one-token-per-line vocabulary.
    pub fn from_vocab_file(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Config(format!("missing tokenizer vocabulary {}", path.display())));
        }
        let model = WordPiece::from_file(&path.to_string_lossy())
            .unk_token("[UNK]".into())
            .build()
            .map_err(|e| hub_error(path, e))?;
        let mut inner = tokenizers::Tokenizer::new(model);
        inner
            .with_normalizer(Some(BertNormalizer::new(true, true, None, true)))
            .with_pre_tokenizer(Some(BertPreTokenizer));
        Self::new(inner, path)
    }

    fn new(inner: tokenizers::Tokenizer, origin: &Path) -> Result<Self> {
        let special = |names: &[&str]| {
            names
                .iter()
                .find_map(|n| inner.token_to_id(n))
                .ok_or_else(|| Error::Config(format!("{} lacks {}", origin.display(), names[0])))
        };
        Ok(HubTokenizer {
            cls: special(&["[CLS]", "<s>"])?,
            sep: special(&["[SEP]", "</s>"])?,
            pad: special(&["[PAD]", "<pad>"])?,
            mask: special(&["[MASK]", "<mask>"])?,
            inner,
        })
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.inner.token_to_id(token)
    }

    fn pieces(&self, text: &str) -> Vec<u32> {
        match self.inner.encode(text, false) {
            Ok(enc) => enc.get_ids().to_vec(),
            Err(e) => {
                log::warn!("tokenizer failed on {text:?}: {e}");
                Vec::new()
            }
        }
    }
}

impl Tokenizer for HubTokenizer {
    fn vocab_size(&self) -> usize {
        self.inner.get_vocab_size(true)
    }
    fn cls_id(&self) -> u32 {
        self.cls
    }
    fn sep_id(&self) -> u32 {
        self.sep
    }
    fn pad_id(&self) -> u32 {
        self.pad
    }
    fn mask_id(&self) -> u32 {
        self.mask
    }

    fn word_ids(&self, word: &str) -> Vec<u32> {
        self.pieces(word)
    }

    fn token_text(&self, id: u32) -> Option<String> {
        let t = self.inner.id_to_token(id)?;
        let special = [self.cls, self.sep, self.pad, self.mask].contains(&id)
            || (t.starts_with('[') && t.ends_with(']'));
        (!special && !t.starts_with("##")).then_some(t)
    }

    fn encode(&self, text: &str, max_tokens: usize) -> Vec<u32> {
        let mut ids = vec![self.cls];
        let pieces = self.pieces(text);
        ids.extend_from_slice(&pieces[..pieces.len().min(max_tokens.saturating_sub(2))]);
        ids.push(self.sep);
        ids
    }
}
