//! Class-balanced contextual augmentation.
//!
//! A seeded pool of minority-class posts is drawn per class; each pooled
//! post yields one perturbed copy per requested copy, produced by inserting
//! or substituting masked-token predictions over its whitespace tokens.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{label_distribution, Corpus, Label, LabelDistribution, Origin, Post};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_for};

/// Where a predicted token goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Slot {
    /// A new token placed before `context[i]` (or appended when `i == len`).
    Insert(usize),
    /// `context[i]` is masked and replaced.
    Replace(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub token: String,
    pub score: f64,
}

impl Candidate {
    pub fn new(token: impl Into<String>, score: f64) -> Self {
        Candidate {
            token: token.into(),
            score,
        }
    }
}

/// Proposes tokens for a masked slot, best first. Must return at least one
/// candidate and be deterministic for a given `(context, slot)`.
pub trait MaskedTokenPredictor: Send + Sync {
    fn model_id(&self) -> &str;
    fn propose(&self, context: &[String], slot: Slot) -> std::result::Result<Vec<Candidate>, String>;
}

/// Always proposes the same token.
#[derive(Debug, Clone)]
pub struct FixedPredictor(pub String);

impl MaskedTokenPredictor for FixedPredictor {
    fn model_id(&self) -> &str {
        "fixed"
    }

    fn propose(&self, _context: &[String], _slot: Slot) -> std::result::Result<Vec<Candidate>, String> {
        Ok(vec![Candidate::new(self.0.clone(), 1.0)])
    }
}

/// Proposes the reversed original token for replacements and the reversed
/// left neighbour for insertions.
#[derive(Debug, Clone, Default)]
pub struct ReversePredictor;

impl MaskedTokenPredictor for ReversePredictor {
    fn model_id(&self) -> &str {
        "reverse"
    }

    fn propose(&self, context: &[String], slot: Slot) -> std::result::Result<Vec<Candidate>, String> {
        let source = match slot {
            Slot::Replace(i) => context.get(i),
            Slot::Insert(i) => context.get(i.saturating_sub(1)),
        }
        .ok_or_else(|| format!("slot {slot:?} outside context of {}", context.len()))?;
        Ok(vec![Candidate::new(source.chars().rev().collect::<String>(), 1.0)])
    }
}

/// Offline predictor: ranks a small filler vocabulary by a hash of the
/// neighbouring tokens. Good enough for bookkeeping runs without model
/// weights; not a language model.
#[derive(Debug, Clone)]
pub struct LexiconPredictor {
    vocabulary: Vec<String>,
}

impl Default for LexiconPredictor {
    fn default() -> Self {
        let words = [
            "really", "just", "so", "very", "always", "still", "never", "often", "truly", "quite",
            "feel", "felt", "think", "day", "life", "time", "today", "again", "even", "much",
        ];
        LexiconPredictor {
            vocabulary: words.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl MaskedTokenPredictor for LexiconPredictor {
    fn model_id(&self) -> &str {
        "offline-lexicon"
    }

    fn propose(&self, context: &[String], slot: Slot) -> std::result::Result<Vec<Candidate>, String> {
        let (left, right) = match slot {
            Slot::Insert(i) => (i.checked_sub(1).and_then(|j| context.get(j)), context.get(i)),
            Slot::Replace(i) => (i.checked_sub(1).and_then(|j| context.get(j)), context.get(i + 1)),
        };
        let key = format!(
            "{}|{}",
            left.map(String::as_str).unwrap_or(""),
            right.map(String::as_str).unwrap_or("")
        );
        let mut ranked: Vec<Candidate> = self
            .vocabulary
            .iter()
            .map(|w| {
                let h = derive_seed(0, &format!("{key}|{w}"));
                Candidate::new(w.clone(), (h >> 11) as f64 / (1u64 << 53) as f64)
            })
            .collect();
        ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(ranked)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AugmentOp {
    Insert,
    Substitute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub per_class_samples: BTreeMap<Label, usize>,
    pub ops: BTreeSet<AugmentOp>,
    /// Fraction of tokens touched per operation.
    pub rate: f64,
    pub copies_per_sample: usize,
    pub seed: u64,
}

impl Default for AugmentationPlan {
    /// 250 moderate, 290 mild and 281 severe samples; insert or substitute
    /// at rate 0.1; one copy each.
    fn default() -> Self {
        AugmentationPlan {
            per_class_samples: BTreeMap::from([
                (Label::Mild, 290),
                (Label::Moderate, 250),
                (Label::Severe, 281),
            ]),
            ops: BTreeSet::from([AugmentOp::Insert, AugmentOp::Substitute]),
            rate: 0.1,
            copies_per_sample: 1,
            seed: 0,
        }
    }
}

impl AugmentationPlan {
    pub fn empty(seed: u64) -> Self {
        AugmentationPlan {
            per_class_samples: BTreeMap::new(),
            seed,
            ..Default::default()
        }
    }

    pub fn pool_size(&self) -> usize {
        self.per_class_samples.values().sum()
    }

    /// Checks the plan's own ranges and its feasibility against `corpus`.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        if !(self.rate > 0.0 && self.rate <= 0.3) {
            return Err(Error::Plan(format!("rate must lie in (0, 0.3], got {}", self.rate)));
        }
        if self.copies_per_sample < 1 {
            return Err(Error::Plan("copies_per_sample must be at least 1".into()));
        }
        if self.ops.is_empty() && self.pool_size() > 0 {
            return Err(Error::Plan("no augmentation operations enabled".into()));
        }
        let available = corpus.original_counts();
        for (&label, &wanted) in &self.per_class_samples {
            if wanted > available[label.index()] {
                return Err(Error::Plan(format!(
                    "plan asks for {wanted} {label} samples but the corpus has {}",
                    available[label.index()]
                )));
            }
        }
        Ok(())
    }

    /// Plan with every per-class count scaled by `fraction` (rounded), used
    /// when only a training split is augmented.
    pub fn scaled(&self, fraction: f64) -> Self {
        let mut out = self.clone();
        for count in out.per_class_samples.values_mut() {
            *count = (*count as f64 * fraction).round() as usize;
        }
        out
    }
}

/// Number of edits for `n` tokens at `rate`: `ceil(rate * n)`, computed so
/// that products like `0.1 * 30` that land a rounding error above an
/// integer are not bumped up.
pub fn edit_count(rate: f64, n: usize) -> usize {
    let exact = rate * n as f64;
    let nearest = exact.round();
    if (exact - nearest).abs() <= 1e-9 * nearest.max(1.0) {
        nearest as usize
    } else {
        exact.ceil() as usize
    }
}

/// Seeded per-class sample without replacement from original posts.
pub fn select_pool(corpus: &Corpus, plan: &AugmentationPlan) -> Result<Vec<Post>> {
    plan.validate(corpus)?;
    if plan.per_class_samples.get(&Label::Minimum).is_some_and(|&n| n > 0) {
        log::warn!("augmentation plan samples the majority class `minimum`");
    }
    let mut pool = Vec::with_capacity(plan.pool_size());
    for (&label, &count) in &plan.per_class_samples {
        let mut members: Vec<&Post> = corpus
            .iter()
            .filter(|p| p.is_original() && p.label == label)
            .collect();
        let mut rng = rng_for(plan.seed, &format!("pool/{}", label.name()));
        members.shuffle(&mut rng);
        pool.extend(members.into_iter().take(count).cloned());
    }
    Ok(pool)
}

fn predictor_error(reason: impl Into<String>) -> Error {
    Error::Augmentation {
        post_id: String::new(),
        reason: reason.into(),
    }
}

fn best(candidates: &[Candidate], exclude: Option<&str>) -> Option<String> {
    let mut bestc: Option<&Candidate> = None;
    for c in candidates {
        if exclude == Some(c.token.as_str()) || c.token.trim().is_empty() {
            continue;
        }
        if bestc.is_none_or(|b| c.score > b.score) {
            bestc = Some(c);
        }
    }
    bestc.map(|c| c.token.clone())
}

/// Inserts `edit_count(rate, n)` predicted tokens at seeded positions. The
/// original tokens survive as an in-order subsequence.
pub fn contextual_insert(
    tokens: &[String],
    predictor: &dyn MaskedTokenPredictor,
    rate: f64,
    seed: u64,
) -> Result<Vec<String>> {
    if tokens.is_empty() {
        return Err(predictor_error("cannot augment an empty token list"));
    }
    let edits = edit_count(rate, tokens.len());
    let mut rng = rng_for(seed, "insert");
    let mut out = tokens.to_vec();
    for _ in 0..edits {
        let pos = rng.random_range(0..=out.len());
        let candidates = predictor
            .propose(&out, Slot::Insert(pos))
            .map_err(predictor_error)?;
        let token = best(&candidates, None)
            .ok_or_else(|| predictor_error(format!("no candidate for insertion at {pos}")))?;
        out.insert(pos, token);
    }
    Ok(out)
}

/// Replaces `edit_count(rate, n)` distinct seeded positions with the best
/// proposal that differs from the original token. Length is unchanged; a
/// position keeps its token when every proposal equals it.
pub fn contextual_substitute(
    tokens: &[String],
    predictor: &dyn MaskedTokenPredictor,
    rate: f64,
    seed: u64,
) -> Result<Vec<String>> {
    if tokens.is_empty() {
        return Err(predictor_error("cannot augment an empty token list"));
    }
    let edits = edit_count(rate, tokens.len()).min(tokens.len());
    let mut rng = rng_for(seed, "substitute");
    let mut positions = rand::seq::index::sample(&mut rng, tokens.len(), edits).into_vec();
    positions.sort_unstable();
    let mut out = tokens.to_vec();
    for pos in positions {
        let candidates = predictor
            .propose(&out, Slot::Replace(pos))
            .map_err(predictor_error)?;
        if candidates.is_empty() {
            return Err(predictor_error(format!("no candidate for position {pos}")));
        }
        match best(&candidates, Some(&tokens[pos])) {
            Some(token) => out[pos] = token,
            None => log::debug!("every proposal for position {pos} equals the original token"),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AugmentationOutcome {
    pub corpus: Corpus,
    pub before: LabelDistribution,
    pub after: LabelDistribution,
    /// Operation used for each new row, in output order.
    pub applied: Vec<(String, AugmentOp)>,
}

impl AugmentationOutcome {
    pub fn added(&self) -> usize {
        self.applied.len()
    }
}

/// Appends one augmented post per pooled post per copy. Each new post keeps
/// its parent's label and links back through `parent_id`.
pub fn augment_corpus(
    corpus: &Corpus,
    plan: &AugmentationPlan,
    predictor: &dyn MaskedTokenPredictor,
) -> Result<AugmentationOutcome> {
    let before = label_distribution(corpus)?;
    let pool = select_pool(corpus, plan)?;
    let ops: Vec<AugmentOp> = plan.ops.iter().copied().collect();
    let mut taken: HashSet<String> = corpus.iter().map(|p| p.id.clone()).collect();
    let mut posts = corpus.posts.clone();
    let mut applied = Vec::new();

    for parent in &pool {
        let tokens: Vec<String> = parent.text.split_whitespace().map(str::to_string).collect();
        for copy in 0..plan.copies_per_sample {
            let post_seed = derive_seed(plan.seed, &format!("{}/{copy}", parent.id));
            let mut rng = rng_for(post_seed, "op");
            let op = ops[rng.random_range(0..ops.len())];
            let edited = match op {
                AugmentOp::Insert => contextual_insert(&tokens, predictor, plan.rate, post_seed),
                AugmentOp::Substitute => {
                    contextual_substitute(&tokens, predictor, plan.rate, post_seed)
                }
            }
            .map_err(|e| match e {
                Error::Augmentation { reason, .. } => Error::Augmentation {
                    post_id: parent.id.clone(),
                    reason,
                },
                other => other,
            })?;
            let mut id = format!("{}-aug{copy}", parent.id);
            while taken.contains(&id) {
                id.push('_');
            }
            taken.insert(id.clone());
            applied.push((id.clone(), op));
            posts.push(Post {
                id,
                text: edited.join(" "),
                label: parent.label,
                origin: Origin::Augmented,
                parent_id: Some(parent.id.clone()),
            });
        }
    }
    let corpus = Corpus::new(posts)?;
    let after = label_distribution(&corpus)?;
    Ok(AugmentationOutcome {
        corpus,
        before,
        after,
        applied,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    fn is_subsequence(needle: &[String], hay: &[String]) -> bool {
        let mut it = hay.iter();
        needle.iter().all(|n| it.any(|h| h == n))
    }

    fn corpus(counts: [usize; 4]) -> Corpus {
        let mut posts = Vec::new();
        for (li, &n) in counts.iter().enumerate() {
            for j in 0..n {
                let id = format!("{li}-{j}");
                posts.push(Post::original(
                    id,
                    format!("post number {j} of class {li} with some words"),
                    Label::from_index(li).unwrap(),
                ));
            }
        }
        Corpus::new(posts).unwrap()
    }

    #[test]
    fn edit_counts() {
        assert_eq!(edit_count(0.1, 30), 3);
        assert_eq!(edit_count(0.1, 31), 4);
        assert_eq!(edit_count(0.25, 4), 1);
        assert_eq!(edit_count(0.1, 0), 0);
        assert_eq!(edit_count(0.1, 1), 1);
    }

    #[test]
    fn insert_with_fixed_predictor() {
        let t = toks("i cannot sleep tonight");
        let out = contextual_insert(&t, &FixedPredictor("sad".into()), 0.25, 4).unwrap();
        assert_eq!(out.len(), 5);
        assert!(is_subsequence(&t, &out));
        assert_eq!(out.iter().filter(|w| *w == "sad").count(), 1);
    }

    #[test]
    fn zero_edit_rates_are_identity() {
        let t = toks("a b c");
        for rate in [0.0, 1e-12] {
            assert_eq!(edit_count(rate, t.len()), 0);
            assert_eq!(contextual_insert(&t, &FixedPredictor("x".into()), rate, 0).unwrap(), t);
            assert_eq!(contextual_substitute(&t, &FixedPredictor("x".into()), rate, 0).unwrap(), t);
        }
    }

    #[test]
    fn substitute_reverses_exactly_one_token() {
        let t = toks("abc def");
        let out = contextual_substitute(&t, &ReversePredictor, 0.5, 9).unwrap();
        assert_eq!(out.len(), 2);
        let changed: Vec<usize> = (0..2).filter(|&i| out[i] != t[i]).collect();
        assert_eq!(changed.len(), 1);
        let i = changed[0];
        assert_eq!(out[i], t[i].chars().rev().collect::<String>());
    }

    #[test]
    fn substitute_skips_candidates_equal_to_original() {
        let t = toks("aba");
        // "aba" reversed is itself, so the only proposal is excluded.
        let out = contextual_substitute(&t, &ReversePredictor, 0.3, 1).unwrap();
        assert_eq!(out, t);
    }

    #[test]
    fn empty_tokens_rejected() {
        assert!(contextual_insert(&[], &ReversePredictor, 0.1, 0).is_err());
        assert!(contextual_substitute(&[], &ReversePredictor, 0.1, 0).is_err());
    }

    #[test]
    fn pool_is_seeded_and_class_restricted() {
        let c = corpus([5, 5, 0, 0]);
        let plan = AugmentationPlan {
            per_class_samples: BTreeMap::from([(Label::Mild, 2)]),
            ..Default::default()
        };
        let a = select_pool(&c, &plan).unwrap();
        let b = select_pool(&c, &plan).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, b);
        assert!(a.iter().all(|p| p.label == Label::Mild));
    }

    #[test]
    fn infeasible_plan_rejected() {
        let c = corpus([5, 1, 0, 0]);
        let plan = AugmentationPlan {
            per_class_samples: BTreeMap::from([(Label::Mild, 2)]),
            ..Default::default()
        };
        assert!(matches!(select_pool(&c, &plan), Err(Error::Plan(_))));
        let bad_rate = AugmentationPlan {
            rate: 0.5,
            ..AugmentationPlan::empty(0)
        };
        assert!(matches!(bad_rate.validate(&c), Err(Error::Plan(_))));
    }

    #[test]
    fn majority_class_plan_allowed() {
        let c = corpus([3, 0, 0, 0]);
        let plan = AugmentationPlan {
            per_class_samples: BTreeMap::from([(Label::Minimum, 1)]),
            ..Default::default()
        };
        assert_eq!(select_pool(&c, &plan).unwrap().len(), 1);
    }

    #[test]
    fn empty_plan_leaves_corpus_unchanged() {
        let c = corpus([4, 2, 2, 1]);
        let out = augment_corpus(&c, &AugmentationPlan::empty(3), &ReversePredictor).unwrap();
        assert_eq!(out.corpus, c);
        assert_eq!(out.before, out.after);
    }

    #[test]
    fn predictor_failure_names_post() {
        struct Broken;
        impl MaskedTokenPredictor for Broken {
            fn model_id(&self) -> &str {
                "broken"
            }
            fn propose(&self, _: &[String], _: Slot) -> std::result::Result<Vec<Candidate>, String> {
                Err("weights missing".into())
            }
        }
        let c = corpus([1, 1, 0, 0]);
        let plan = AugmentationPlan {
            per_class_samples: BTreeMap::from([(Label::Mild, 1)]),
            ..Default::default()
        };
        let err = augment_corpus(&c, &plan, &Broken).unwrap_err();
        assert!(matches!(err, Error::Augmentation { ref post_id, .. } if post_id == "1-0"));
    }

    #[test]
    fn augmented_rows_link_to_parents() {
        let c = corpus([20, 6, 5, 4]);
        let plan = AugmentationPlan {
            per_class_samples: BTreeMap::from([(Label::Mild, 3), (Label::Moderate, 2), (Label::Severe, 4)]),
            copies_per_sample: 2,
            ..Default::default()
        };
        let out = augment_corpus(&c, &plan, &LexiconPredictor::default()).unwrap();
        assert_eq!(out.corpus.len(), c.len() + 18);
        for p in out.corpus.iter().filter(|p| !p.is_original()) {
            let parent = c.get(p.parent_id.as_deref().unwrap()).unwrap();
            assert_eq!(parent.label, p.label);
            assert_ne!(parent.text, p.text);
        }
        let again = augment_corpus(&c, &plan, &LexiconPredictor::default()).unwrap();
        assert_eq!(out.corpus, again.corpus);
    }
}
