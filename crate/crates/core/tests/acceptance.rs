//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. The full-scale reproduction (criterion 9) only
//! runs with `--extended` or `DEPSEV_EXTENDED=1`, and needs the real
//! dataset (`DEPSEV_DATASET`) and a DistilBERT checkpoint under
//! `DEPSEV_CACHE_DIR`.
//!
//!     cargo test -p depsev --test acceptance
//!     cargo test -p depsev --test acceptance -- --extended

mod common;

use std::path::PathBuf;
use std::time::Instant;

use common::gradcheck::{head_sweep, REL_TOL};
use common::{oracle, offline_features, synthetic_corpus, toy_config, toy_model};
use depsev::augment::{augment_corpus, AugmentationPlan, LexiconPredictor};
use depsev::corpus::{load_dataset, split, Corpus, DatasetFormat, Label, Origin, Post};
use depsev::encoder::{LayerStates, TransformerConfig, TransformerEncoder};
use depsev::evaluator::evaluate;
use depsev::features::{FeatureExtractor, FeaturePreset};
use depsev::model::{aggregate_layers, AggregatorWeights, HeadKind, HybridModel, ModelConfig};
use depsev::textprep::{clean, clean_corpus, is_emoji, CleaningConfig};
use depsev::trainer::{evaluate_model, run_experiment, train, Experiment, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn criterion_1() -> Outcome {
    let cache = std::env::var_os("DEPSEV_CACHE_DIR").map(PathBuf::from);
    let encoder =
        TransformerEncoder::resolve("distilbert-base-uncased", cache.as_deref(), 0, true).map_err(err)?;
    let schema = FeatureExtractor::offline(FeaturePreset::EmotionSentiment).schema();
    let mut model = HybridModel::new(ModelConfig::default(), Box::new(encoder), schema.clone(), 0).map_err(err)?;
    let full = model.count_parameters();
    ensure(full == 66_774_536, || format!("default model has {full} parameters, expected 66,774,536"))?;
    model.encoder_mut().set_frozen(true);
    let frozen = model.count_parameters();
    ensure(frozen == 411_656, || format!("frozen count {frozen}, expected 411,656"))?;

    let layers = 6;
    let encoder_params = TransformerConfig::toy().with_layers(layers).param_count();
    for head in HeadKind::ALL {
        for k in 1..=layers {
            let enc = TransformerEncoder::toy(&TransformerConfig::toy().with_layers(layers), 0).map_err(err)?;
            let cfg = toy_config(head, k, 12);
            let head_params = cfg.head_param_count();
            let model = HybridModel::new(cfg, Box::new(enc), schema.clone(), 0).map_err(err)?;
            let total = model.count_parameters();
            ensure(total == encoder_params + k + head_params, || {
                format!("toy {head} k={k}: {total} != {encoder_params} + {k} + {head_params}")
            })?;
        }
    }
    Ok(format!("default {full}, frozen {frozen}, toy identity for k 1..6 on all heads"))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let k = rng.random_range(1..=6);
        let d = rng.random_range(1..=16);
        let layers: Vec<Vec<f64>> = (0..k)
            .map(|_| (0..d).map(|_| rng.random_range(-10.0..10.0)).collect())
            .collect();
        let alpha: Vec<f64> = (0..k).map(|_| rng.random_range(-2.0..2.0)).collect();
        let states = LayerStates::new(layers.clone()).map_err(err)?;
        let got = aggregate_layers(&states, &AggregatorWeights::new(alpha.clone()).map_err(err)?).map_err(err)?;
        let want = oracle::weighted_sum(&layers, &alpha);
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
        ensure(worst <= 1e-12, || format!("case {case}: difference {worst:e}"))?;
    }
    Ok(format!("1000 cases, max difference {worst:.1e}"))
}

fn criterion_3() -> Outcome {
    let rows = head_sweep(24)?;
    let mut per_head = [0usize; 4];
    let mut worst = 0.0f64;
    for row in &rows {
        per_head[HeadKind::ALL.iter().position(|h| *h == row.head).unwrap()] += 1;
        worst = worst.max(row.worst);
    }
    ensure(rows.len() >= 20 && per_head.iter().all(|&n| n > 0), || {
        format!("only {} configurations, per head {per_head:?}", rows.len())
    })?;
    ensure(worst <= REL_TOL, || format!("worst relative error {worst:e}"))?;
    Ok(format!("{} configurations, all heads, worst relative error {worst:.1e}", rows.len()))
}

fn criterion_4() -> Outcome {
    let corpus = synthetic_corpus(8, 1);
    let features = offline_features(&corpus);
    let mut model = toy_model(HeadKind::Mlp, 2, 2, 3);
    // Scoring the training set after each epoch gives the first epoch at
    // the threshold; best-epoch selection on the same set is harmless here.
    let config = TrainConfig {
        epochs: 200,
        learning_rate: 3e-3,
        runs: 1,
        seeds: vec![0],
        select_best_epoch: true,
        ..TrainConfig::default()
    };
    let history = train(&mut model, &corpus, &features, &config, 3, Some(&corpus)).map_err(err)?;
    let per_epoch: Vec<f64> = history.eval.iter().map(|m| m.as_ref().map_or(0.0, |m| m.accuracy)).collect();
    let reached = per_epoch.iter().position(|&a| a >= 0.95);
    let acc = evaluate_model(&model, &corpus, &features).map_err(err)?.accuracy;
    ensure(reached.is_some(), || {
        format!("best train accuracy {:.3} within 200 epochs", per_epoch.iter().cloned().fold(0.0, f64::max))
    })?;
    Ok(format!(
        "32 posts, loss {:.3} -> {:.4}, 95% train accuracy first reached in epoch {}, final accuracy {acc:.3}",
        history.train_loss[0],
        history.final_loss(),
        reached.unwrap() + 1
    ))
}

const WORDS: [&str; 24] = [
    "i", "feel", "so", "tired", "of", "everything", "today", "work", "was", "hard", "and", "nobody", "really",
    "cares", "sleep", "again", "maybe", "tomorrow", "will", "be", "better", "friends", "home", "night",
];

/// Corpus with the published class counts and varied synthetic texts.
fn surrogate_corpus() -> Corpus {
    let counts = [2587usize, 394, 290, 282];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut posts = Vec::new();
    for (label, n) in Label::ALL.into_iter().zip(counts) {
        for _ in 0..n {
            let len = rng.random_range(5..=40);
            let text: Vec<&str> = (0..len).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
            posts.push(Post::original(format!("s{}", posts.len()), text.join(" "), label));
        }
    }
    Corpus::new(posts).unwrap()
}

fn criterion_5() -> Outcome {
    let (corpus, source) = match std::env::var_os("DEPSEV_DATASET") {
        Some(path) => {
            let raw = load_dataset(&PathBuf::from(&path), DatasetFormat::Csv).map_err(err)?;
            let (cleaned, dropped) = clean_corpus(&raw, &CleaningConfig::default()).map_err(err)?;
            if !dropped.is_empty() {
                eprintln!("criterion 5: {} posts empty after cleaning were dropped", dropped.len());
            }
            (cleaned, "dataset")
        }
        None => (surrogate_corpus(), "surrogate corpus"),
    };
    let plan = AugmentationPlan::default();
    let outcome = augment_corpus(&corpus, &plan, &LexiconPredictor::default()).map_err(err)?;
    let added = outcome.added();
    ensure(added == 821, || format!("{added} rows added, expected 821"))?;
    let total = outcome.corpus.len();
    ensure(total == corpus.len() + 821, || format!("total {total}"))?;
    for post in outcome.corpus.iter().filter(|p| p.origin == Origin::Augmented) {
        let parent = post
            .parent_id
            .as_deref()
            .and_then(|id| corpus.get(id))
            .ok_or_else(|| format!("{} has no parent in the original corpus", post.id))?;
        ensure(parent.label == post.label, || format!("{} changed label", post.id))?;
    }
    let (before, after) = (&outcome.before, &outcome.after);
    ensure(after.fraction(Label::Minimum) < before.fraction(Label::Minimum), || {
        "minimum fraction did not decrease".into()
    })?;
    for label in [Label::Mild, Label::Moderate, Label::Severe] {
        ensure(after.fraction(label) > before.fraction(label), || format!("{label} fraction did not increase"))?;
    }
    let pct = |d: &depsev::corpus::LabelDistribution| {
        Label::ALL
            .map(|l| format!("{:.2}", 100.0 * d.fraction(l)))
            .join("/")
    };
    Ok(format!(
        "{source}: {} + {added} = {total} rows, labels and parents intact, % {} -> {}",
        corpus.len(),
        pct(before),
        pct(after)
    ))
}

fn criterion_6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let cases = 200;
    for case in 0..cases {
        let n = rng.random_range(1..=40);
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let got = evaluate(&pred, &truth).map_err(err)?;
        let want = oracle::weighted_metrics(&pred, &truth);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
        ensure(
            close(got.weighted_precision, want.precision)
                && close(got.weighted_recall, want.recall)
                && close(got.weighted_f1, want.f1),
            || format!("case {case}: {pred:?} vs {truth:?}"),
        )?;
        ensure(close(got.weighted_recall, got.accuracy), || {
            format!("case {case}: recall {} != accuracy {}", got.weighted_recall, got.accuracy)
        })?;
    }
    let worked = evaluate(&[0, 1, 1, 1], &[0, 0, 1, 1]).map_err(err)?;
    ensure((worked.weighted_f1 - 11.0 / 15.0).abs() <= 1e-12, || {
        format!("worked example F1 {}", worked.weighted_f1)
    })?;
    Ok(format!("{cases} random cases match the oracle, recall = accuracy, worked example F1 = 11/15"))
}

const FRAGMENTS: [&str; 26] = [
    "I", "CAN'T", "won't", "it's", "feel", "sad", "http://t.co/x", "https://a.com/b?c=d", "www.site.org",
    "/r/depression", "u/someone", "@friend", "😢", "👍🏽", "❤️", "<b>", "</p>", "&amp;", ":)", "...", "naïve",
    "\t", "\n", "’", "y'all", "日本",
];

fn criterion_7() -> Outcome {
    let config = CleaningConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..1000 {
        let parts = rng.random_range(0..16);
        let text: Vec<String> = (0..parts)
            .map(|_| {
                if rng.random_bool(0.25) {
                    (0..rng.random_range(1..8)).map(|_| char::from_u32(rng.random_range(32..0x1FAFF)).unwrap_or('?')).collect()
                } else {
                    FRAGMENTS[rng.random_range(0..FRAGMENTS.len())].to_string()
                }
            })
            .collect();
        let text = text.join(" ");
        let once = clean(&text, &config);
        ensure(clean(&once, &config) == once, || format!("case {case}: not idempotent on {text:?}"))?;
        let leaked = once.contains("http")
            || once.contains("www")
            || once.contains('@')
            || once.contains('<')
            || once.contains('&')
            || once.contains("r/")
            || once.contains("u/")
            || once.chars().any(|c| is_emoji(c) && c != '\u{200d}');
        ensure(!leaked, || format!("case {case}: {text:?} cleaned to {once:?}"))?;
    }
    let contraction = clean("I CAN'T sleep", &config);
    ensure(contraction == "i cannot sleep", || format!("\"I CAN'T sleep\" cleaned to {contraction:?}"))?;
    Ok("1000 fuzzed strings idempotent with nothing removable left, can't -> cannot".into())
}

fn criterion_8() -> Outcome {
    let corpus = surrogate_corpus();
    let ids = |c: &Corpus| c.iter().map(|p| p.id.clone()).collect::<Vec<_>>();
    let (a_train, a_test) = split(&corpus, 0.8, 42).map_err(err)?;
    let (b_train, b_test) = split(&corpus, 0.8, 42).map_err(err)?;
    ensure(ids(&a_train) == ids(&b_train) && ids(&a_test) == ids(&b_test), || "splits differ".into())?;

    let plan = AugmentationPlan { seed: 9, ..AugmentationPlan::default() };
    let first = augment_corpus(&corpus, &plan, &LexiconPredictor::default()).map_err(err)?;
    let second = augment_corpus(&corpus, &plan, &LexiconPredictor::default()).map_err(err)?;
    ensure(first.corpus == second.corpus, || "augmentation output differs".into())?;

    let small = synthetic_corpus(4, 2);
    let features = offline_features(&small);
    let config = TrainConfig {
        epochs: 5,
        learning_rate: 3e-3,
        runs: 1,
        seeds: vec![11],
        ..TrainConfig::default()
    };
    let mut spread = 0.0f64;
    for head in HeadKind::ALL {
        let run = || -> Result<f64, String> {
            let mut model = toy_model(head, 2, 2, 11);
            Ok(train(&mut model, &small, &features, &config, 11, None).map_err(err)?.final_loss())
        };
        let (a, b) = (run()?, run()?);
        spread = spread.max((a - b).abs());
        ensure((a - b).abs() <= 1e-9, || format!("{head}: final loss {a} vs {b}"))?;
    }
    Ok(format!("splits and augmentation identical, final-loss spread {spread:.1e} over all heads"))
}

fn criterion_9() -> Outcome {
    let path = std::env::var_os("DEPSEV_DATASET").ok_or("DEPSEV_DATASET is not set")?;
    let cache = std::env::var_os("DEPSEV_CACHE_DIR").map(PathBuf::from);
    let raw = load_dataset(&PathBuf::from(path), DatasetFormat::Csv).map_err(err)?;
    let (corpus, _) = clean_corpus(&raw, &CleaningConfig::default()).map_err(err)?;
    let augmented = augment_corpus(&corpus, &AugmentationPlan::default(), &LexiconPredictor::default())
        .map_err(err)?
        .corpus;
    let extractor = FeatureExtractor::offline(FeaturePreset::EmotionSentiment);
    let features = extractor.extract_corpus(&augmented, "acceptance").map_err(err)?;
    let schema = extractor.schema();
    let build = |seed| {
        let encoder = TransformerEncoder::resolve("distilbert-base-uncased", cache.as_deref(), seed, false)?;
        HybridModel::new(ModelConfig::default(), Box::new(encoder), schema.clone(), seed)
    };
    let exp = Experiment {
        name: "default".into(),
        corpus: &augmented,
        features: &features,
        build_model: &build,
        augment_train: None,
        checkpoint_dir: None,
    };
    let report = run_experiment(&exp, &TrainConfig::default()).map_err(err)?;
    let f1 = 100.0 * report.f1.mean;
    ensure(report.is_complete() && f1 >= 81.0, || format!("weighted F1 {f1:.2}% over {} runs", report.runs.len()))?;
    Ok(format!("weighted F1 {f1:.2} +/- {:.2}% over 5 runs", 100.0 * report.f1.std))
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // `cargo test` passes harness flags through; only our own are read.
    let listing = args.iter().any(|a| a == "--list");
    if listing {
        return;
    }
    let extended = args.iter().any(|a| a == "--extended")
        || std::env::var("DEPSEV_EXTENDED").is_ok_and(|v| !v.is_empty() && v != "0");

    let criteria: [(u8, &str, fn() -> Outcome); 8] = [
        (1, "parameter count", criterion_1),
        (2, "aggregation oracle", criterion_2),
        (3, "gradient checks", criterion_3),
        (4, "overfit smoke", criterion_4),
        (5, "augmentation bookkeeping", criterion_5),
        (6, "metrics", criterion_6),
        (7, "preprocessing", criterion_7),
        (8, "determinism", criterion_8),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}, {secs:.1}s): {detail}"),
            Err(reason) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}, {secs:.1}s): {reason}");
            }
        }
    }
    if extended {
        let start = Instant::now();
        match criterion_9() {
            Ok(detail) => println!("PASS criterion 9 (full-scale reproduction, {:.0}s): {detail}", start.elapsed().as_secs_f64()),
            Err(reason) => {
                failed += 1;
                println!("FAIL criterion 9 (full-scale reproduction): {reason}");
            }
        }
    } else {
        println!("SKIP criterion 9 (full-scale reproduction): extended run, use --extended with DEPSEV_DATASET and DEPSEV_CACHE_DIR");
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
