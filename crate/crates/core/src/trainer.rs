//! Seeded fine-tuning loop and the multi-run experiment harness.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{split, Corpus};
use crate::encoder::ForwardCtx;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, ExperimentReport, MetricsReport, RunFailure, RunReport};
use crate::features::FeatureTable;
use crate::model::{write_json, HybridModel};
use crate::seed::{content_hash, derive_seed, rng_for};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub train_fraction: f64,
    pub runs: usize,
    pub seeds: Vec<u64>,
    /// Use the first seed's split for every run instead of re-splitting.
    pub fixed_split: bool,
    /// Keep the epoch with the best held-out weighted F1 instead of the
    /// final one.
    pub select_best_epoch: bool,
    /// Freeze the encoder and train only alpha and the head.
    pub freeze_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 11,
            batch_size: 8,
            learning_rate: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            train_fraction: 0.8,
            runs: 5,
            seeds: (0..5).collect(),
            fixed_split: false,
            select_best_epoch: false,
            freeze_encoder: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.runs == 0 || self.seeds.len() != self.runs {
            return Err(Error::Config(format!(
                "runs = {} but {} seeds given",
                self.runs,
                self.seeds.len()
            )));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config(format!(
                "train_fraction must lie in (0, 1), got {}",
                self.train_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub seed: u64,
    pub train_loss: Vec<f64>,
    /// Held-out metrics per epoch, when an evaluation split was supplied.
    pub eval: Vec<Option<MetricsReport>>,
    pub wall_time_secs: f64,
    /// 1-based epoch whose weights the model holds after training.
    pub selected_epoch: usize,
}

impl RunHistory {
    pub fn final_loss(&self) -> f64 {
        *self.train_loss.last().expect("history has at least one epoch")
    }
}

/// Labels and feature rows of `corpus` in corpus order.
fn gather<'a>(corpus: &'a Corpus, features: &'a FeatureTable) -> Result<(Vec<&'a str>, Vec<&'a [f64]>, Vec<u32>)> {
    let mut texts = Vec::with_capacity(corpus.len());
    let mut rows = Vec::with_capacity(corpus.len());
    let mut labels = Vec::with_capacity(corpus.len());
    for post in corpus.iter() {
        let row = features.values(&post.id).ok_or_else(|| {
            Error::Training(format!(
                "no feature vector for post {}; run `depsev features` on this corpus first",
                post.id
            ))
        })?;
        texts.push(post.text.as_str());
        rows.push(row);
        labels.push(post.label.index() as u32);
    }
    Ok((texts, rows, labels))
}

fn check_schema(model: &HybridModel, features: &FeatureTable) -> Result<()> {
    if features.schema.hash() != model.schema().hash() {
        return Err(Error::Training(format!(
            "feature table schema ({} entries) differs from the model's ({} entries)",
            features.schema.len(),
            model.schema().len()
        )));
    }
    Ok(())
}

/// Scores `corpus` with the model in evaluation mode.
pub fn evaluate_model(model: &HybridModel, corpus: &Corpus, features: &FeatureTable) -> Result<MetricsReport> {
    check_schema(model, features)?;
    let (texts, rows, labels) = gather(corpus, features)?;
    let pred = model.predict_rows(&texts, &rows)?;
    let truth: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    evaluate(&pred.labels, &truth)
}

/// Evaluation-mode CLS states for every post, computed once for a frozen
/// encoder.
fn cached_states(model: &HybridModel, texts: &[&str]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(texts.len());
    for chunk in texts.chunks(16) {
        let states = model.layer_states(chunk, &mut ForwardCtx::eval())?.detach();
        for i in 0..chunk.len() {
            out.push(states.get(i)?);
        }
    }
    Ok(out)
}

/// Trains in place with cross-entropy and Adam. `eval` is scored after
/// every epoch when given; it is never trained on.
pub fn train(
    model: &mut HybridModel,
    train_corpus: &Corpus,
    features: &FeatureTable,
    config: &TrainConfig,
    seed: u64,
    eval: Option<&Corpus>,
) -> Result<RunHistory> {
    config.validate()?;
    check_schema(model, features)?;
    if train_corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if config.select_best_epoch && eval.is_none() {
        return Err(Error::Config("select_best_epoch needs an evaluation split".into()));
    }
    model.encoder_mut().set_frozen(config.freeze_encoder);
    let (texts, rows, labels) = gather(train_corpus, features)?;
    let started = Instant::now();

    let params = ParamsAdamW {
        lr: config.learning_rate,
        beta1: config.beta1,
        beta2: config.beta2,
        eps: config.eps,
        weight_decay: config.weight_decay,
    };
    let mut optimizer = AdamW::new(model.trainable_vars(), params)?;
    let cache = if config.freeze_encoder {
        Some(cached_states(model, &texts)?)
    } else {
        None
    };

    let mut history = RunHistory {
        seed,
        train_loss: Vec::with_capacity(config.epochs),
        eval: Vec::with_capacity(config.epochs),
        wall_time_secs: 0.0,
        selected_epoch: config.epochs,
    };
    let mut best: Option<(f64, usize, HashMap<String, Tensor>)> = None;
    let mut order: Vec<usize> = (0..texts.len()).collect();

    for epoch in 1..=config.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(seed, &format!("epoch/{epoch}")));
        let mut total = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut ctx = ForwardCtx::train(seed, &format!("dropout/{epoch}/{b}"));
            let batch_rows: Vec<&[f64]> = batch.iter().map(|&i| rows[i]).collect();
            let feats = model.feature_tensor(&batch_rows)?;
            let logits = match &cache {
                Some(states) => {
                    let picked: Vec<&Tensor> = batch.iter().map(|&i| &states[i]).collect();
                    model.forward_states(&Tensor::stack(&picked, 0)?, &feats, &mut ctx)?
                }
                None => {
                    let batch_texts: Vec<&str> = batch.iter().map(|&i| texts[i]).collect();
                    model.forward(&batch_texts, &feats, &mut ctx)?
                }
            };
            let targets = Tensor::new(batch.iter().map(|&i| labels[i]).collect::<Vec<u32>>(), model.device())?;
            let loss = candle_nn::loss::cross_entropy(&logits, &targets)?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Training(format!(
                    "loss became {value} at epoch {epoch}, batch {b} (seed {seed}); try a lower learning rate"
                )));
            }
            optimizer.backward_step(&loss)?;
            total += value * batch.len() as f64;
        }
        let epoch_loss = total / texts.len() as f64;
        log::info!("seed {seed} epoch {epoch}/{}: train loss {epoch_loss:.6}", config.epochs);
        history.train_loss.push(epoch_loss);

        let metrics = match eval {
            Some(corpus) => Some(evaluate_model(model, corpus, features)?),
            None => None,
        };
        if config.select_best_epoch {
            let f1 = metrics.as_ref().map(|m| m.weighted_f1).unwrap_or(f64::NEG_INFINITY);
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, model.snapshot()?));
            }
        }
        history.eval.push(metrics);
    }
    if let Some((_, epoch, weights)) = best {
        model.restore(&weights)?;
        history.selected_epoch = epoch;
    }
    history.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(history)
}

/// Inputs to [`run_experiment`].
pub struct Experiment<'a> {
    /// Row label in rendered reports.
    pub name: String,
    /// Corpus to split. With `augment_train` set it should hold originals
    /// only.
    pub corpus: &'a Corpus,
    pub features: &'a FeatureTable,
    /// Builds a fresh model for a run seed.
    pub build_model: &'a dyn Fn(u64) -> Result<HybridModel>,
    /// Augments a run's training split and returns it with features for
    /// the new rows (train-only augmentation).
    pub augment_train: Option<&'a dyn Fn(&Corpus, u64) -> Result<(Corpus, FeatureTable)>>,
    /// Per-run checkpoints go to `<dir>/run<i>/` when set.
    pub checkpoint_dir: Option<&'a Path>,
}

fn corpus_fingerprint(corpus: &Corpus) -> Result<String> {
    let mut buf = Vec::new();
    corpus.write_csv(&mut buf)?;
    Ok(content_hash(&buf))
}

/// Guards split provenance: train and test are disjoint, and with
/// `strict_parents` no augmented training row descends from a test post.
fn check_provenance(train: &Corpus, test: &Corpus, strict_parents: bool) -> Result<()> {
    let test_ids: BTreeSet<&str> = test.iter().map(|p| p.id.as_str()).collect();
    for p in train.iter() {
        if test_ids.contains(p.id.as_str()) {
            return Err(Error::Training(format!("post {} is in both train and test", p.id)));
        }
        if strict_parents && p.parent_id.as_deref().is_some_and(|parent| test_ids.contains(parent)) {
            return Err(Error::Training(format!(
                "augmented training row {} descends from a test post",
                p.id
            )));
        }
    }
    Ok(())
}

/// Held-out membership of a run, stored next to its checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub seed: u64,
    pub test_ids: Vec<String>,
}

fn one_run(exp: &Experiment, config: &TrainConfig, run: usize) -> Result<RunReport> {
    let seed = config.seeds[run];
    let split_seed = if config.fixed_split { config.seeds[0] } else { seed };
    let (train_split, test) = split(exp.corpus, config.train_fraction, derive_seed(split_seed, "split"))?;
    let (train_corpus, train_features) = match exp.augment_train {
        Some(augment) => {
            let (c, f) = augment(&train_split, seed)?;
            (c, Some(f))
        }
        None => (train_split, None),
    };
    check_provenance(&train_corpus, &test, exp.augment_train.is_some())?;
    let features = train_features.as_ref().unwrap_or(exp.features);
    let test_before = corpus_fingerprint(&test)?;

    let mut model = (exp.build_model)(seed)?;
    let history = train(&mut model, &train_corpus, features, config, seed, Some(&test).filter(|_| config.select_best_epoch))?;
    if corpus_fingerprint(&test)? != test_before {
        return Err(Error::Training("test split changed during training".into()));
    }
    let metrics = evaluate_model(&model, &test, exp.features)?;
    if let Some(dir) = exp.checkpoint_dir {
        let run_dir = dir.join(format!("run{run}"));
        model.save(&run_dir, seed)?;
        write_json(&run_dir.join("metrics.json"), &metrics)?;
        let split = SplitRecord {
            seed: split_seed,
            test_ids: test.iter().map(|p| p.id.clone()).collect(),
        };
        write_json(&run_dir.join("split.json"), &split)?;
    }
    Ok(RunReport {
        run,
        seed,
        metrics,
        train_loss: history.train_loss,
        wall_time_secs: history.wall_time_secs,
        selected_epoch: history.selected_epoch,
    })
}

/// Trains and scores `config.runs` models, one per seed. A failing run
/// stops the experiment; completed runs are kept in the report and the
/// failure is recorded in it.
pub fn run_experiment(exp: &Experiment, config: &TrainConfig) -> Result<ExperimentReport> {
    config.validate()?;
    let mut runs = Vec::with_capacity(config.runs);
    let mut failure = None;
    for run in 0..config.runs {
        match one_run(exp, config, run) {
            Ok(report) => {
                log::info!(
                    "run {run} (seed {}): weighted F1 {:.4}",
                    report.seed,
                    report.metrics.weighted_f1
                );
                runs.push(report);
            }
            Err(e) => {
                log::error!("run {run} (seed {}) failed: {e}", config.seeds[run]);
                failure = Some(RunFailure {
                    run,
                    seed: config.seeds[run],
                    reason: e.to_string(),
                });
                break;
            }
        }
    }
    Ok(ExperimentReport::new(exp.name.clone(), config.seeds.clone(), runs, failure))
}
