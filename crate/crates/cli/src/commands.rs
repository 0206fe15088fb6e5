use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use depsev::augment::augment_corpus;
use depsev::corpus::{Corpus, Label, LabelDistribution, Post};
use depsev::evaluator::{confusion_csv, render_markdown, render_report, ExperimentReport, MetricsReport, ReportFormat};
use depsev::features::{save_features, FeatureTable};
use depsev::model::HybridModel;
use depsev::seed::{content_hash, derive_seed};
use depsev::textprep::{clean, clean_corpus};
use depsev::trainer::{evaluate_model, run_experiment, Experiment, SplitRecord};
use serde::Serialize;

use crate::errors::invalid;
use crate::pipeline::{
    build_model, extractor, feature_settings, feature_table, hash_file, predictor, read_corpus, training_corpus, Ctx,
    ModelChoice,
};
use crate::run_dir::{read_json, write_json, StageRecord};

fn seeds(pairs: &[(&str, u64)]) -> BTreeMap<String, u64> {
    pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn cleaning_key(ctx: &Ctx) -> anyhow::Result<String> {
    let cleaning = ctx.cfg.cleaning()?;
    let steps: Vec<&str> = cleaning.steps().iter().map(|s| s.name()).collect();
    let table: Vec<(&str, &str)> = cleaning.contraction_table().iter().collect();
    Ok(serde_json::json!({ "steps": steps, "contractions": table }).to_string())
}

pub fn prep(ctx: &Ctx) -> anyhow::Result<()> {
    let source = ctx
        .cfg
        .data
        .path
        .clone()
        .ok_or_else(|| invalid("no dataset given: pass --data <csv> or set data.path in the config"))?;
    if !source.is_file() {
        return Err(invalid(format!("dataset {} does not exist", source.display())));
    }
    let input_hash = content_hash(format!("{}|{}", hash_file(&source)?, cleaning_key(ctx)?).as_bytes());
    if ctx.run.up_to_date("prep", &input_hash)?.is_some() {
        log::info!("prep: {} is up to date", ctx.run.corpus().display());
        return Ok(());
    }
    let raw = read_corpus(&source)?;
    let (corpus, dropped) = clean_corpus(&raw, &ctx.cfg.cleaning()?)?;
    if !dropped.is_empty() {
        log::warn!("prep: dropped {} posts that were empty after cleaning", dropped.len());
    }
    corpus.save(&ctx.run.corpus())?;
    let counts = corpus.original_counts();
    log::info!("prep: wrote {} posts to {}", corpus.len(), ctx.run.corpus().display());
    ctx.run.record(
        "prep",
        ctx.cfg.seed,
        StageRecord {
            input_hash,
            outputs: vec!["corpus.csv".into()],
            details: serde_json::json!({
                "source": source,
                "rows": corpus.len(),
                "counts": Label::ALL.iter().map(|l| (l.name(), counts[l.index()])).collect::<BTreeMap<_, _>>(),
                "dropped_empty": dropped,
            }),
            ..StageRecord::default()
        },
    )
}

#[derive(Serialize, serde::Deserialize)]
pub struct AugmentReport {
    pub seed: u64,
    pub predictor: String,
    pub added: usize,
    pub before: LabelDistribution,
    pub after: LabelDistribution,
}

/// Before/after label shares as a four-row table.
pub fn augment_table(report: &AugmentReport) -> String {
    let mut out = String::from("| Label | Before Augmentation | After Augmentation |\n|---|---|---|\n");
    for label in Label::ALL {
        out.push_str(&format!(
            "| {} | {} ({:.2}%) | {} ({:.2}%) |\n",
            label.name(),
            report.before.count(label),
            100.0 * report.before.fraction(label),
            report.after.count(label),
            100.0 * report.after.fraction(label),
        ));
    }
    out.push_str(&format!(
        "| total | {} | {} |\n",
        report.before.total(),
        report.after.total()
    ));
    out
}

pub fn augment(ctx: &Ctx) -> anyhow::Result<()> {
    let source = ctx.run.corpus();
    ctx.run.require(&source, "prep")?;
    let plan = ctx.cfg.plan()?;
    let input_hash = content_hash(
        format!(
            "{}|{}|{}",
            hash_file(&source)?,
            serde_json::to_string(&plan)?,
            ctx.cfg.augment.predictor_model_id
        )
        .as_bytes(),
    );
    if ctx.run.up_to_date("augment", &input_hash)?.is_some() {
        log::info!("augment: {} is up to date", ctx.run.augmented().display());
        print!("{}", std::fs::read_to_string(ctx.run.path("augment_report.md"))?);
        return Ok(());
    }
    let corpus = read_corpus(&source)?;
    let predictor = predictor(ctx)?;
    let outcome = augment_corpus(&corpus, &plan, predictor.as_ref())?;
    outcome.corpus.save(&ctx.run.augmented())?;
    let report = AugmentReport {
        seed: plan.seed,
        predictor: predictor.model_id().to_string(),
        added: outcome.added(),
        before: outcome.before,
        after: outcome.after,
    };
    let table = augment_table(&report);
    write_json(&ctx.run.path("augment_report.json"), &report)?;
    std::fs::write(ctx.run.path("augment_report.md"), &table)?;
    print!("{table}");
    log::info!("augment: added {} rows", report.added);
    ctx.run.record(
        "augment",
        ctx.cfg.seed,
        StageRecord {
            input_hash,
            outputs: vec!["augmented.csv".into(), "augment_report.json".into(), "augment_report.md".into()],
            seeds: seeds(&[("augment", plan.seed)]),
            details: serde_json::json!({ "added": report.added, "total": outcome.corpus.len() }),
            ..StageRecord::default()
        },
    )
}

/// Extracts features for the augmented corpus when one exists (it holds
/// every original post too), otherwise for the prepared corpus.
pub fn features(ctx: &Ctx) -> anyhow::Result<()> {
    let source = if ctx.run.augmented().exists() {
        ctx.run.augmented()
    } else {
        ctx.run.corpus()
    };
    ctx.run.require(&source, "prep")?;
    let settings = feature_settings(&ctx.cfg)?;
    let input_hash = content_hash(format!("{}|{settings}", hash_file(&source)?).as_bytes());
    if ctx.run.up_to_date("features", &input_hash)?.is_some() {
        log::info!("features: {} is up to date", ctx.run.features().display());
        return Ok(());
    }
    let corpus = read_corpus(&source)?;
    let extractor = extractor(ctx)?;
    let config_hash = extractor.config_hash(&settings);
    let table = extractor.extract_corpus(&corpus, &config_hash)?;
    save_features(&table, &ctx.run.features())?;
    log::info!(
        "features: {} rows x {} values from {}",
        table.len(),
        table.dim(),
        source.display()
    );
    ctx.run.record(
        "features",
        ctx.cfg.seed,
        StageRecord {
            input_hash,
            outputs: vec!["features.csv".into(), "features.json".into()],
            details: serde_json::json!({
                "settings": settings,
                "config_hash": config_hash,
                "source": source.file_name().map(|n| n.to_string_lossy().to_string()),
                "schema": table.schema.names,
            }),
            ..StageRecord::default()
        },
    )
}

/// Runs one experiment (all configured seeds) for a model choice.
pub fn run_training(
    ctx: &Ctx,
    choice: &ModelChoice,
    augmentation: bool,
    corpus: &Corpus,
    features: &FeatureTable,
    checkpoint_dir: Option<&Path>,
) -> anyhow::Result<ExperimentReport> {
    let train_config = ctx.cfg.train_config()?;
    let schema = (*features.schema).clone();
    let build = |seed| build_model(ctx, choice, &schema, seed);
    let per_run = augmentation && ctx.cfg.augment.train_only_augmentation;
    let (predictor, extractor) = if per_run {
        (Some(predictor(ctx)?), Some(extractor(ctx)?))
    } else {
        (None, None)
    };
    let plan = ctx.cfg.plan()?;
    let augment_train = |train: &Corpus, seed: u64| -> depsev::Result<(Corpus, FeatureTable)> {
        let (predictor, extractor) = (predictor.as_ref().unwrap(), extractor.as_ref().unwrap());
        let plan = depsev::augment::AugmentationPlan {
            seed: derive_seed(plan.seed, &format!("run-{seed}")),
            ..plan.clone()
        };
        let outcome = augment_corpus(train, &plan.scaled(ctx.cfg.trainer.train_fraction), predictor.as_ref())?;
        let mut table = features.clone();
        for post in outcome.corpus.iter().filter(|p| !p.is_original()) {
            table.insert(post.id.clone(), extractor.extract(post)?.values)?;
        }
        Ok((outcome.corpus, table))
    };
    let suffix = if augmentation { "" } else { ", no augmentation" };
    let exp = Experiment {
        name: format!("{}{suffix}", choice.label()),
        corpus,
        features,
        build_model: &build,
        augment_train: if per_run { Some(&augment_train) } else { None },
        checkpoint_dir,
    };
    Ok(run_experiment(&exp, &train_config)?)
}

#[derive(Serialize)]
struct MetricsSummary<'a> {
    name: &'a str,
    seed: u64,
    seeds: &'a [u64],
    runs: usize,
    precision: depsev::evaluator::Summary,
    recall: depsev::evaluator::Summary,
    f1: depsev::evaluator::Summary,
    per_run: Vec<&'a MetricsReport>,
    failure: &'a Option<depsev::evaluator::RunFailure>,
}

fn experiment_markdown(report: &ExperimentReport, seed: u64) -> String {
    let mut md = format!("# {}\n\n", report.name);
    md.push_str(&format!("Seed {seed}; run seeds {:?}.\n\n", report.seeds));
    md.push_str(&render_markdown(std::slice::from_ref(report)));
    md.push_str("\n## Mean confusion matrix (rows: truth)\n\n| | ");
    md.push_str(&Label::ALL.map(|l| l.name()).join(" | "));
    md.push_str(" |\n|---|---|---|---|---|\n");
    for (label, row) in Label::ALL.iter().zip(&report.mean_confusion) {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        md.push_str(&format!("| {} | {} |\n", label.name(), cells.join(" | ")));
    }
    if let Some(f) = &report.failure {
        md.push_str(&format!("\nRun {} (seed {}) failed: {}\n", f.run, f.seed, f.reason));
    }
    md
}

fn write_experiment(dir: &Path, report: &ExperimentReport, seed: u64) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), report)?;
    let summary = MetricsSummary {
        name: &report.name,
        seed,
        seeds: &report.seeds,
        runs: report.runs.len(),
        precision: report.precision,
        recall: report.recall,
        f1: report.f1,
        per_run: report.runs.iter().map(|r| &r.metrics).collect(),
        failure: &report.failure,
    };
    write_json(&dir.join("metrics.json"), &summary)?;
    std::fs::write(dir.join("metrics.csv"), render_report(report, ReportFormat::Csv)?)?;
    std::fs::write(dir.join("confusion.csv"), confusion_csv(&report.mean_confusion))?;
    std::fs::write(dir.join("report.md"), experiment_markdown(report, seed))?;
    Ok(())
}

pub fn train(ctx: &Ctx) -> anyhow::Result<()> {
    let augmentation = ctx.cfg.augment.enabled;
    let corpus = training_corpus(ctx, augmentation)?;
    let features = feature_table(ctx)?;
    let choice = ModelChoice::from_config(&ctx.cfg)?;
    let train_config = ctx.cfg.train_config()?;
    let out = ctx.run.train_dir();
    let report = run_training(ctx, &choice, augmentation, &corpus, &features, Some(&out))?;
    write_experiment(&out, &report, ctx.cfg.seed)?;
    print!("{}", render_markdown(std::slice::from_ref(&report)));
    ctx.run.record(
        "train",
        ctx.cfg.seed,
        StageRecord {
            input_hash: String::new(),
            outputs: vec!["train/report.json".into()],
            seeds: train_config
                .seeds
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("run{i}"), *s))
                .collect(),
            details: serde_json::json!({
                "augmentation": augmentation,
                "model": choice.label(),
                "trainer": train_config,
            }),
            ..StageRecord::default()
        },
    )?;
    if let Some(f) = &report.failure {
        anyhow::bail!("run {} (seed {}) failed: {}", f.run, f.seed, f.reason);
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum EvalSplit {
    /// The held-out posts recorded with each checkpoint.
    Test,
    /// Every post in the corpus.
    All,
}

pub fn evaluate(ctx: &Ctx, checkpoint: Option<&Path>, which: EvalSplit) -> anyhow::Result<()> {
    let augmentation = match ctx.run.stage("train")? {
        Some(r) => r.details.get("augmentation").and_then(|v| v.as_bool()).unwrap_or(ctx.cfg.augment.enabled),
        None => ctx.cfg.augment.enabled,
    };
    let corpus = training_corpus(ctx, augmentation)?;
    let features = feature_table(ctx)?;
    let dirs: Vec<PathBuf> = match checkpoint {
        Some(dir) => vec![dir.to_path_buf()],
        None => {
            let train_dir = ctx.run.train_dir();
            ctx.run.require(&train_dir, "train")?;
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(&train_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("weights.safetensors").is_file())
                .collect();
            dirs.sort();
            if dirs.is_empty() {
                return Err(invalid(format!("no checkpoints in {}; run `depsev train` first", train_dir.display())));
            }
            dirs
        }
    };
    let out = ctx.run.path("eval");
    std::fs::create_dir_all(&out)?;
    let mut rows = Vec::new();
    for dir in &dirs {
        let model = HybridModel::load(dir, Some(&features.schema.hash()), ctx.cache.as_deref())
            .with_context(|| format!("loading checkpoint {}", dir.display()))?;
        let split_path = dir.join("split.json");
        let posts = if which == EvalSplit::Test && split_path.is_file() {
            let split: SplitRecord = read_json(&split_path)?;
            corpus
                .subset(&split.test_ids)
                .map_err(|e| invalid(format!("{}: {e}; was the corpus rebuilt after training?", split_path.display())))?
        } else {
            if which == EvalSplit::Test {
                log::warn!("{} has no split.json; scoring the whole corpus", dir.display());
            }
            corpus.clone()
        };
        let metrics = evaluate_model(&model, &posts, &features)?;
        let name = dir.file_name().map_or("checkpoint".into(), |n| n.to_string_lossy().to_string());
        let run_out = out.join(&name);
        std::fs::create_dir_all(&run_out)?;
        write_json(&run_out.join("metrics.json"), &metrics)?;
        std::fs::write(run_out.join("confusion.csv"), confusion_csv(&metrics.confusion))?;
        println!(
            "{name}: {} posts, weighted P {:.4} R {:.4} F1 {:.4}",
            posts.len(),
            metrics.weighted_precision,
            metrics.weighted_recall,
            metrics.weighted_f1
        );
        rows.push((name, metrics));
    }
    let mut csv = String::from("checkpoint,weighted_precision,weighted_recall,weighted_f1,accuracy\n");
    let mut md = String::from("| Checkpoint | Precision (%) | Recall (%) | F1 (%) |\n|---|---|---|---|\n");
    for (name, m) in &rows {
        csv.push_str(&format!(
            "{name},{},{},{},{}\n",
            m.weighted_precision, m.weighted_recall, m.weighted_f1, m.accuracy
        ));
        md.push_str(&format!(
            "| {name} | {:.2} | {:.2} | {:.2} |\n",
            100.0 * m.weighted_precision,
            100.0 * m.weighted_recall,
            100.0 * m.weighted_f1
        ));
    }
    std::fs::write(out.join("metrics.csv"), csv)?;
    std::fs::write(out.join("report.md"), md)?;
    Ok(())
}

pub enum ModelSource {
    Checkpoint(PathBuf),
    ZeroInit,
}

#[derive(Serialize)]
struct PredictionLine<'a> {
    index: usize,
    text: &'a str,
    label: &'static str,
    probabilities: BTreeMap<&'static str, f64>,
}

fn read_posts(path: &Path) -> anyhow::Result<Vec<String>> {
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv")) {
        let mut rdr = csv_reader(path)?;
        let headers = rdr.headers()?.clone();
        let col = headers
            .iter()
            .position(|h| h.trim().eq_ignore_ascii_case("text"))
            .ok_or_else(|| invalid(format!("{} has no `text` column", path.display())))?;
        return rdr
            .records()
            .map(|r| Ok(r?.get(col).unwrap_or_default().to_string()))
            .collect();
    }
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

fn csv_reader(path: &Path) -> anyhow::Result<csv::Reader<std::fs::File>> {
    Ok(csv::Reader::from_path(path)?)
}

pub fn predict(ctx: &Ctx, texts: Vec<String>, file: Option<&Path>, source: ModelSource, raw: bool) -> anyhow::Result<()> {
    let mut inputs = texts;
    if let Some(path) = file {
        inputs.extend(read_posts(path)?);
    }
    if inputs.is_empty() {
        return Err(invalid("nothing to classify: pass --text or --file"));
    }
    let extractor = extractor(ctx)?;
    let schema = extractor.schema();
    let model = match source {
        ModelSource::Checkpoint(dir) => {
            if !dir.join("weights.safetensors").is_file() {
                return Err(invalid(format!(
                    "no checkpoint at {}; run `depsev train` first or pass --zero-init",
                    dir.display()
                )));
            }
            HybridModel::load(&dir, Some(&schema.hash()), ctx.cache.as_deref())?
        }
        ModelSource::ZeroInit => {
            let choice = ModelChoice::from_config(&ctx.cfg)?;
            let enc = crate::pipeline::encoder(ctx, &choice.encoder_id, ctx.cfg.seed)?;
            let config = crate::pipeline::model_config(&ctx.cfg, &choice, &enc, &schema);
            HybridModel::zeroed(config, Box::new(enc), schema.clone())?
        }
    };
    let cleaning = ctx.cfg.cleaning()?;
    let cleaned: Vec<String> = inputs
        .iter()
        .map(|t| if raw { t.clone() } else { clean(t, &cleaning) })
        .collect();
    if let Some(i) = cleaned.iter().position(|t| t.trim().is_empty()) {
        return Err(invalid(format!("input {i} is empty after cleaning: {:?}", inputs[i])));
    }
    let features = cleaned
        .iter()
        .enumerate()
        .map(|(i, t)| extractor.extract(&Post::original(format!("input{i}"), t.clone(), Label::Minimum)))
        .collect::<depsev::Result<Vec<_>>>()?;
    let refs: Vec<&str> = cleaned.iter().map(String::as_str).collect();
    let prediction = model.predict(&refs, &features)?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (i, text) in inputs.iter().enumerate() {
        let line = PredictionLine {
            index: i,
            text,
            label: Label::from_index(prediction.labels[i]).map_or("unknown", Label::name),
            probabilities: Label::ALL
                .iter()
                .map(|l| (l.name(), prediction.probabilities[i][l.index()]))
                .collect(),
        };
        writeln!(out, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Stage {
    Augment,
    Train,
    Ablate,
}

pub fn report(ctx: &Ctx, stage: Option<Stage>, format: ReportFormat) -> anyhow::Result<()> {
    let stages = match stage {
        Some(s) => vec![s],
        None => vec![Stage::Augment, Stage::Train, Stage::Ablate],
    };
    let mut printed = false;
    for s in stages {
        let text = match s {
            Stage::Augment => {
                let path = ctx.run.path("augment_report.json");
                if !path.exists() {
                    continue;
                }
                let r: AugmentReport = read_json(&path)?;
                match format {
                    ReportFormat::Json => serde_json::to_string_pretty(&r)? + "\n",
                    ReportFormat::Markdown => augment_table(&r),
                    ReportFormat::Csv => {
                        let mut csv = String::from("label,before,before_pct,after,after_pct\n");
                        for l in Label::ALL {
                            csv.push_str(&format!(
                                "{},{},{},{},{}\n",
                                l.name(),
                                r.before.count(l),
                                100.0 * r.before.fraction(l),
                                r.after.count(l),
                                100.0 * r.after.fraction(l)
                            ));
                        }
                        csv
                    }
                }
            }
            Stage::Train => {
                let path = ctx.run.train_dir().join("report.json");
                if !path.exists() {
                    continue;
                }
                let r: ExperimentReport = read_json(&path)?;
                match format {
                    ReportFormat::Markdown => experiment_markdown(&r, ctx.run.manifest()?.seed),
                    other => render_report(&r, other)?,
                }
            }
            Stage::Ablate => match crate::ablate::render_stored(ctx, format)? {
                Some(text) => text,
                None => continue,
            },
        };
        if printed && format == ReportFormat::Markdown {
            println!();
        }
        print!("{text}");
        printed = true;
    }
    if !printed {
        return Err(invalid(format!(
            "no stored results under {}; run `depsev augment`, `depsev train` or `depsev ablate` first",
            ctx.run.root().display()
        )));
    }
    Ok(())
}
