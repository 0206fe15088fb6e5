//! Ablation grids: every combination of encoder, head, k and augmentation
//! setting is trained with the configured seeds. Each finished cell is
//! appended to `ablate/results.jsonl` as soon as it completes, so an
//! interrupted grid picks up where it stopped.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use anyhow::Context;
use depsev::corpus::Corpus;
use depsev::evaluator::{ExperimentReport, ReportFormat};
use depsev::model::HeadKind;
use depsev::seed::content_hash;
use serde::{Deserialize, Serialize};

use crate::commands::run_training;
use crate::config::Config;
use crate::errors::invalid;
use crate::pipeline::{feature_table, hash_file, training_corpus, Ctx, ModelChoice};

#[derive(Debug, Clone, PartialEq)]
pub struct AblationGrid {
    pub encoder_id: Vec<String>,
    pub head: Vec<HeadKind>,
    pub k: Vec<usize>,
    pub augmentation: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub encoder_id: String,
    pub head: HeadKind,
    pub k: usize,
    pub augmentation: bool,
}

impl Cell {
    pub fn key(&self) -> String {
        format!(
            "encoder={}|head={}|k={}|augmentation={}",
            self.encoder_id,
            self.head,
            self.k,
            if self.augmentation { "on" } else { "off" }
        )
    }

    fn choice(&self) -> ModelChoice {
        ModelChoice {
            encoder_id: self.encoder_id.clone(),
            head: self.head,
            k: self.k,
        }
    }
}

fn dedup<T: PartialEq + Clone>(items: &[T]) -> Vec<T> {
    let mut out: Vec<T> = Vec::new();
    for item in items {
        if !out.contains(item) {
            out.push(item.clone());
        }
    }
    out
}

impl AblationGrid {
    pub fn from_config(cfg: &Config) -> anyhow::Result<AblationGrid> {
        let a = &cfg.ablate;
        let encoder_id = if a.encoder_id.is_empty() {
            vec![cfg.encoder.model_id.clone()]
        } else {
            a.encoder_id.clone()
        };
        let head = a
            .head
            .iter()
            .map(|h| h.parse::<HeadKind>().map_err(|e| invalid(e.to_string())))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let augmentation = a
            .augmentation
            .iter()
            .map(|v| match v.trim().to_ascii_lowercase().as_str() {
                "on" | "true" => Ok(true),
                "off" | "false" => Ok(false),
                other => Err(invalid(format!("ablate.augmentation values are on/off, got {other:?}"))),
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        let grid = AblationGrid {
            encoder_id: dedup(&encoder_id),
            head: dedup(&head),
            k: dedup(&a.k),
            augmentation: dedup(&augmentation),
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.encoder_id.is_empty() || self.head.is_empty() || self.k.is_empty() || self.augmentation.is_empty() {
            return Err(invalid("every ablation axis needs at least one value"));
        }
        if let Some(k) = self.k.iter().find(|&&k| !(1..=6).contains(&k)) {
            return Err(invalid(format!("ablation k values must lie in 1..=6, got {k}")));
        }
        Ok(())
    }

    /// Cells in row order: encoder, head, k, then augmentation.
    pub fn cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for encoder_id in &self.encoder_id {
            for &head in &self.head {
                for &k in &self.k {
                    for &augmentation in &self.augmentation {
                        cells.push(Cell {
                            encoder_id: encoder_id.clone(),
                            head,
                            k,
                            augmentation,
                        });
                    }
                }
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub key: String,
    /// Fingerprint of the settings and inputs the cell ran with. Stored
    /// results are reused only when it matches.
    pub fingerprint: String,
    pub cell: Cell,
    pub report: Option<ExperimentReport>,
    pub error: Option<String>,
}

impl CellResult {
    pub fn succeeded(&self) -> bool {
        self.error.is_none() && self.report.as_ref().is_some_and(|r| r.is_complete())
    }
}

fn results_path(ctx: &Ctx) -> std::path::PathBuf {
    ctx.run.ablate_dir().join("results.jsonl")
}

/// Latest stored result per cell key. A truncated final line (from an
/// interrupted write) is ignored.
fn stored_results(ctx: &Ctx) -> anyhow::Result<HashMap<String, CellResult>> {
    let path = results_path(ctx);
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let text = std::fs::read_to_string(&path)?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<CellResult>(line) {
            Ok(r) => {
                out.insert(r.key.clone(), r);
            }
            Err(e) => log::warn!("{}:{}: skipping unreadable result ({e})", path.display(), i + 1),
        }
    }
    Ok(out)
}

fn append(ctx: &Ctx, result: &CellResult) -> anyhow::Result<()> {
    let path = results_path(ctx);
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("opening {}", path.display()))?;
    // Start a fresh line after a partial write from an interrupted run.
    let text = std::fs::read(&path)?;
    if text.last().is_some_and(|&b| b != b'\n') {
        writeln!(file)?;
    }
    writeln!(file, "{}", serde_json::to_string(result)?)?;
    file.sync_data()?;
    Ok(())
}

/// Settings shared by every cell; the ablation section itself is left
/// out so that growing a grid keeps earlier cells.
fn base_fingerprint(ctx: &Ctx) -> anyhow::Result<String> {
    let mut cfg = ctx.cfg.clone();
    cfg.ablate = Default::default();
    cfg.encoder.model_id = String::new();
    cfg.model.head = String::new();
    cfg.model.k = 0;
    let mut inputs = Vec::new();
    for path in [ctx.run.corpus(), ctx.run.augmented(), ctx.run.features()] {
        inputs.push(if path.exists() { hash_file(&path)? } else { String::new() });
    }
    Ok(content_hash(format!("{}|{}", serde_json::to_string(&cfg)?, inputs.join("|")).as_bytes()))
}

/// Runs every cell not already stored with a matching fingerprint and
/// returns results in grid order. A failing cell is recorded and the grid
/// moves on.
pub fn run_ablation(ctx: &Ctx, grid: &AblationGrid) -> anyhow::Result<Vec<CellResult>> {
    grid.validate()?;
    let features = feature_table(ctx)?;
    let mut corpora: BTreeMap<bool, Corpus> = BTreeMap::new();
    for &aug in &grid.augmentation {
        corpora.insert(aug, training_corpus(ctx, aug)?);
    }
    std::fs::create_dir_all(ctx.run.ablate_dir())?;
    let base = base_fingerprint(ctx)?;
    let mut stored = stored_results(ctx)?;
    let cells = grid.cells();
    let mut results = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let key = cell.key();
        let fingerprint = content_hash(format!("{base}|{key}").as_bytes());
        if let Some(done) = stored.remove(&key).filter(|r| r.fingerprint == fingerprint && r.succeeded()) {
            log::info!("ablate [{}/{}] {key}: stored result reused", i + 1, cells.len());
            results.push(done);
            continue;
        }
        log::info!("ablate [{}/{}] {key}", i + 1, cells.len());
        let outcome = run_training(ctx, &cell.choice(), cell.augmentation, &corpora[&cell.augmentation], &features, None);
        let result = match outcome {
            Ok(report) => CellResult {
                key,
                fingerprint,
                cell: cell.clone(),
                error: report.failure.as_ref().map(|f| format!("run {} (seed {}): {}", f.run, f.seed, f.reason)),
                report: Some(report),
            },
            Err(e) => {
                log::error!("cell {key} failed: {e:#}");
                CellResult {
                    key,
                    fingerprint,
                    cell: cell.clone(),
                    report: None,
                    error: Some(format!("{e:#}")),
                }
            }
        };
        append(ctx, &result)?;
        results.push(result);
    }
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub encoder_id: String,
    pub head: String,
    pub k: usize,
    pub augmentation: &'static str,
    pub runs: usize,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
    pub f1_std: Option<f64>,
    /// On-cell minus the matching off-cell, when both exist.
    pub delta_precision: Option<f64>,
    pub delta_recall: Option<f64>,
    pub delta_f1: Option<f64>,
    pub error: Option<String>,
}

pub fn table(results: &[CellResult]) -> Vec<TableRow> {
    fn scores(r: &CellResult) -> Option<&ExperimentReport> {
        r.report.as_ref().filter(|rep| !rep.runs.is_empty())
    }
    let off: HashMap<String, &ExperimentReport> = results
        .iter()
        .filter(|r| !r.cell.augmentation)
        .filter_map(|r| {
            let twin = Cell { augmentation: true, ..r.cell.clone() }.key();
            scores(r).map(|rep| (twin, rep))
        })
        .collect();
    results
        .iter()
        .map(|r| {
            let rep = scores(r);
            let base = if r.cell.augmentation { off.get(&r.key).copied() } else { None };
            let delta = |pick: fn(&ExperimentReport) -> f64| match (rep, base) {
                (Some(on), Some(off)) => Some(pick(on) - pick(off)),
                _ => None,
            };
            TableRow {
                encoder_id: r.cell.encoder_id.clone(),
                head: r.cell.head.to_string(),
                k: r.cell.k,
                augmentation: if r.cell.augmentation { "on" } else { "off" },
                runs: rep.map_or(0, |x| x.runs.len()),
                precision: rep.map(|x| x.precision.mean),
                recall: rep.map(|x| x.recall.mean),
                f1: rep.map(|x| x.f1.mean),
                f1_std: rep.map(|x| x.f1.std),
                delta_precision: delta(|x| x.precision.mean),
                delta_recall: delta(|x| x.recall.mean),
                delta_f1: delta(|x| x.f1.mean),
                error: r.error.clone(),
            }
        })
        .collect()
}

fn opt(v: Option<f64>, scale: f64, signed: bool) -> String {
    match v {
        Some(x) if signed => format!("{:+.2}", scale * x),
        Some(x) => format!("{:.2}", scale * x),
        None => String::new(),
    }
}

pub fn render(rows: &[TableRow], format: ReportFormat) -> anyhow::Result<String> {
    Ok(match format {
        ReportFormat::Json => serde_json::to_string_pretty(rows)? + "\n",
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for row in rows {
                w.serialize(row)?;
            }
            String::from_utf8(w.into_inner()?)?
        }
        ReportFormat::Markdown => {
            let with_delta = rows.iter().any(|r| r.delta_f1.is_some());
            let mut md = String::from("| Encoder | Head | k | Augmentation | Precision (%) | Recall (%) | F1 (%) | F1 std |");
            md.push_str(if with_delta { " ΔP | ΔR | ΔF1 | Status |\n" } else { " Status |\n" });
            md.push_str(&"|---".repeat(if with_delta { 12 } else { 9 }));
            md.push_str("|\n");
            for r in rows {
                md.push_str(&format!(
                    "| {} | {} | {} | {} | {} | {} | {} | {} |",
                    r.encoder_id,
                    r.head,
                    r.k,
                    r.augmentation,
                    opt(r.precision, 100.0, false),
                    opt(r.recall, 100.0, false),
                    opt(r.f1, 100.0, false),
                    opt(r.f1_std, 100.0, false)
                ));
                if with_delta {
                    md.push_str(&format!(
                        " {} | {} | {} |",
                        opt(r.delta_precision, 100.0, true),
                        opt(r.delta_recall, 100.0, true),
                        opt(r.delta_f1, 100.0, true)
                    ));
                }
                let status = match &r.error {
                    Some(e) => format!("failed: {}", e.replace('|', "/").replace('\n', " ")),
                    None => "ok".into(),
                };
                md.push_str(&format!(" {status} |\n"));
            }
            md
        }
    })
}

pub fn ablate(ctx: &Ctx) -> anyhow::Result<()> {
    let grid = AblationGrid::from_config(&ctx.cfg)?;
    let results = run_ablation(ctx, &grid)?;
    let rows = table(&results);
    let dir = ctx.run.ablate_dir();
    std::fs::write(dir.join("ablation.csv"), render(&rows, ReportFormat::Csv)?)?;
    let md = render(&rows, ReportFormat::Markdown)?;
    std::fs::write(dir.join("ablation.md"), &md)?;
    crate::run_dir::write_json(&dir.join("grid.json"), &grid.cells())?;
    print!("{md}");
    let failed: Vec<&str> = results.iter().filter(|r| !r.succeeded()).map(|r| r.key.as_str()).collect();
    if !failed.is_empty() {
        anyhow::bail!("{} of {} cells failed: {}", failed.len(), results.len(), failed.join(", "));
    }
    Ok(())
}

/// The table for the grid last run in this directory, from stored results.
pub fn render_stored(ctx: &Ctx, format: ReportFormat) -> anyhow::Result<Option<String>> {
    let grid_path = ctx.run.ablate_dir().join("grid.json");
    if !grid_path.exists() {
        return Ok(None);
    }
    let cells: Vec<Cell> = crate::run_dir::read_json(&grid_path)?;
    let mut stored = stored_results(ctx)?;
    let results: Vec<CellResult> = cells
        .into_iter()
        .map(|cell| {
            let key = cell.key();
            stored.remove(&key).unwrap_or(CellResult {
                key,
                fingerprint: String::new(),
                cell,
                report: None,
                error: Some("not run".into()),
            })
        })
        .collect();
    Ok(Some(render(&table(&results), format)?))
}
