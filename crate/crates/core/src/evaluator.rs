//! Support-weighted precision/recall/F1, confusion matrices and the
//! experiment report renderers.

use serde::{Deserialize, Serialize};

use crate::corpus::Label;
use crate::error::{Error, Result};

/// Full-scale reference scores (percent): weighted precision, recall, F1
/// as mean and standard deviation over five runs.
pub const REFERENCE_MEAN: [f64; 3] = [84.26, 84.18, 84.15];
pub const REFERENCE_STD: [f64; 3] = [0.48, 1.26, 0.09];

/// Full-scale reference row-normalised confusion matrix, minimum→severe.
pub const REFERENCE_CONFUSION: [[f64; 4]; 4] = [
    [0.8371, 0.0453, 0.0569, 0.0500],
    [0.1884, 0.6299, 0.0715, 0.1000],
    [0.2580, 0.0600, 0.5975, 0.0780],
    [0.1700, 0.0588, 0.0763, 0.6863],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: Label,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Set when the class was never predicted, so precision is 0 by
    /// convention rather than by measurement.
    pub zero_division: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// Row-normalised; a row with no support stays all zero.
    pub confusion: Vec<Vec<f64>>,
    pub raw_confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalize {
    None,
    Row,
}

fn check_labels(predictions: &[usize], truth: &[usize]) -> Result<()> {
    if predictions.len() != truth.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} true labels",
            predictions.len(),
            truth.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Argument("cannot evaluate zero samples".into()));
    }
    if let Some(bad) = predictions.iter().chain(truth).find(|&&l| l >= Label::COUNT) {
        return Err(Error::Argument(format!("label index {bad} outside 0..{}", Label::COUNT)));
    }
    Ok(())
}

/// Counts indexed `[truth][prediction]`.
fn counts(predictions: &[usize], truth: &[usize]) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0usize; Label::COUNT]; Label::COUNT];
    for (&p, &t) in predictions.iter().zip(truth) {
        m[t][p] += 1;
    }
    m
}

fn row_normalize(m: &[Vec<usize>]) -> Vec<Vec<f64>> {
    m.iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                .collect()
        })
        .collect()
}

pub fn confusion_matrix(predictions: &[usize], truth: &[usize], normalize: Normalize) -> Result<Vec<Vec<f64>>> {
    check_labels(predictions, truth)?;
    let m = counts(predictions, truth);
    Ok(match normalize {
        Normalize::None => m
            .iter()
            .map(|row| row.iter().map(|&c| c as f64).collect())
            .collect(),
        Normalize::Row => row_normalize(&m),
    })
}

pub fn evaluate(predictions: &[usize], truth: &[usize]) -> Result<MetricsReport> {
    check_labels(predictions, truth)?;
    let raw = counts(predictions, truth);
    let n = truth.len() as f64;
    let mut per_class = Vec::with_capacity(Label::COUNT);
    let (mut wp, mut wr, mut wf) = (0.0, 0.0, 0.0);
    for (c, label) in Label::ALL.into_iter().enumerate() {
        let tp = raw[c][c] as f64;
        let support: usize = raw[c].iter().sum();
        let predicted: usize = raw.iter().map(|row| row[c]).sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if support == 0 { 0.0 } else { tp / support as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        let w = support as f64 / n;
        wp += w * precision;
        wr += w * recall;
        wf += w * f1;
        per_class.push(ClassMetrics {
            label,
            precision,
            recall,
            f1,
            support,
            zero_division: predicted == 0,
        });
    }
    let correct: usize = (0..Label::COUNT).map(|c| raw[c][c]).sum();
    Ok(MetricsReport {
        weighted_precision: wp,
        weighted_recall: wr,
        weighted_f1: wf,
        accuracy: correct as f64 / n,
        per_class,
        confusion: row_normalize(&raw),
        raw_confusion: raw,
    })
}

/// One training run's outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run: usize,
    pub seed: u64,
    pub metrics: MetricsReport,
    pub train_loss: Vec<f64>,
    pub wall_time_secs: f64,
    /// Epoch (1-based) whose weights were evaluated.
    pub selected_epoch: usize,
}

/// Mean and sample standard deviation of a scalar across runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    /// Sample (n − 1) standard deviation; 0 for a single value.
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Summary { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub run: usize,
    pub seed: u64,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Row label for rendered tables, such as `toy + mlp (k=4)`.
    pub name: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<RunReport>,
    pub precision: Summary,
    pub recall: Summary,
    pub f1: Summary,
    /// Element-wise mean of the runs' row-normalised matrices.
    pub mean_confusion: Vec<Vec<f64>>,
    pub failure: Option<RunFailure>,
}

impl ExperimentReport {
    pub fn new(name: impl Into<String>, seeds: Vec<u64>, runs: Vec<RunReport>, failure: Option<RunFailure>) -> Self {
        let pick = |f: fn(&MetricsReport) -> f64| -> Vec<f64> { runs.iter().map(|r| f(&r.metrics)).collect() };
        let mut mean_confusion = vec![vec![0.0; Label::COUNT]; Label::COUNT];
        for r in &runs {
            for (i, row) in r.metrics.confusion.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    mean_confusion[i][j] += v / runs.len() as f64;
                }
            }
        }
        ExperimentReport {
            name: name.into(),
            precision: Summary::of(&pick(|m| m.weighted_precision)),
            recall: Summary::of(&pick(|m| m.weighted_recall)),
            f1: Summary::of(&pick(|m| m.weighted_f1)),
            seeds,
            runs,
            mean_confusion,
            failure,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
    Markdown,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(Error::Argument(format!("unknown report format {other:?}"))),
        }
    }
}

pub fn render_report(report: &ExperimentReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => Ok(serde_json::to_string_pretty(report)? + "\n"),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Markdown => Ok(render_markdown(std::slice::from_ref(report))),
    }
}

fn render_csv(report: &ExperimentReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row", "seed", "weighted_precision", "weighted_recall", "weighted_f1", "accuracy"])?;
    for r in &report.runs {
        w.write_record([
            format!("run{}", r.run),
            r.seed.to_string(),
            r.metrics.weighted_precision.to_string(),
            r.metrics.weighted_recall.to_string(),
            r.metrics.weighted_f1.to_string(),
            r.metrics.accuracy.to_string(),
        ])?;
    }
    let acc = Summary::of(&report.runs.iter().map(|r| r.metrics.accuracy).collect::<Vec<_>>());
    for (row, pick) in [("mean", 0), ("std", 1)] {
        let v = |s: Summary| if pick == 0 { s.mean } else { s.std };
        w.write_record([
            row.to_string(),
            String::new(),
            v(report.precision).to_string(),
            v(report.recall).to_string(),
            v(report.f1).to_string(),
            v(acc).to_string(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Argument(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits utf-8"))
}

fn pct(s: Summary, with_std: bool) -> String {
    if with_std {
        format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std)
    } else {
        format!("{:.2}", 100.0 * s.mean)
    }
}

/// One table row per report: model, weighted precision, recall, F1 (in
/// percent). The ± column appears when any report has several runs.
pub fn render_markdown(reports: &[ExperimentReport]) -> String {
    let with_std = reports.iter().any(|r| r.runs.len() > 1);
    let mut out = String::from("| Model | Precision (%) | Recall (%) | F1 (%) |\n|---|---|---|---|\n");
    for r in reports {
        out.push_str(&format!(
            "| {} | {} | {} | {} |\n",
            r.name,
            pct(r.precision, with_std),
            pct(r.recall, with_std),
            pct(r.f1, with_std)
        ));
    }
    out
}

/// Confusion matrix as CSV with `truth` rows and predicted columns.
pub fn confusion_csv(matrix: &[Vec<f64>]) -> String {
    let mut out = String::from("truth");
    for l in Label::ALL {
        out.push(',');
        out.push_str(l.name());
    }
    out.push('\n');
    for (l, row) in Label::ALL.iter().zip(matrix) {
        out.push_str(l.name());
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
