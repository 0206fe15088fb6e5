use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("schema error: {0}")]
    Schema(String),

    /// One or more rows failed validation; each entry is `(row, reason)` with
    /// 1-based data row numbers (header excluded).
    #[error("validation failed for {} row(s): {}", .0.len(), format_rows(.0))]
    Validation(Vec<(usize, String)>),

    #[error("corpus is empty")]
    EmptyCorpus,

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("augmentation plan error: {0}")]
    Plan(String),

    #[error("augmentation failed for post {post_id}: {reason}")]
    Augmentation { post_id: String, reason: String },

    #[error("feature extraction failed for post {post_id}: {reason}")]
    FeatureExtraction { post_id: String, reason: String },

    #[error("stale feature cache at {path}: expected config hash {expected}, found {found}; re-run feature extraction")]
    StaleCache {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("encode error for input {index}: {reason}")]
    Encode { index: usize, reason: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("inference error: {0}")]
    Inference(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

fn format_rows(rows: &[(usize, String)]) -> String {
    let shown: Vec<String> = rows
        .iter()
        .take(20)
        .map(|(row, reason)| format!("row {row}: {reason}"))
        .collect();
    let mut out = shown.join("; ");
    if rows.len() > 20 {
        out.push_str(&format!("; ... and {} more", rows.len() - 20));
    }
    out
}
