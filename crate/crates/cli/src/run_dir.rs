//! Layout of a run directory and its `manifest.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use crate::errors::invalid;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct StageRecord {
    /// Hash of everything the stage read; equal hashes with outputs still
    /// present mean the stage can be skipped.
    pub input_hash: String,
    pub outputs: Vec<String>,
    pub seeds: BTreeMap<String, u64>,
    pub finished_unix: u64,
    #[serde(default)]
    pub details: serde_json::Value,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub stages: BTreeMap<String, StageRecord>,
}

pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    pub fn open(root: &Path) -> anyhow::Result<RunDir> {
        std::fs::create_dir_all(root).with_context(|| format!("creating run directory {}", root.display()))?;
        Ok(RunDir { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn corpus(&self) -> PathBuf {
        self.path("corpus.csv")
    }

    pub fn augmented(&self) -> PathBuf {
        self.path("augmented.csv")
    }

    pub fn features(&self) -> PathBuf {
        self.path("features.csv")
    }

    pub fn train_dir(&self) -> PathBuf {
        self.path("train")
    }

    pub fn ablate_dir(&self) -> PathBuf {
        self.path("ablate")
    }

    /// Fails with a message naming the command that produces `path`.
    pub fn require(&self, path: &Path, producer: &str) -> anyhow::Result<()> {
        if path.exists() {
            Ok(())
        } else {
            Err(invalid(format!(
                "{} not found; run `depsev {producer}` first (with the same --run-dir)",
                path.display()
            )))
        }
    }

    pub fn manifest(&self) -> anyhow::Result<Manifest> {
        let path = self.path("manifest.json");
        if !path.exists() {
            return Ok(Manifest {
                version: env!("CARGO_PKG_VERSION").into(),
                ..Manifest::default()
            });
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).with_context(|| format!("reading {}", path.display()))
    }

    pub fn stage(&self, name: &str) -> anyhow::Result<Option<StageRecord>> {
        Ok(self.manifest()?.stages.get(name).cloned())
    }

    /// The stored record when its hash matches and its outputs exist.
    pub fn up_to_date(&self, name: &str, input_hash: &str) -> anyhow::Result<Option<StageRecord>> {
        Ok(self.stage(name)?.filter(|r| {
            r.input_hash == input_hash && r.outputs.iter().all(|o| self.path(o).exists())
        }))
    }

    pub fn record(&self, name: &str, seed: u64, mut record: StageRecord) -> anyhow::Result<()> {
        let mut manifest = self.manifest()?;
        manifest.version = env!("CARGO_PKG_VERSION").into();
        manifest.seed = seed;
        record.finished_unix = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
        manifest.stages.insert(name.to_string(), record);
        write_json(&self.path("manifest.json"), &manifest)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}
