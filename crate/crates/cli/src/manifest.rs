//! Per-invocation run manifest written as `manifest.txt`.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use eos_core::data_io::sha256_hex;
use eos_core::trainer::RunStatus;

use crate::error::{PathContext, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunOutcome {
    Completed,
    Diverged,
    /// Hit the epoch cap before the requested completion accuracy.
    Incomplete,
    Error,
}

impl RunOutcome {
    pub fn as_str(self) -> &'static str {
        match self {
            RunOutcome::Completed => "completed",
            RunOutcome::Diverged => "diverged",
            RunOutcome::Incomplete => "incomplete",
            RunOutcome::Error => "error",
        }
    }

    /// Fixed-length runs count as completed when they reach the cap.
    pub fn from_status(status: &RunStatus, needs_completion: bool) -> Self {
        match status {
            RunStatus::Diverged { .. } => RunOutcome::Diverged,
            RunStatus::Finished if needs_completion => RunOutcome::Incomplete,
            _ => RunOutcome::Completed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunEntry {
    pub id: String,
    pub outcome: RunOutcome,
    pub detail: String,
    pub artifacts: Vec<Artifact>,
}

impl RunEntry {
    pub fn new(id: impl Into<String>, outcome: RunOutcome) -> Self {
        Self {
            id: id.into(),
            outcome,
            detail: String::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    pub fn error(id: impl Into<String>, err: &dyn std::fmt::Display) -> Self {
        Self::new(id, RunOutcome::Error).with_detail(err.to_string())
    }
}

/// Writes artifacts under one output directory and remembers their hashes.
#[derive(Debug)]
pub struct ArtifactWriter {
    root: PathBuf,
}

impl ArtifactWriter {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).at(root)?;
        Ok(Self {
            root: root.to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, rel: &str, contents: &[u8]) -> Result<Artifact> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).at(parent)?;
        }
        std::fs::write(&path, contents).at(&path)?;
        Ok(Artifact {
            path: PathBuf::from(rel),
            sha256: sha256_hex(contents),
            bytes: contents.len() as u64,
        })
    }

    /// Registers a file some other writer produced.
    pub fn record(&self, rel: &str) -> Result<Artifact> {
        let path = self.root.join(rel);
        let bytes = std::fs::read(&path).at(&path)?;
        Ok(Artifact {
            path: PathBuf::from(rel),
            sha256: sha256_hex(&bytes),
            bytes: bytes.len() as u64,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub recipe: String,
    pub config_hash: String,
    pub code_version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Free-form `key=value` facts (data selection, normalization, …).
    pub metadata: Vec<(String, String)>,
    pub runs: Vec<RunEntry>,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn clean(s: &str) -> String {
    s.replace(['\n', '\r'], " ")
}

impl RunManifest {
    pub fn any_error(&self) -> bool {
        self.runs.iter().any(|r| r.outcome == RunOutcome::Error)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "recipe={}", self.recipe);
        let _ = writeln!(s, "config_hash={}", self.config_hash);
        let _ = writeln!(s, "code_version={}", self.code_version);
        let _ = writeln!(s, "started={}", self.started_unix);
        let _ = writeln!(s, "finished={}", self.finished_unix);
        for (k, v) in &self.metadata {
            let _ = writeln!(s, "meta.{k}={}", clean(v));
        }
        for r in &self.runs {
            let _ = writeln!(s, "run={} status={} detail={}", r.id, r.outcome.as_str(), clean(&r.detail));
            for a in &r.artifacts {
                let _ = writeln!(
                    s,
                    "artifact run={} file={} sha256={} bytes={}",
                    r.id,
                    a.path.display(),
                    a.sha256,
                    a.bytes
                );
            }
        }
        s
    }

    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join("manifest.txt");
        std::fs::write(&path, self.to_text()).at(&path)?;
        Ok(path)
    }
}
