//! Loads the experiment dataset once per invocation.

use std::path::PathBuf;

use eos_core::data_io::{self, ChecksumStatus, Dataset, Selection};
use eos_core::Batch;

use crate::config::DatasetConfig;
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub train: Dataset,
    pub eval: Dataset,
    pub train_batch: Batch,
    pub eval_batch: Batch,
    /// Facts worth recording in the run manifest.
    pub metadata: Vec<(String, String)>,
    /// Checksum mismatches and missing files; never fatal.
    pub warnings: Vec<String>,
}

fn cache_paths(prefix: &std::path::Path) -> (PathBuf, PathBuf) {
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    (with(".train.eosd"), with(".eval.eosd"))
}

pub fn load(cfg: &DatasetConfig) -> Result<ExperimentData> {
    let mut warnings = Vec::new();
    if cfg.dir.join("manifest.txt").is_file() {
        for (entry, status) in data_io::verify_manifest(&cfg.dir)? {
            match status {
                ChecksumStatus::Ok => {}
                ChecksumStatus::Missing => warnings.push(format!("{} listed in manifest but missing", entry.file)),
                ChecksumStatus::Mismatch { expected, found } => warnings.push(format!(
                    "{} checksum mismatch (expected {expected}, found {found})",
                    entry.file
                )),
            }
        }
    }

    let cached = cfg.cache.as_ref().map(|p| cache_paths(p));
    let (train, eval, from_cache) = match &cached {
        Some((t, e)) if t.is_file() && e.is_file() => (data_io::read_cache(t)?, data_io::read_cache(e)?, true),
        _ => {
            let (t, e) = data_io::prepare_fmnist(&cfg.dir, &cfg.subset)?;
            if let Some((tp, ep)) = &cached {
                data_io::write_cache(&t, tp)?;
                data_io::write_cache(&e, ep)?;
            }
            (t, e, false)
        }
    };

    let stats = train.normalization.expect("prepared datasets are normalized");
    let selection = match cfg.subset.selection {
        Selection::FirstN => "first_n".to_string(),
        Selection::SeededShuffle { seed } => format!("seeded_shuffle seed={seed}"),
    };
    let metadata = vec![
        ("data.dir".to_string(), cfg.dir.display().to_string()),
        ("data.selection".to_string(), selection),
        ("data.train_count".to_string(), train.len().to_string()),
        ("data.eval_count".to_string(), eval.len().to_string()),
        ("data.eval_source".to_string(), "test split".to_string()),
        (
            "data.normalization".to_string(),
            format!("scalar mean={:.17e} std={:.17e}", stats.mean, stats.std),
        ),
        ("data.from_cache".to_string(), from_cache.to_string()),
        (
            "data.checksums".to_string(),
            if warnings.is_empty() { "ok".to_string() } else { warnings.join("; ") },
        ),
    ];
    Ok(ExperimentData {
        train_batch: train.to_batch(),
        eval_batch: eval.to_batch(),
        train,
        eval,
        metadata,
        warnings,
    })
}
