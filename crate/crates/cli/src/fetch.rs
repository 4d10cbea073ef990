//! Downloads the Fashion-MNIST IDX files and records or checks their hashes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use eos_core::data_io::{self, TEST_IMAGES, TEST_LABELS, TRAIN_IMAGES, TRAIN_LABELS};

use crate::error::{LabError, PathContext, Result};

/// Gzipped file names requested from the mirror.
pub fn remote_files() -> [String; 4] {
    [TRAIN_IMAGES, TRAIN_LABELS, TEST_IMAGES, TEST_LABELS].map(|n| format!("{n}.gz"))
}

const MAX_BYTES: u64 = 256 * 1024 * 1024;

#[derive(Debug, Clone)]
pub struct FetchReport {
    pub dir: PathBuf,
    pub downloaded: Vec<String>,
    /// Files already present with a matching (or unrecorded) hash.
    pub skipped: Vec<String>,
    /// `true` when `manifest.txt` was written by this call.
    pub manifest_written: bool,
}

fn download(url: &str) -> Result<Vec<u8>> {
    let mut resp = ureq::get(url).call().map_err(|e| LabError::Fetch(format!("{url}: {e}")))?;
    resp.body_mut()
        .with_config()
        .limit(MAX_BYTES)
        .read_to_vec()
        .map_err(|e| LabError::Fetch(format!("{url}: {e}")))
}

/// Fetches any missing file from `base_url` into `dir`. With an existing
/// `manifest.txt` every file must match it; otherwise a manifest is written.
pub fn fetch(base_url: &str, dir: &Path) -> Result<FetchReport> {
    fs::create_dir_all(dir).at(dir)?;
    let manifest_path = dir.join("manifest.txt");
    let expected = if manifest_path.is_file() {
        data_io::parse_manifest(&fs::read_to_string(&manifest_path).at(&manifest_path)?)?
    } else {
        Vec::new()
    };
    let base = base_url.trim_end_matches('/');
    let mut report = FetchReport {
        dir: dir.to_path_buf(),
        downloaded: Vec::new(),
        skipped: Vec::new(),
        manifest_written: false,
    };
    let mut manifest = String::new();
    for name in remote_files() {
        let path = dir.join(&name);
        let want = expected.iter().find(|e| e.file == name);
        let existing = if path.is_file() { Some(fs::read(&path).at(&path)?) } else { None };
        let bytes = match existing {
            Some(b) if want.is_none_or(|w| w.sha256 == data_io::sha256_hex(&b)) => {
                report.skipped.push(name.clone());
                b
            }
            _ => {
                let b = download(&format!("{base}/{name}"))?;
                fs::write(&path, &b).at(&path)?;
                report.downloaded.push(name.clone());
                b
            }
        };
        if let Some(w) = want {
            let found = data_io::sha256_hex(&bytes);
            if w.sha256 != found {
                return Err(LabError::Fetch(format!(
                    "{name}: checksum mismatch (expected {}, found {found})",
                    w.sha256
                )));
            }
        }
        let _ = writeln!(manifest, "{}", data_io::manifest_line(&name, &bytes));
    }
    if expected.is_empty() {
        fs::write(&manifest_path, manifest).at(&manifest_path)?;
        report.manifest_written = true;
    }
    Ok(report)
}
