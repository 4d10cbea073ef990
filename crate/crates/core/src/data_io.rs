//! Fashion-MNIST ingestion: IDX parsing (raw or gzip), scalar normalization,
//! deterministic subsetting, a binary dataset cache and SHA-256 manifests.

use std::fmt::Write as _;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::GzDecoder;
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nn::{Batch, Targets};
use crate::{Error, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;
const CACHE_MAGIC: &[u8; 4] = b"EOSD";
const CACHE_VERSION: u32 = 1;
const STD_FLOOR: f64 = 1e-8;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
}

/// Images as rows of `f64` pixels with their class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `N × (rows·cols)`; raw loads are scaled to `[0, 1]`.
    pub images: Array2<f64>,
    pub labels: Vec<u8>,
    /// Image shape as stored in the IDX header.
    pub shape: (usize, usize),
    /// Statistics applied by [`normalize`], if any.
    pub normalization: Option<Normalization>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            shape: self.shape,
            normalization: self.normalization,
        }
    }

    pub fn to_batch(&self) -> Batch {
        Batch {
            inputs: self.images.clone(),
            targets: Targets::Labels(self.labels.iter().map(|&l| l as usize).collect()),
        }
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::TruncatedFile {
                path: path.to_path_buf(),
                detail: format!("gzip stream: {e}"),
            })?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::TruncatedFile {
            path: path.to_path_buf(),
            detail: format!("header ends before byte {}", at + 4),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<()> {
    let found = be_u32(bytes, 0, path)?;
    if found != expected {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found,
            expected,
        });
    }
    Ok(())
}

fn payload<'a>(bytes: &'a [u8], offset: usize, len: usize, path: &Path) -> Result<&'a [u8]> {
    bytes.get(offset..offset + len).ok_or_else(|| Error::TruncatedFile {
        path: path.to_path_buf(),
        detail: format!("expected {len} payload bytes, found {}", bytes.len().saturating_sub(offset)),
    })
}

/// Parses an IDX image/label pair; pixels are mapped to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let img = read_maybe_gz(images_path)?;
    check_magic(&img, IMAGE_MAGIC, images_path)?;
    let n = be_u32(&img, 4, images_path)? as usize;
    let rows = be_u32(&img, 8, images_path)? as usize;
    let cols = be_u32(&img, 12, images_path)? as usize;
    let pixels = payload(&img, 16, n * rows * cols, images_path)?;

    let lab = read_maybe_gz(labels_path)?;
    check_magic(&lab, LABEL_MAGIC, labels_path)?;
    let m = be_u32(&lab, 4, labels_path)? as usize;
    let labels = payload(&lab, 8, m, labels_path)?.to_vec();
    if n != m {
        return Err(Error::CountMismatch { images: n, labels: m });
    }
    let images = Array2::from_shape_vec(
        (n, rows * cols),
        pixels.iter().map(|&p| p as f64 / 255.0).collect(),
    )
    .expect("payload length checked");
    Ok(Dataset {
        images,
        labels,
        shape: (rows, cols),
        normalization: None,
    })
}

/// Finds `name` or `name.gz` in `dir`.
pub fn locate(dir: &Path, name: &str) -> Option<PathBuf> {
    [dir.join(format!("{name}.gz")), dir.join(name)]
        .into_iter()
        .find(|p| p.is_file())
}

/// Loads the official train and test splits from a directory.
pub fn load_fmnist_dir(dir: &Path) -> Result<(Dataset, Dataset)> {
    let find = |name: &str| {
        locate(dir, name).ok_or_else(|| {
            Error::Io(std::io::Error::new(
                std::io::ErrorKind::NotFound,
                format!("{name}[.gz] not found in {}", dir.display()),
            ))
        })
    };
    let train = load_idx(&find(TRAIN_IMAGES)?, &find(TRAIN_LABELS)?)?;
    let test = load_idx(&find(TEST_IMAGES)?, &find(TEST_LABELS)?)?;
    Ok((train, test))
}

/// Scalar mean and standard deviation over every pixel of `train`.
pub fn statistics(train: &Dataset) -> Result<Normalization> {
    if train.is_empty() {
        return Err(Error::InvalidInput("statistics need a nonempty train set".into()));
    }
    let n = train.images.len() as f64;
    let mean = train.images.iter().sum::<f64>() / n;
    let var = train.images.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Ok(Normalization {
        mean,
        std: var.sqrt().max(STD_FLOOR),
    })
}

/// `x ← (x − mean) / std` with statistics taken from the train subset.
pub fn normalize(dataset: &Dataset, stats: Normalization) -> Dataset {
    let mut out = dataset.clone();
    out.images.mapv_inplace(|x| (x - stats.mean) / stats.std);
    out.normalization = Some(stats);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Selection {
    FirstN,
    SeededShuffle { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SubsetSpec {
    pub train_count: usize,
    pub eval_count: usize,
    pub selection: Selection,
}

impl Default for SubsetSpec {
    fn default() -> Self {
        Self {
            train_count: 1000,
            eval_count: 200,
            selection: Selection::FirstN,
        }
    }
}

fn order(n: usize, selection: Selection) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if let Selection::SeededShuffle { seed } = selection {
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    idx
}

/// Disjoint train and eval subsets drawn from one dataset.
pub fn subset(dataset: &Dataset, spec: &SubsetSpec) -> Result<(Dataset, Dataset)> {
    let need = spec.train_count + spec.eval_count;
    if need > dataset.len() {
        return Err(Error::InsufficientData {
            requested: need,
            available: dataset.len(),
        });
    }
    let idx = order(dataset.len(), spec.selection);
    Ok((
        dataset.select(&idx[..spec.train_count]),
        dataset.select(&idx[spec.train_count..need]),
    ))
}

/// Train subset from `train`, eval subset from the separate `eval` split.
pub fn subset_split(train: &Dataset, eval: &Dataset, spec: &SubsetSpec) -> Result<(Dataset, Dataset)> {
    for (ds, count) in [(train, spec.train_count), (eval, spec.eval_count)] {
        if count > ds.len() {
            return Err(Error::InsufficientData {
                requested: count,
                available: ds.len(),
            });
        }
    }
    let a = order(train.len(), spec.selection);
    let b = order(eval.len(), spec.selection);
    Ok((train.select(&a[..spec.train_count]), eval.select(&b[..spec.eval_count])))
}

/// Loads a directory of IDX files, subsets (eval from the test split), and
/// normalizes both parts with train-subset statistics.
pub fn prepare_fmnist(dir: &Path, spec: &SubsetSpec) -> Result<(Dataset, Dataset)> {
    let (train, test) = load_fmnist_dir(dir)?;
    let (tr, ev) = subset_split(&train, &test, spec)?;
    let stats = statistics(&tr)?;
    Ok((normalize(&tr, stats), normalize(&ev, stats)))
}

/// Serializes a dataset to the `EOSD` cache layout (little-endian).
pub fn write_cache(dataset: &Dataset, path: &Path) -> Result<()> {
    let (n, d) = dataset.images.dim();
    let mut buf = Vec::with_capacity(48 + n * d * 8 + n);
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(dataset.shape.0 as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.shape.1 as u32).to_le_bytes());
    match dataset.normalization {
        Some(s) => {
            buf.push(1);
            buf.extend_from_slice(&s.mean.to_le_bytes());
            buf.extend_from_slice(&s.std.to_le_bytes());
        }
        None => {
            buf.push(0);
            buf.extend_from_slice(&[0u8; 16]);
        }
    }
    for x in dataset.images.iter() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    buf.extend_from_slice(&dataset.labels);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_cache(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    let trunc = |detail: &str| Error::TruncatedFile {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    if bytes.len() < 41 {
        return Err(trunc("header"));
    }
    if &bytes[..4] != CACHE_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: u32::from_be_bytes(bytes[..4].try_into().unwrap()),
            expected: u32::from_be_bytes(*CACHE_MAGIC),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::Unsupported(format!("cache version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let rows = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[20..24].try_into().unwrap()) as usize;
    let f64_at = |at: usize| f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let normalization = (bytes[24] == 1).then(|| Normalization {
        mean: f64_at(25),
        std: f64_at(33),
    });
    let d = rows * cols;
    let start = 41;
    let end = start + n * d * 8;
    if bytes.len() != end + n {
        return Err(trunc(&format!("expected {} bytes, found {}", end + n, bytes.len())));
    }
    let data: Vec<f64> = bytes[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Dataset {
        images: Array2::from_shape_vec((n, d), data).expect("length checked"),
        labels: bytes[end..].to_vec(),
        shape: (rows, cols),
        normalization,
    })
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut s = String::with_capacity(64);
    for b in digest.iter() {
        let _ = write!(s, "{b:02x}");
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub file: String,
    pub sha256: String,
    pub bytes: u64,
}

/// Parses `key=value` lines (`file=… sha256=… bytes=…`); blank lines and
/// `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (mut file, mut sha, mut bytes) = (None, None, None);
        for field in line.split_whitespace() {
            match field.split_once('=') {
                Some(("file", v)) => file = Some(v.to_string()),
                Some(("sha256", v)) => sha = Some(v.to_lowercase()),
                Some(("bytes", v)) => bytes = v.parse().ok(),
                _ => {}
            }
        }
        match (file, sha, bytes) {
            (Some(file), Some(sha256), Some(bytes)) => out.push(ManifestEntry { file, sha256, bytes }),
            _ => {
                return Err(Error::InvalidInput(format!(
                    "manifest line {} needs file=, sha256= and bytes=",
                    lineno + 1
                )))
            }
        }
    }
    Ok(out)
}

pub fn manifest_line(file: &str, bytes: &[u8]) -> String {
    format!("file={file} sha256={} bytes={}", sha256_hex(bytes), bytes.len())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChecksumStatus {
    Ok,
    Missing,
    Mismatch { expected: String, found: String },
}

/// Checks every file listed in `dir/manifest.txt`. Mismatches are reported,
/// not raised, because mirrors differ.
pub fn verify_manifest(dir: &Path) -> Result<Vec<(ManifestEntry, ChecksumStatus)>> {
    let text = fs::read_to_string(dir.join("manifest.txt"))?;
    parse_manifest(&text)?
        .into_iter()
        .map(|e| {
            let path = dir.join(&e.file);
            let status = if !path.is_file() {
                ChecksumStatus::Missing
            } else {
                let found = sha256_hex(&fs::read(&path)?);
                if found == e.sha256 {
                    ChecksumStatus::Ok
                } else {
                    ChecksumStatus::Mismatch {
                        expected: e.sha256.clone(),
                        found,
                    }
                }
            };
            Ok((e, status))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use flate2::write::GzEncoder;
    use flate2::Compression;
    use std::io::Write;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IMAGE_MAGIC.to_be_bytes());
        for x in [n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    fn fixture(dir: &Path, img: &[u8], lab: &[u8]) -> (PathBuf, PathBuf) {
        let (a, b) = (dir.join("img"), dir.join("lab"));
        fs::write(&a, img).unwrap();
        fs::write(&b, lab).unwrap();
        (a, b)
    }

    #[test]
    fn two_image_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let mut pixels = vec![0u8; 2 * 784];
        pixels[0] = 255;
        pixels[784 + 783] = 51;
        let (a, b) = fixture(dir.path(), &idx_images(2, 28, 28, &pixels), &idx_labels(&[7, 3]));
        let ds = load_idx(&a, &b).unwrap();
        assert_eq!(ds.images.dim(), (2, 784));
        assert_eq!(ds.labels, vec![7, 3]);
        assert_eq!(ds.images[[0, 0]], 1.0);
        assert_eq!(ds.images[[1, 783]], 0.2);
        assert_eq!(ds.shape, (28, 28));
    }

    #[test]
    fn gzip_input_is_transparent() {
        let dir = tempfile::tempdir().unwrap();
        let gz = |data: &[u8]| {
            let mut e = GzEncoder::new(Vec::new(), Compression::default());
            e.write_all(data).unwrap();
            e.finish().unwrap()
        };
        let img = idx_images(1, 2, 2, &[0, 255, 0, 255]);
        let (a, b) = fixture(dir.path(), &gz(&img), &gz(&idx_labels(&[1])));
        let ds = load_idx(&a, &b).unwrap();
        assert_eq!(ds.images.row(0).to_vec(), vec![0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn malformed_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let img = idx_images(2, 2, 2, &[0; 8]);
        let mut bad = idx_labels(&[0, 1]);
        bad[3] = 0x03;
        let (a, b) = fixture(dir.path(), &img, &bad);
        assert!(matches!(load_idx(&a, &b), Err(Error::BadMagic { .. })));

        let (a, b) = fixture(dir.path(), &img[..img.len() - 1], &idx_labels(&[0, 1]));
        assert!(matches!(load_idx(&a, &b), Err(Error::TruncatedFile { .. })));

        let (a, b) = fixture(dir.path(), &img, &idx_labels(&[0]));
        assert!(matches!(load_idx(&a, &b), Err(Error::CountMismatch { images: 2, labels: 1 })));
    }

    fn synthetic(n: usize) -> Dataset {
        Dataset {
            images: Array2::from_shape_fn((n, 4), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 10.0),
            labels: (0..n).map(|i| (i % 10) as u8).collect(),
            shape: (2, 2),
            normalization: None,
        }
    }

    #[test]
    fn normalization_contract() {
        let ds = synthetic(50);
        let (tr, ev) = subset(&ds, &SubsetSpec { train_count: 30, eval_count: 20, selection: Selection::FirstN }).unwrap();
        let stats = statistics(&tr).unwrap();
        let tr_n = normalize(&tr, stats);
        let ev_n = normalize(&ev, stats);
        let n = tr_n.images.len() as f64;
        let mean = tr_n.images.sum() / n;
        let std = (tr_n.images.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mean.abs() < 1e-10);
        assert!((std - 1.0).abs() < 1e-10);
        assert_eq!(ev_n.images[[0, 0]], (ev.images[[0, 0]] - stats.mean) / stats.std);

        let flat = Dataset { images: Array2::from_elem((3, 4), 0.5), ..synthetic(3) };
        let s = statistics(&flat).unwrap();
        assert_eq!(s.std, STD_FLOOR);
        assert!(normalize(&flat, s).images.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn subset_examples() {
        let ds = synthetic(1200);
        let (tr, ev) = subset(&ds, &SubsetSpec::default()).unwrap();
        assert_eq!(tr.images, ds.images.slice(ndarray::s![..1000, ..]));
        assert_eq!(ev.labels, ds.labels[1000..].to_vec());
        let shuffled = SubsetSpec { selection: Selection::SeededShuffle { seed: 5 }, ..Default::default() };
        let a = subset(&ds, &shuffled).unwrap();
        let b = subset(&ds, &shuffled).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0.labels, tr.labels);
        let too_many = SubsetSpec { train_count: 1100, eval_count: 200, selection: Selection::FirstN };
        assert!(matches!(subset(&ds, &too_many), Err(Error::InsufficientData { requested: 1300, available: 1200 })));
    }

    #[test]
    fn cache_round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let ds = normalize(&synthetic(13), Normalization { mean: 0.3, std: 0.7 });
        let path = dir.path().join("cache.eosd");
        write_cache(&ds, &path).unwrap();
        assert_eq!(read_cache(&path).unwrap(), ds);
        let mut bytes = fs::read(&path).unwrap();
        bytes.pop();
        fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_cache(&path), Err(Error::TruncatedFile { .. })));
    }

    #[test]
    fn manifest_checks() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.bin"), b"abc").unwrap();
        fs::write(dir.path().join("b.bin"), b"xyz").unwrap();
        let manifest = format!(
            "{}\n{}\nfile=c.bin sha256=00 bytes=1\n",
            manifest_line("a.bin", b"abc"),
            manifest_line("b.bin", b"not xyz")
        );
        fs::write(dir.path().join("manifest.txt"), manifest).unwrap();
        let res = verify_manifest(dir.path()).unwrap();
        assert_eq!(
            res[0].0.sha256,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(res[0].1, ChecksumStatus::Ok);
        assert!(matches!(res[1].1, ChecksumStatus::Mismatch { .. }));
        assert_eq!(res[2].1, ChecksumStatus::Missing);
        assert!(parse_manifest("file=x\n").is_err());
    }
}
