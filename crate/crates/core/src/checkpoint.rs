//! Little-endian binary checkpoints.
//!
//! Both formats start with a 16-byte header: 4-byte magic, `u32` version,
//! `u64` length. Parameter files (`EOSP`) follow it with `length` f64 values.
//! Eigenvector files (`EOSV`) use `length` for the vector dimension, then a
//! `u64` count `k`, `k` eigenvalues and `k·length` vector entries.

use std::fs;
use std::path::Path;

use crate::spectral::{EigenPair, Spectrum};
use crate::{Error, Result};

pub const PARAMS_MAGIC: &[u8; 4] = b"EOSP";
pub const VECTORS_MAGIC: &[u8; 4] = b"EOSV";
const VERSION: u32 = 1;
const HEADER: usize = 16;

fn header(magic: &[u8; 4], len: usize, extra: usize) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER + extra);
    buf.extend_from_slice(magic);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(len as u64).to_le_bytes());
    buf
}

fn push_f64s(buf: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
}

fn f64s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Reads the header and returns `(length, body)`.
fn open<'a>(bytes: &'a [u8], magic: &[u8; 4], path: &Path) -> Result<(usize, &'a [u8])> {
    if bytes.len() < HEADER {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            detail: format!("{} header bytes", bytes.len()),
        });
    }
    if &bytes[..4] != magic {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            found: u32::from_be_bytes(bytes[..4].try_into().unwrap()),
            expected: u32::from_be_bytes(*magic),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Unsupported(format!("checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    Ok((len, &bytes[HEADER..]))
}

fn expect_len(body: &[u8], want: usize, path: &Path) -> Result<()> {
    if body.len() != want {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            detail: format!("expected {want} body bytes, found {}", body.len()),
        });
    }
    Ok(())
}

pub fn write_params(path: &Path, params: &[f64]) -> Result<()> {
    let mut buf = header(PARAMS_MAGIC, params.len(), params.len() * 8);
    push_f64s(&mut buf, params);
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_params(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path)?;
    let (len, body) = open(&bytes, PARAMS_MAGIC, path)?;
    expect_len(body, len * 8, path)?;
    Ok(f64s(body))
}

/// Stores the eigenpairs of `spectrum`; residuals are not kept.
pub fn write_eigenvectors(path: &Path, spectrum: &Spectrum) -> Result<()> {
    let dim = spectrum.dim();
    let k = spectrum.len();
    let mut buf = header(VECTORS_MAGIC, dim, 8 + k * (dim + 1) * 8);
    buf.extend_from_slice(&(k as u64).to_le_bytes());
    push_f64s(&mut buf, &spectrum.lambdas());
    for p in &spectrum.pairs {
        push_f64s(&mut buf, &p.vector);
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_eigenvectors(path: &Path) -> Result<Vec<EigenPair>> {
    let bytes = fs::read(path)?;
    let (dim, body) = open(&bytes, VECTORS_MAGIC, path)?;
    if body.len() < 8 {
        return Err(Error::TruncatedFile {
            path: path.to_path_buf(),
            detail: "missing vector count".into(),
        });
    }
    let k = u64::from_le_bytes(body[..8].try_into().unwrap()) as usize;
    let body = &body[8..];
    expect_len(body, k * (dim + 1) * 8, path)?;
    let values = f64s(body);
    let (lambdas, vectors) = values.split_at(k);
    Ok(lambdas
        .iter()
        .zip(vectors.chunks_exact(dim.max(1)))
        .map(|(&lambda, v)| EigenPair {
            lambda,
            vector: v.to_vec(),
        })
        .collect())
}
