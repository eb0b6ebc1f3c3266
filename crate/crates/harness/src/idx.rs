//! Reader for the big-endian IDX format used by MNIST-style image archives.

use std::path::{Path, PathBuf};

use thiserror::Error;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum IdxError {
    #[error("{path}: cannot read file: {reason}")]
    Io { path: PathBuf, reason: String },

    #[error("{path}: bad magic 0x{found:08x}, expected 0x{expected:08x}")]
    BadMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated payload, need {expected} bytes after the header, found {found}")]
    TruncatedPayload {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("{path}: header ends after {found} bytes")]
    TruncatedHeader { path: PathBuf, found: usize },

    #[error("image file holds {images} samples but label file holds {labels}")]
    CountMismatch { images: usize, labels: usize },
}

/// Images flattened row-major with pixels scaled to `[0, 1]`, plus raw labels.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxSplit {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<f64>,
    pub labels: Vec<u8>,
}

impl IdxSplit {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.rows * self.cols
    }

    pub fn image(&self, i: usize) -> &[f64] {
        &self.pixels[i * self.dim()..(i + 1) * self.dim()]
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap())
}

/// Parses an IDX header with `ndims` dimensions and returns the sizes and payload.
fn parse<'a>(
    path: &Path,
    bytes: &'a [u8],
    magic: u32,
    ndims: usize,
) -> Result<(Vec<usize>, &'a [u8]), IdxError> {
    let header = 4 + 4 * ndims;
    if bytes.len() < 4 {
        return Err(IdxError::TruncatedHeader {
            path: path.into(),
            found: bytes.len(),
        });
    }
    let found = be_u32(bytes, 0);
    if found != magic {
        return Err(IdxError::BadMagic {
            path: path.into(),
            found,
            expected: magic,
        });
    }
    if bytes.len() < header {
        return Err(IdxError::TruncatedHeader {
            path: path.into(),
            found: bytes.len(),
        });
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|k| be_u32(bytes, 4 + 4 * k) as usize)
        .collect();
    let expected = dims.iter().product::<usize>();
    let payload = &bytes[header..];
    if payload.len() < expected {
        return Err(IdxError::TruncatedPayload {
            path: path.into(),
            expected,
            found: payload.len(),
        });
    }
    Ok((dims, &payload[..expected]))
}

pub fn parse_images(
    path: &Path,
    bytes: &[u8],
) -> Result<(usize, usize, usize, Vec<f64>), IdxError> {
    let (dims, payload) = parse(path, bytes, IMAGES_MAGIC, 3)?;
    Ok((
        dims[0],
        dims[1],
        dims[2],
        payload.iter().map(|&p| f64::from(p) / 255.0).collect(),
    ))
}

pub fn parse_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>, IdxError> {
    let (_, payload) = parse(path, bytes, LABELS_MAGIC, 1)?;
    Ok(payload.to_vec())
}

fn read(path: &Path) -> Result<Vec<u8>, IdxError> {
    std::fs::read(path).map_err(|e| IdxError::Io {
        path: path.into(),
        reason: e.to_string(),
    })
}

/// Loads an image file and its label file. Nothing is returned unless both parse
/// completely and agree on the sample count.
pub fn load_idx(images: &Path, labels: &Path) -> Result<IdxSplit, IdxError> {
    let (n, rows, cols, pixels) = parse_images(images, &read(images)?)?;
    let labels = parse_labels(labels, &read(labels)?)?;
    if labels.len() != n {
        return Err(IdxError::CountMismatch {
            images: n,
            labels: labels.len(),
        });
    }
    Ok(IdxSplit {
        rows,
        cols,
        pixels,
        labels,
    })
}

/// Serializes images and labels in IDX form (used by fixtures and converters).
pub fn encode_images(n: usize, rows: usize, cols: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + pixels.len());
    for v in [IMAGES_MAGIC, n as u32, rows as u32, cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

pub fn encode_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}
