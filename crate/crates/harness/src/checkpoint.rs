//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TVCK" | u32 version | u32 n + n bytes model summary (JSON)
//!        | u32 blocks | per block: u32 n + name, u8 kind, u32 rows, u32 cols
//!        | u64 count | count × f32 payload | u32 CRC-32 of the payload bytes
//! ```

use std::io::Write;
use std::path::{Path, PathBuf};

use taskmerge_core::model::{ModelSpec, ParamKind, ParamVector, ShapeEntry, ShapeMap};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"TVCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("not a checkpoint: magic {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("unsupported checkpoint version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("payload checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub theta: ParamVector,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(model: &ModelSpec, theta: &ParamVector) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 4 * theta.len());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_str(
        &mut out,
        &serde_json::to_string(model).expect("model spec serializes"),
    );
    let entries = theta.shapes().entries();
    put_u32(&mut out, entries.len() as u32);
    for e in entries {
        put_str(&mut out, &e.name);
        out.push(match e.kind {
            ParamKind::Weight => 0,
            ParamKind::Bias => 1,
        });
        put_u32(&mut out, e.rows as u32);
        put_u32(&mut out, e.cols as u32);
    }
    out.extend_from_slice(&(theta.len() as u64).to_le_bytes());
    let start = out.len();
    for &v in theta.values() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let crc = crc32fast::hash(&out[start..]);
    put_u32(&mut out, crc);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.at < n {
            return Err(CheckpointError::Malformed(format!(
                "file ends inside {what}"
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn string(&mut self, what: &str) -> Result<String, CheckpointError> {
        let n = self.u32(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { bytes, at: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            found: version,
            expected: VERSION,
        });
    }
    let summary = r.string("model summary")?;
    let model: ModelSpec = serde_json::from_str(&summary)
        .map_err(|e| CheckpointError::Malformed(format!("model summary: {e}")))?;
    let blocks = r.u32("block count")?;
    let mut entries = Vec::with_capacity(blocks.min(1024) as usize);
    for _ in 0..blocks {
        let name = r.string("block name")?;
        let kind = match r.take(1, "block kind")?[0] {
            0 => ParamKind::Weight,
            1 => ParamKind::Bias,
            k => return Err(CheckpointError::Malformed(format!("block kind {k}"))),
        };
        let rows = r.u32("block rows")? as usize;
        let cols = r.u32("block cols")? as usize;
        entries.push(ShapeEntry {
            name,
            kind,
            rows,
            cols,
        });
    }
    let shapes = ShapeMap::new(entries);
    let count = u64::from_le_bytes(r.take(8, "payload length")?.try_into().unwrap()) as usize;
    if count != shapes.total() {
        return Err(CheckpointError::Malformed(format!(
            "payload of {count} values for a layout of {}",
            shapes.total()
        )));
    }
    if model.shape_map().entries() != shapes.entries() {
        return Err(CheckpointError::Malformed(
            "block layout disagrees with the model summary".into(),
        ));
    }
    let payload = r.take(
        count
            .checked_mul(4)
            .ok_or_else(|| CheckpointError::Malformed("payload size".into()))?,
        "payload",
    )?;
    let stored = r.u32("checksum")?;
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    if r.at != bytes.len() {
        return Err(CheckpointError::Malformed(format!(
            "{} trailing bytes",
            bytes.len() - r.at
        )));
    }
    let values = payload
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes(b.try_into().unwrap())))
        .collect();
    let theta =
        ParamVector::new(shapes, values).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok(Checkpoint { model, theta })
}

pub fn save_checkpoint(
    model: &ModelSpec,
    theta: &ParamVector,
    path: &Path,
) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.into(),
        source,
    };
    if model.shape_map().entries() != theta.shapes().entries() {
        return Err(CheckpointError::Malformed(
            "parameters do not match the model layout".into(),
        ));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut f = std::fs::File::create(path).map_err(io)?;
    f.write_all(&encode(model, theta)).map_err(io)?;
    f.sync_all().map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.into(),
        source,
    })?;
    decode(&bytes)
}
