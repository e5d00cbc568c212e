//! Embedding bank persistence.
//!
//! A bank is a fixed-stride little-endian binary file plus a JSON manifest
//! sidecar stored next to it with a `.manifest` suffix.
//!
//! ```text
//! header (24 bytes)
//!   0..4    magic  "MPAB"
//!   4..8    version u32 = 1
//!   8..12   dim u32 >= 1
//!   12      dtype u8 = 1 (binary32)
//!   13..16  zero padding
//!   16..24  record_count u64
//! record (12 + 4 * dim bytes)
//!   0..4    class_id u32
//!   4..8    item_id u32
//!   8..10   view_id u16
//!   10      modality u8 (0 raw, 1 natural, 2 geometric, 3 semantic, 4 uncertain)
//!   11      reserved u8 = 0
//!   12..    dim x f32
//! ```

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{MpaError, Result};
use crate::model::{EmbeddingVector, LabeledEmbedding, Modality};

pub const MAGIC: [u8; 4] = *b"MPAB";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
pub const HEADER_LEN: usize = 24;
pub const RECORD_PREFIX_LEN: usize = 12;
pub const MANIFEST_SUFFIX: &str = ".manifest";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BankHeader {
    pub dim: u32,
    pub record_count: u64,
}

impl BankHeader {
    pub fn record_len(&self) -> usize {
        record_len(self.dim as usize)
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut out = [0u8; HEADER_LEN];
        out[0..4].copy_from_slice(&MAGIC);
        LittleEndian::write_u32(&mut out[4..8], VERSION);
        LittleEndian::write_u32(&mut out[8..12], self.dim);
        out[12] = DTYPE_F32;
        LittleEndian::write_u64(&mut out[16..24], self.record_count);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(format_err(format!(
                "file is {} bytes, shorter than the {HEADER_LEN}-byte header",
                bytes.len()
            )));
        }
        if bytes[0..4] != MAGIC {
            return Err(format_err(format!("bad magic {:?}", &bytes[0..4])));
        }
        let version = LittleEndian::read_u32(&bytes[4..8]);
        if version != VERSION {
            return Err(format_err(format!("unsupported version {version}")));
        }
        let dim = LittleEndian::read_u32(&bytes[8..12]);
        if dim == 0 {
            return Err(format_err("dim must be at least 1".into()));
        }
        if bytes[12] != DTYPE_F32 {
            return Err(format_err(format!("unsupported dtype code {}", bytes[12])));
        }
        if bytes[13..16] != [0, 0, 0] {
            return Err(format_err("non-zero header padding".into()));
        }
        let record_count = LittleEndian::read_u64(&bytes[16..24]);
        Ok(Self { dim, record_count })
    }
}

pub fn record_len(dim: usize) -> usize {
    RECORD_PREFIX_LEN + 4 * dim
}

fn format_err(msg: String) -> MpaError {
    MpaError::Format(msg)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_name: String,
    pub encoder_id: String,
    pub class_names: BTreeMap<u32, String>,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| format_err(format!("manifest: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn class_name(&self, class_id: u32) -> Result<&str> {
        self.class_names
            .get(&class_id)
            .map(String::as_str)
            .ok_or_else(|| format_err(format!("manifest has no name for class {class_id}")))
    }

    /// Every class present in `records` must be named.
    pub fn check_covers(&self, records: &[LabeledEmbedding]) -> Result<()> {
        let mut seen = HashSet::new();
        for r in records {
            if seen.insert(r.class_id) {
                self.class_name(r.class_id)?;
            }
        }
        Ok(())
    }
}

pub fn manifest_path(bank_path: &Path) -> PathBuf {
    let mut s = bank_path.as_os_str().to_owned();
    s.push(MANIFEST_SUFFIX);
    PathBuf::from(s)
}

/// Checks non-emptiness, uniform dim and key uniqueness; returns the dim.
pub fn validate_records(records: &[LabeledEmbedding]) -> Result<usize> {
    let first = records.first().ok_or(MpaError::EmptyInput("bank records"))?;
    let dim = first.vector.dim();
    let mut keys = HashSet::with_capacity(records.len());
    for r in records {
        if r.vector.dim() != dim {
            return Err(MpaError::DimMismatch {
                expected: dim,
                got: r.vector.dim(),
            });
        }
        if !keys.insert(r.key()) {
            return Err(MpaError::DuplicateRecord {
                class_id: r.class_id,
                item_id: r.item_id,
                view_id: r.view_id,
                modality: r.modality.code(),
            });
        }
    }
    Ok(dim)
}

pub fn encode_bank(records: &[LabeledEmbedding]) -> Result<Vec<u8>> {
    let dim = validate_records(records)?;
    let dim_u32 = u32::try_from(dim)
        .map_err(|_| MpaError::InvalidConfig(format!("dim {dim} does not fit in u32")))?;
    let header = BankHeader {
        dim: dim_u32,
        record_count: records.len() as u64,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + records.len() * record_len(dim));
    out.extend_from_slice(&header.encode());
    for r in records {
        write_record(&mut out, r)?;
    }
    Ok(out)
}

fn write_record<W: Write>(w: &mut W, r: &LabeledEmbedding) -> Result<()> {
    w.write_u32::<LittleEndian>(r.class_id)?;
    w.write_u32::<LittleEndian>(r.item_id)?;
    w.write_u16::<LittleEndian>(r.view_id)?;
    w.write_u8(r.modality.code())?;
    w.write_u8(0)?;
    for &v in r.vector.as_slice() {
        let v32 = v as f32;
        if !v32.is_finite() {
            return Err(MpaError::Format(format!(
                "value {v} overflows binary32 storage"
            )));
        }
        w.write_f32::<LittleEndian>(v32)?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodedBank {
    pub dim: usize,
    pub records: Vec<LabeledEmbedding>,
}

/// Parses a complete bank image. Never panics on malformed input.
pub fn decode_bank(bytes: &[u8]) -> Result<DecodedBank> {
    let header = BankHeader::decode(bytes)?;
    let dim = header.dim as usize;
    let stride = header.record_len();
    let body = &bytes[HEADER_LEN..];
    let expected = (header.record_count as u128) * (stride as u128);
    if expected != body.len() as u128 {
        return Err(format_err(format!(
            "header declares {} records of {stride} bytes ({expected} bytes) but body has {} bytes",
            header.record_count,
            body.len()
        )));
    }
    let mut records = Vec::with_capacity(header.record_count as usize);
    let mut keys = HashSet::with_capacity(header.record_count as usize);
    for (index, chunk) in body.chunks_exact(stride).enumerate() {
        let class_id = LittleEndian::read_u32(&chunk[0..4]);
        let item_id = LittleEndian::read_u32(&chunk[4..8]);
        let view_id = LittleEndian::read_u16(&chunk[8..10]);
        let modality = Modality::from_code(chunk[10]).ok_or_else(|| {
            format_err(format!("record {index}: bad modality code {}", chunk[10]))
        })?;
        if chunk[11] != 0 {
            return Err(format_err(format!("record {index}: reserved byte is non-zero")));
        }
        let mut values = vec![0f32; dim];
        LittleEndian::read_f32_into(&chunk[RECORD_PREFIX_LEN..], &mut values);
        let vector = EmbeddingVector::from_f32(&values)
            .map_err(|e| format_err(format!("record {index}: {e}")))?;
        let record = LabeledEmbedding {
            class_id,
            item_id,
            view_id,
            modality,
            vector,
        };
        if !keys.insert(record.key()) {
            return Err(format_err(format!("record {index}: duplicate key {:?}", record.key())));
        }
        records.push(record);
    }
    Ok(DecodedBank { dim, records })
}

pub fn write_bank(records: &[LabeledEmbedding], manifest: &Manifest, path: &Path) -> Result<()> {
    manifest.check_covers(records)?;
    let bytes = encode_bank(records)?;
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&bytes)?;
    w.flush()?;
    fs::write(manifest_path(path), manifest.to_json())?;
    Ok(())
}

fn with_path(e: std::io::Error, path: &Path) -> MpaError {
    MpaError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn read_bank(path: &Path) -> Result<(Vec<LabeledEmbedding>, Manifest)> {
    let bytes = fs::read(path).map_err(|e| with_path(e, path))?;
    let decoded = decode_bank(&bytes)?;
    let mpath = manifest_path(path);
    let text = fs::read_to_string(&mpath)
        .map_err(|e| format_err(format!("cannot read manifest {}: {e}", mpath.display())))?;
    let manifest = Manifest::from_json(&text)?;
    manifest.check_covers(&decoded.records)?;
    Ok((decoded.records, manifest))
}

/// Header-only read, for inspection of large banks.
pub fn read_header(path: &Path) -> Result<BankHeader> {
    use std::io::Read;
    let mut buf = [0u8; HEADER_LEN];
    let mut f = fs::File::open(path).map_err(|e| with_path(e, path))?;
    f.read_exact(&mut buf)
        .map_err(|_| format_err("file shorter than header".into()))?;
    BankHeader::decode(&buf)
}
