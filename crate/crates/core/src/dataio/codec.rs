//! The UGGF feature file.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "UGGF"
//! 4       4     version (u32)
//! 8       4     num_samples (u32)
//! 12      4     n, local tokens per modality (u32)
//! 16      4     D (u32)
//! 20      4     modality_count (u32, always 3)
//! 24      8     label_table_offset (u64)
//! 32      ...   payload: f32, sample-major, modalities R,N,T, token-major
//! offset  ...   label table: per sample u64 id, u32 identity, u8 split
//! ```
//!
//! All integers and floats are little-endian.

use std::fmt::Write as _;
use std::path::Path;

use super::{Dataset, Sample, Split};
use crate::error::{Error, Result};
use crate::lock::{write_atomic, LockGuard};
use crate::modality::NUM_MODALITIES;
use crate::numerics::Matrix;

pub const MAGIC: [u8; 4] = *b"UGGF";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: u64 = 32;
const LABEL_ENTRY_LEN: u64 = 13;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub version: u32,
    pub num_samples: u32,
    pub n: u32,
    pub d: u32,
    pub modality_count: u32,
    pub label_table_offset: u64,
}

impl FeatureFileHeader {
    fn payload_len(&self) -> u64 {
        self.num_samples as u64
            * self.modality_count as u64
            * (self.n as u64 + 1)
            * self.d as u64
            * 4
    }

    fn file_len(&self) -> u64 {
        self.label_table_offset + self.num_samples as u64 * LABEL_ENTRY_LEN
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Shape(format!("{what} = {v} exceeds u32")))
}

pub fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut header = FeatureFileHeader {
        version: VERSION,
        num_samples: to_u32(ds.len(), "num_samples")?,
        n: to_u32(ds.n, "n")?,
        d: to_u32(ds.d, "D")?,
        modality_count: NUM_MODALITIES as u32,
        label_table_offset: 0,
    };
    header.label_table_offset = HEADER_LEN + header.payload_len();
    let mut buf = Vec::with_capacity(header.file_len() as usize);
    buf.extend_from_slice(&MAGIC);
    for v in [
        header.version,
        header.num_samples,
        header.n,
        header.d,
        header.modality_count,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&header.label_table_offset.to_le_bytes());
    for s in &ds.samples {
        for t in &s.tokens {
            for &v in t.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    for s in &ds.samples {
        buf.extend_from_slice(&s.id.to_le_bytes());
        buf.extend_from_slice(&to_u32(s.label, "identity")?.to_le_bytes());
        buf.push(s.split.code());
    }
    Ok(buf)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn u64_at(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let actual = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            path: path.into(),
            needed: HEADER_LEN,
            actual,
        });
    }
    let found: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(Error::BadMagic {
            path: path.into(),
            expected: MAGIC,
            found,
        });
    }
    if actual < HEADER_LEN {
        return Err(Error::Truncated {
            path: path.into(),
            needed: HEADER_LEN,
            actual,
        });
    }
    let header = FeatureFileHeader {
        version: u32_at(bytes, 4),
        num_samples: u32_at(bytes, 8),
        n: u32_at(bytes, 12),
        d: u32_at(bytes, 16),
        modality_count: u32_at(bytes, 20),
        label_table_offset: u64_at(bytes, 24),
    };
    if header.version != VERSION {
        return Err(Error::VersionMismatch {
            path: path.into(),
            expected: VERSION,
            found: header.version,
        });
    }
    let malformed = |reason: String| Error::Malformed {
        path: path.into(),
        reason,
    };
    if header.modality_count != NUM_MODALITIES as u32 {
        return Err(malformed(format!(
            "modality_count {} (expected {NUM_MODALITIES})",
            header.modality_count
        )));
    }
    if header.label_table_offset != HEADER_LEN + header.payload_len() {
        return Err(malformed(format!(
            "label table offset {} does not follow a payload of {} bytes",
            header.label_table_offset,
            header.payload_len()
        )));
    }
    let needed = header.file_len();
    if actual < needed {
        return Err(Error::Truncated {
            path: path.into(),
            needed,
            actual,
        });
    }
    if actual > needed {
        return Err(malformed(format!("{} trailing bytes", actual - needed)));
    }
    let (n, d) = (header.n as usize, header.d as usize);
    let per_modality = (n + 1) * d;
    let mut floats = bytes[HEADER_LEN as usize..header.label_table_offset as usize]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64);
    let mut labels = &bytes[header.label_table_offset as usize..];
    let mut samples = Vec::with_capacity(header.num_samples as usize);
    for _ in 0..header.num_samples {
        let tokens: [Matrix; NUM_MODALITIES] = std::array::from_fn(|_| {
            let data: Vec<f64> = floats.by_ref().take(per_modality).collect();
            Matrix::from_vec(n + 1, d, data).expect("payload length checked")
        });
        let id = u64_at(labels, 0);
        let label = u32_at(labels, 8) as usize;
        let split = Split::from_code(labels[12])
            .ok_or_else(|| malformed(format!("sample {id}: split code {}", labels[12])))?;
        labels = &labels[LABEL_ENTRY_LEN as usize..];
        samples.push(Sample {
            id,
            label,
            split,
            tokens,
        });
    }
    Dataset::new(n, d, samples).map_err(|e| malformed(e.to_string()))
}

/// Writes `ds` under an exclusive `<path>.lock`, replacing any existing file.
pub fn write_features(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode(ds)?;
    let _lock = LockGuard::for_file(path)?;
    write_atomic(path, &bytes)
}

pub fn read_features(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Manifest CSV: `sample_id,identity,split,camera`. The camera column is
/// reserved and left empty.
pub fn manifest_csv(ds: &Dataset) -> String {
    let mut out = String::from("sample_id,identity,split,camera\n");
    for s in &ds.samples {
        let _ = writeln!(out, "{},{},{},", s.id, s.label, s.split);
    }
    out
}

pub fn write_manifest(ds: &Dataset, path: &Path) -> Result<()> {
    write_atomic(path, manifest_csv(ds).as_bytes())
}
