//! `FARC` feature archives: per-image feature maps and logits exported from an
//! external classifier.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "FARC" | u8 version = 1 | u32 record count | u32 N (logits per record)
//! per record: u32 label | N × f32 logits | u32 H | u32 W | u32 D | H·W·D × f32 features (h, w, d)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::{read_file, write_file, ByteReader, ByteWriter};
use crate::tensor::FeatureMap;

const FARC_MAGIC: &[u8; 4] = b"FARC";
const FARC_VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FarcRecord {
    pub label: u32,
    pub logits: Vec<f32>,
    pub height: usize,
    pub width: usize,
    pub depth: usize,
    pub features: Vec<f32>,
}

impl FarcRecord {
    pub fn feature_map(&self) -> FeatureMap {
        FeatureMap::new(
            self.height,
            self.width,
            self.depth,
            self.features.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("validated on read")
    }

    pub fn logits_f64(&self) -> Vec<f64> {
        self.logits.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FarcArchive {
    pub num_logits: usize,
    pub records: Vec<FarcRecord>,
}

impl FarcArchive {
    pub fn new(num_logits: usize, records: Vec<FarcRecord>) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            if r.logits.len() != num_logits {
                return Err(Error::dim(format!(
                    "record {i}: {} logits, expected {num_logits}",
                    r.logits.len()
                )));
            }
            if r.features.len() != r.height * r.width * r.depth {
                return Err(Error::dim(format!(
                    "record {i}: feature length does not match H·W·D"
                )));
            }
        }
        Ok(Self {
            num_logits,
            records,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = ByteWriter::new(FARC_MAGIC, FARC_VERSION);
        w.count(self.records.len())?;
        w.count(self.num_logits)?;
        for r in &self.records {
            w.u32(r.label);
            r.logits.iter().for_each(|&v| w.f32(v));
            w.count(r.height)?;
            w.count(r.width)?;
            w.count(r.depth)?;
            r.features.iter().for_each(|&v| w.f32(v));
        }
        Ok(w.finish())
    }

    /// Parses and validates framing and finiteness. Errors carry the byte
    /// offset of the first violation.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::open(bytes, "FARC", FARC_MAGIC, FARC_VERSION)?;
        let count = r.count()?;
        let n = r.count()?;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for idx in 0..count {
            let label = r.u32()?;
            let logits = read_finite_f32s(&mut r, n, idx, "logit")?;
            let height = r.count()?;
            let width = r.count()?;
            let depth = r.count()?;
            let len = height
                .checked_mul(width)
                .and_then(|v| v.checked_mul(depth))
                .ok_or_else(|| r.error(format!("record {idx}: feature size overflows")))?;
            let features = read_finite_f32s(&mut r, len, idx, "feature")?;
            records.push(FarcRecord {
                label,
                logits,
                height,
                width,
                depth,
                features,
            });
        }
        r.expect_end()?;
        Ok(Self {
            num_logits: n,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&read_file(path)?)
    }

    pub fn feature_maps(&self) -> Vec<FeatureMap> {
        self.records.iter().map(FarcRecord::feature_map).collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label as usize).collect()
    }
}

fn read_finite_f32s(r: &mut ByteReader<'_>, n: usize, idx: usize, what: &str) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let at = r.offset() as usize;
        let v = r.f32()?;
        if !v.is_finite() {
            return Err(r.error_at(at, format!("record {idx}: non-finite {what}")));
        }
        out.push(v);
    }
    Ok(out)
}
