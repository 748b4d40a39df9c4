//! Versioned little-endian model file.
//!
//! Layout: magic `SPEQCLF\0`, format version (u32), char n-gram range
//! (2 x u32), word n-gram range (2 x u32), hash_dim (u32), pair-feature mask
//! (u32), decision threshold (f64), weight count (u64), weights (f64 each,
//! bias last).

use std::fs;
use std::io::Write;
use std::path::Path;

use thiserror::Error;

use super::features::FeatureConfig;
use super::ClassifierModel;

pub const MODEL_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SPEQCLF\0";

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("model file I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a classifier model file")]
    BadMagic,
    #[error("model format version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("model file is truncated")]
    Truncated,
    #[error("model file is corrupt: {0}")]
    Corrupt(String),
}

pub fn encode_model(model: &ClassifierModel) -> Vec<u8> {
    let c = &model.feature_config;
    let mut out = Vec::with_capacity(48 + model.theta.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    for v in [c.char_ngram_range.0, c.char_ngram_range.1, c.word_ngram_range.0, c.word_ngram_range.1, c.hash_dim] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&c.feature_mask().to_le_bytes());
    out.extend_from_slice(&model.decision_threshold.to_le_bytes());
    out.extend_from_slice(&(model.theta.len() as u64).to_le_bytes());
    for w in &model.theta {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        if self.0.len() < n {
            return Err(ModelIoError::Truncated);
        }
        let (head, rest) = self.0.split_at(n);
        self.0 = rest;
        Ok(head)
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ModelIoError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ModelIoError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ClassifierModel, ModelIoError> {
    let mut r = Reader(bytes);
    if r.take(MAGIC.len()).map_err(|_| ModelIoError::BadMagic)? != MAGIC {
        return Err(ModelIoError::BadMagic);
    }
    let version = r.u32()?;
    if version != MODEL_FORMAT_VERSION {
        return Err(ModelIoError::VersionMismatch { expected: MODEL_FORMAT_VERSION, found: version });
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let mask = r.u32()?;
    let feature_config = FeatureConfig {
        char_ngram_range: (dims[0], dims[1]),
        word_ngram_range: (dims[2], dims[3]),
        hash_dim: dims[4],
        pair_features: FeatureConfig::from_mask(mask),
    };
    feature_config.validate().map_err(ModelIoError::Corrupt)?;
    let decision_threshold = r.f64()?;
    if !(0.0..=1.0).contains(&decision_threshold) {
        return Err(ModelIoError::Corrupt(format!("decision threshold {decision_threshold} outside [0, 1]")));
    }
    let len = r.u64()? as usize;
    if len != feature_config.hash_dim + 1 {
        return Err(ModelIoError::Corrupt(format!(
            "weight count {len} does not match hash_dim {} + 1",
            feature_config.hash_dim
        )));
    }
    let raw = r.take(len.checked_mul(8).ok_or(ModelIoError::Truncated)?)?;
    if !r.0.is_empty() {
        return Err(ModelIoError::Corrupt(format!("{} trailing bytes", r.0.len())));
    }
    let theta: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    if let Some(i) = theta.iter().position(|w| !w.is_finite()) {
        return Err(ModelIoError::Corrupt(format!("non-finite weight at index {i}")));
    }
    Ok(ClassifierModel { theta, feature_config, decision_threshold, version })
}

/// Writes to a sibling temp file and renames it into place.
pub fn save_model(model: &ClassifierModel, path: &Path) -> Result<(), ModelIoError> {
    let bytes = encode_model(model);
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("model");
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<ClassifierModel, ModelIoError> {
    decode_model(&fs::read(path)?)
}
