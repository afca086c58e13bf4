//! Binary checkpoint layout:
//!
//! ```text
//! magic "TWINVAE\0" | u32 LE version | u64 LE header length | JSON header | f32 LE tensor data
//! ```
//!
//! The header lists every tensor with its name, shape and offset (in values)
//! into the data section. Buffers such as batch-norm running moments are
//! stored alongside the learnable weights.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::error::{io_at, Error, Result};

const MAGIC: &[u8; 8] = b"TWINVAE\0";
const VERSION: u32 = 1;

/// Position of a ChaCha stream, enough to resume it exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    /// Serialized as a decimal string; JSON numbers cannot hold a `u128`.
    #[serde(with = "decimal")]
    pub word_pos: u128,
}

mod decimal {
    use serde::{de::Error, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        String::deserialize(d)?.parse().map_err(D::Error::custom)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub rng: Option<RngState>,
    pub epoch: Option<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    #[serde(flatten)]
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

/// Writes atomically: the bytes go to a sibling temporary file that is then
/// renamed over `path`.
pub fn save_checkpoint(path: &Path, model: &ModelParams<f32>, meta: &CheckpointMeta) -> Result<()> {
    let mut offset = 0;
    let mut tensors = Vec::new();
    let params = model.params();
    for (_, p) in &params {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            offset,
        });
        offset += p.len();
    }
    let header = serde_json::to_vec(&Header {
        config: model.config.clone(),
        meta: meta.clone(),
        tensors,
    })?;
    let mut bytes = Vec::with_capacity(20 + header.len() + offset * 4);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for (_, p) in &params {
        for v in &p.value {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("checkpoint path {} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, len: usize, what: &str) -> Result<&'a [u8]> {
    let end = at
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::CheckpointTruncated(format!("{what} ends past byte {}", bytes.len())))?;
    let out = &bytes[*at..end];
    *at = end;
    Ok(out)
}

fn read(path: &Path) -> Result<(Header, Vec<f32>)> {
    let bytes = fs::read(path).map_err(io_at(path))?;
    let mut at = 0;
    let magic = take(&bytes, &mut at, 8, "magic")?;
    if magic != MAGIC {
        return Err(Error::InvalidInput(format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(take(&bytes, &mut at, 4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version.to_string(),
            expected: VERSION,
        });
    }
    let header_len = u64::from_le_bytes(take(&bytes, &mut at, 8, "header length")?.try_into().expect("8 bytes"));
    let header_len = usize::try_from(header_len)
        .map_err(|_| Error::CheckpointTruncated(format!("header length {header_len} is too large")))?;
    let header: Header = serde_json::from_slice(take(&bytes, &mut at, header_len, "header")?)?;
    let data = &bytes[at..];
    if data.len() % 4 != 0 {
        return Err(Error::CheckpointTruncated(format!(
            "data section has {} bytes, not a multiple of 4",
            data.len()
        )));
    }
    let values = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((header, values))
}

fn fill(model: &mut ModelParams<f32>, header: &Header, values: &[f32]) -> Result<()> {
    let mut params = model.params_mut();
    if params.len() != header.tensors.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} tensors, architecture has {}",
            header.tensors.len(),
            params.len()
        )));
    }
    for ((_, p), entry) in params.iter_mut().zip(&header.tensors) {
        if p.name != entry.name {
            return Err(Error::Shape(format!("expected tensor `{}`, found `{}`", p.name, entry.name)));
        }
        if p.shape != entry.shape {
            return Err(Error::TensorShape {
                name: entry.name.clone(),
                expected: p.shape.clone(),
                found: entry.shape.clone(),
            });
        }
        let src = values.get(entry.offset..entry.offset + p.len()).ok_or_else(|| {
            Error::CheckpointTruncated(format!("tensor `{}` extends past the data section", entry.name))
        })?;
        p.value.copy_from_slice(src);
    }
    Ok(())
}

/// Loads a checkpoint with the architecture recorded in its header.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams<f32>, CheckpointMeta)> {
    let (header, values) = read(path)?;
    let mut model = ModelParams::zeroed(&header.config)?;
    fill(&mut model, &header, &values)?;
    Ok((model, header.meta))
}

/// Loads a checkpoint into the architecture described by `config`, failing
/// on the first tensor whose shape does not match.
pub fn load_checkpoint_into(path: &Path, config: &ModelConfig) -> Result<(ModelParams<f32>, CheckpointMeta)> {
    let (header, values) = read(path)?;
    let mut model = ModelParams::zeroed(config)?;
    fill(&mut model, &header, &values)?;
    Ok((model, header.meta))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            channel_scale: 0.125,
            latent_dim: 8,
            ..Default::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = ModelParams::<f32>::init(&tiny(), 5).unwrap();
        model.shared.norm.running_mean.value[0] = 0.25;
        let meta = CheckpointMeta {
            rng: Some(RngState {
                seed: 7,
                stream: 2,
                word_pos: 1 << 70,
            }),
            epoch: Some(12),
        };
        save_checkpoint(&path, &model, &meta).unwrap();
        let (back, meta_back) = load_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(meta_back, meta);
    }

    #[test]
    fn wrong_version_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = ModelParams::<f32>::init(&tiny(), 5).unwrap();
        save_checkpoint(&path, &model, &CheckpointMeta::default()).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
        fs::write(&path, bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointVersion { .. })));
    }

    #[test]
    fn truncated_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = ModelParams::<f32>::init(&tiny(), 5).unwrap();
        save_checkpoint(&path, &model, &CheckpointMeta::default()).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::CheckpointTruncated(_))));
    }

    #[test]
    fn mismatched_architecture_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = ModelParams::<f32>::init(&tiny(), 5).unwrap();
        save_checkpoint(&path, &model, &CheckpointMeta::default()).unwrap();
        let other = ModelConfig {
            channel_scale: 0.25,
            ..tiny()
        };
        match load_checkpoint_into(&path, &other) {
            Err(Error::TensorShape { name, .. }) => assert_eq!(name, "nat.encoder.0.weight"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
