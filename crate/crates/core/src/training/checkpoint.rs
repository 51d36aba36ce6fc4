//! Single-file archive of named `f64` arrays plus a JSON metadata document.
//!
//! Layout (little endian): magic, `u32` version, `u64` metadata length, metadata,
//! `u32` array count, then per array `u32` name length, name, `u32` rows,
//! `u32` cols, values; finally a SHA-256 digest of everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::AdamWConfig;
use crate::adapter::AdapterConfig;
use crate::backbone::{BackboneConfig, Regime};
use crate::data::Task;
use crate::error::{Error, Result};
use crate::model::Segmenter;
use crate::prompt::PromptConfig;

pub const MAGIC: &[u8; 8] = b"SPCKPT\0\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub backbone: BackboneConfig,
    pub adapter: Option<AdapterConfig>,
    pub prompt: Option<PromptConfig>,
    pub task: Option<Task>,
    pub regime: Option<Regime>,
    pub epoch: usize,
    pub seed: u64,
    pub optimizer: Option<AdamWConfig>,
}

impl CheckpointMeta {
    pub fn for_model(model: &Segmenter) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            backbone: model.backbone.config.clone(),
            adapter: model.adapters.as_ref().map(|a| AdapterConfig {
                mode: a.mode(),
                hidden_dim: Some(a.stages()[0].tune.output_dim()),
                shared_dim: match a.mode() {
                    crate::adapter::AdapterMode::SharedSingle => Some(a.stages()[0].out_dim()),
                    crate::adapter::AdapterMode::PerStage => None,
                },
            }),
            prompt: model.prompt.as_ref().map(|p| p.config.clone()),
            task: None,
            regime: None,
            epoch: 0,
            seed: 0,
            optimizer: None,
        }
    }
}

pub fn encode_checkpoint(model: &Segmenter, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&meta.format_version.to_le_bytes());
    let json = serde_json::to_vec(meta)?;
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let arrays = model.named_arrays();
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, a) in &arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(a.nrows() as u32).to_le_bytes());
        out.extend_from_slice(&(a.ncols() as u32).to_le_bytes());
        for v in a.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn save_checkpoint(path: &Path, model: &Segmenter, meta: &CheckpointMeta) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_checkpoint(model, meta)?)?;
    Ok(())
}

struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::CorruptCheckpoint("unexpected end of archive".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Metadata and raw arrays of an archive, after integrity and version checks.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointMeta, BTreeMap<String, Array2<f64>>)> {
    if bytes.len() < MAGIC.len() + 4 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::CorruptCheckpoint("not a checkpoint archive".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::CorruptCheckpoint(
            "digest mismatch (truncated or modified)".into(),
        ));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let meta_len = usize::try_from(r.u64()?)
        .map_err(|_| Error::CorruptCheckpoint("metadata length overflow".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::CorruptCheckpoint(format!("metadata: {e}")))?;
    let count = r.u32()?;
    let mut arrays = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::CorruptCheckpoint("non-UTF-8 array name".into()))?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows * cols * 8)?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let a = Array2::from_shape_vec((rows, cols), values).expect("length checked");
        arrays.insert(name, a);
    }
    if r.pos != body.len() {
        return Err(Error::CorruptCheckpoint("trailing bytes".into()));
    }
    Ok((meta, arrays))
}

pub fn load_checkpoint(path: &Path) -> Result<(Segmenter, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    let (meta, arrays) = decode_checkpoint(&bytes)?;
    let prompt = meta.prompt.clone().unwrap_or_default();
    let mut model = Segmenter::new(
        meta.backbone.clone(),
        meta.adapter.as_ref(),
        &prompt,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    let expected = model.parameter_names();
    if let Some(extra) = arrays.keys().find(|k| !expected.contains(k)) {
        return Err(Error::CorruptCheckpoint(format!(
            "unexpected parameter `{extra}`"
        )));
    }
    model.load_arrays(&arrays)?;
    Ok((model, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn model() -> Segmenter {
        let cfg = BackboneConfig {
            patch: 2,
            channels: 3,
            stage_depths: [1, 0, 1, 0],
            stage_dims: [4, 8, 12, 16],
            heads: [1, 2, 2, 4],
            mlp_ratio: 2,
            decoder_dim: 4,
            resolution: (16, 16),
        };
        Segmenter::new(
            cfg,
            Some(&AdapterConfig::default()),
            &PromptConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = model();
        let meta = CheckpointMeta::for_model(&m);
        let a = dir.path().join("a.ckpt");
        save_checkpoint(&a, &m, &meta).unwrap();
        let (loaded, meta2) = load_checkpoint(&a).unwrap();
        assert_eq!(loaded, m);
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&b, &loaded, &meta2).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn truncated_and_versioned_archives_fail() {
        let m = model();
        let bytes = encode_checkpoint(&m, &CheckpointMeta::for_model(&m)).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        assert!(matches!(
            decode_checkpoint(cut),
            Err(Error::CorruptCheckpoint(_))
        ));

        let mut meta = CheckpointMeta::for_model(&m);
        meta.format_version = 7;
        let bytes = encode_checkpoint(&m, &meta).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(Error::VersionMismatch {
                found: 7,
                expected: 1
            })
        ));
    }
}
