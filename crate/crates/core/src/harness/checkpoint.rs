//! Parameter checkpoints: a checksummed binary blob plus a JSON sidecar.
//!
//! Blob layout: magic `LARESCKP`, format version (u32 LE), header length
//! (u64 LE), JSON header, every tensor as row-major f64 LE in layout order,
//! then the SHA-256 of all preceding bytes.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use super::io::write_atomic;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::reasoner::{ArchitectureConfig, ModelParameters};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LARESCKP";
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Spt,
    Rpt,
}

/// Identity of the checkpoint an RPT run was anchored to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lineage {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub stage: Stage,
    pub config_hash: String,
    pub epoch: usize,
    pub valid_metrics: Map<String, Value>,
    pub blob_sha256: String,
    pub reference: Option<Lineage>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ArchitectureConfig,
    num_items: usize,
    tensors: Vec<(String, [usize; 2])>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `<stem>.json` next to the blob.
pub fn sidecar_path(blob: impl AsRef<Path>) -> PathBuf {
    blob.as_ref().with_extension("json")
}

pub fn encode(params: &ModelParameters) -> Vec<u8> {
    let header = Header {
        config: params.config.clone(),
        num_items: params.num_items,
        tensors: params.iter().map(|(n, t)| (n.to_string(), [t.nrows(), t.ncols()])).collect(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(20 + header.len() + params.num_scalars() * 8 + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in params.iter() {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn shape_summary(cfg: &ArchitectureConfig, num_items: usize) -> String {
    format!(
        "num_items={num_items} embed_dim={} ffn_dim={} heads={} pre_layers={} core_layers={} max_len={} aggregation={:?} backbones={:?}/{:?}",
        cfg.embed_dim,
        cfg.ffn_dim,
        cfg.heads,
        cfg.pre_layers,
        cfg.core_layers,
        cfg.max_len,
        cfg.aggregation,
        cfg.pre_backbone,
        cfg.core_backbone
    )
}

/// Decodes a blob; `expected` names the shape the caller needs.
pub fn decode(bytes: &[u8], expected: Option<(&ArchitectureConfig, usize)>) -> Result<ModelParameters> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 20 + DIGEST_LEN || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, expected {FORMAT_VERSION}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch (truncated or corrupt file)"));
    }
    let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
    let header_end = 20usize.checked_add(header_len).filter(|&e| e <= body.len()).ok_or_else(|| bad("bad header length"))?;
    let header: Header = serde_json::from_slice(&body[20..header_end])?;
    if let Some((cfg, n)) = expected {
        let want_shapes: Vec<(String, [usize; 2])> =
            ModelParameters::shapes(cfg, n).into_iter().map(|(name, (r, c))| (name, [r, c])).collect();
        if want_shapes != header.tensors {
            return Err(Error::ShapeMismatch {
                expected: shape_summary(cfg, n),
                found: shape_summary(&header.config, header.num_items),
            });
        }
    }
    let mut data = &body[header_end..];
    let mut named = Vec::with_capacity(header.tensors.len());
    for (name, [r, c]) in header.tensors {
        let len = r.checked_mul(c).and_then(|n| n.checked_mul(8)).ok_or_else(|| bad("bad tensor shape"))?;
        if data.len() < len {
            return Err(bad("tensor data shorter than header"));
        }
        let (chunk, rest) = data.split_at(len);
        let values = chunk.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        named.push((name, Tensor::from_shape_vec((r, c), values).map_err(|e| bad(&e.to_string()))?));
        data = rest;
    }
    if !data.is_empty() {
        return Err(bad("trailing bytes after tensor data"));
    }
    ModelParameters::from_named(&header.config, header.num_items, named)
}

pub fn blob_sha256(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Writes blob and sidecar atomically; returns the sidecar as written.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParameters,
    stage: Stage,
    config_hash: &str,
    epoch: usize,
    valid_metrics: Map<String, Value>,
    reference: Option<Lineage>,
) -> Result<CheckpointMeta> {
    let path = path.as_ref();
    let bytes = encode(params);
    let meta = CheckpointMeta {
        format_version: FORMAT_VERSION,
        stage,
        config_hash: config_hash.to_string(),
        epoch,
        valid_metrics,
        blob_sha256: blob_sha256(&bytes),
        reference,
    };
    write_atomic(path, &bytes)?;
    write_atomic(sidecar_path(path), &serde_json::to_vec_pretty(&meta)?)?;
    Ok(meta)
}

pub fn load_checkpoint(
    path: impl AsRef<Path>,
    expected: Option<(&ArchitectureConfig, usize)>,
) -> Result<ModelParameters> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, expected)
}

pub fn load_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("sidecar format version {}, expected {FORMAT_VERSION}", meta.format_version)));
    }
    Ok(meta)
}

/// Lineage record for an existing blob.
pub fn lineage_of(path: impl AsRef<Path>) -> Result<Lineage> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(Lineage { path: path.to_path_buf(), sha256: blob_sha256(&bytes) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reasoner::Aggregation;

    fn params(aggregation: Aggregation) -> ModelParameters {
        let cfg = ArchitectureConfig { embed_dim: 8, ffn_dim: 12, max_len: 6, aggregation, ..Default::default() };
        ModelParameters::init(&cfg, 17, 3).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        for agg in [Aggregation::Add, Aggregation::Concat] {
            let mut p = params(agg);
            p.tensors_mut()[0][[0, 0]] = -0.0;
            p.tensors_mut()[0][[0, 1]] = f64::MIN_POSITIVE / 3.0;
            let meta = save_checkpoint(&path, &p, Stage::Spt, "abc", 4, Map::new(), None).unwrap();
            let back = load_checkpoint(&path, Some((&p.config, 17))).unwrap();
            for (a, b) in p.tensors().iter().zip(back.tensors()) {
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
            assert_eq!(back.names(), p.names());
            assert_eq!(load_meta(&path).unwrap(), meta);
        }
    }

    #[test]
    fn corrupt_or_truncated_files_fail() {
        let bytes = encode(&params(Aggregation::Add));
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(matches!(decode(&flipped, None), Err(Error::Checkpoint(_))));
        assert!(matches!(decode(&bytes[..bytes.len() - 9], None), Err(Error::Checkpoint(_))));
        assert!(matches!(decode(b"hello", None), Err(Error::Checkpoint(_))));
        let mut versioned = bytes.clone();
        versioned[8] = 9;
        let err = decode(&versioned, None).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let p = params(Aggregation::Add);
        let bytes = encode(&p);
        let other = ArchitectureConfig { embed_dim: 16, ..p.config.clone() };
        match decode(&bytes, Some((&other, 17))) {
            Err(Error::ShapeMismatch { expected, found }) => {
                assert!(expected.contains("embed_dim=16") && found.contains("embed_dim=8"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(decode(&bytes, Some((&p.config, 18))), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn rpt_sidecar_records_reference() {
        let dir = tempfile::tempdir().unwrap();
        let p = params(Aggregation::Add);
        let spt = dir.path().join("spt.bin");
        save_checkpoint(&spt, &p, Stage::Spt, "h", 1, Map::new(), None).unwrap();
        let lineage = lineage_of(&spt).unwrap();
        let rpt = dir.path().join("rpt.bin");
        save_checkpoint(&rpt, &p, Stage::Rpt, "h", 2, Map::new(), Some(lineage.clone())).unwrap();
        let meta = load_meta(&rpt).unwrap();
        assert_eq!(meta.stage, Stage::Rpt);
        assert_eq!(meta.reference, Some(lineage));
        assert_eq!(meta.reference.unwrap().sha256, load_meta(&spt).unwrap().blob_sha256);
    }
}
