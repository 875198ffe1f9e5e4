//! Checkpoint file layout (little-endian):
//!
//! ```text
//! magic    8 bytes  "NDCKPT1\0"
//! version  u32      1
//! hlen     u32      header length in bytes
//! header   JSON     {config, norm, coord_transform, meta, blocks: [{name, rows, cols}]}
//! weights  f32      rows·cols values per block, row-major, in header order
//! sha256   32 bytes digest of everything above
//! ```

use crate::model::{ModelConfig, ModelError, ParamStore, Surrogate};
use crate::tape::Mat;
use nd_core::binio::{put_f32, put_u32, Reader};
use nd_core::dataset::{CoordTransform, NormStats};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NDCKPT1\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Surrogate,
    pub coord_transform: Option<CoordTransform>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct BlockHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    norm: NormStats,
    coord_transform: Option<CoordTransform>,
    #[serde(default)]
    meta: serde_json::Value,
    blocks: Vec<BlockHeader>,
}

fn err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let p = &ck.model.params;
    let header = Header {
        config: ck.model.config,
        norm: ck.model.norm,
        coord_transform: ck.coord_transform,
        meta: ck.meta.clone(),
        blocks: p
            .names
            .iter()
            .zip(&p.values)
            .map(|(name, m)| BlockHeader {
                name: name.clone(),
                rows: m.rows,
                cols: m.cols,
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serialises");
    let mut buf = Vec::with_capacity(48 + json.len() + 4 * p.count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_u32(&mut buf, json.len() as u32);
    buf.extend_from_slice(&json);
    for m in &p.values {
        for &x in &m.data {
            put_f32(&mut buf, x as f32);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, ModelError> {
    if bytes.len() < 48 {
        return Err(err("file too short"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(err("checksum mismatch"));
    }
    let mut r = Reader::new(body);
    let trunc = |t: nd_core::binio::Truncated| err(format!("truncated at byte {}", t.offset));
    if r.bytes(8).map_err(trunc)? != CHECKPOINT_MAGIC {
        return Err(err("bad magic"));
    }
    let version = r.u32().map_err(trunc)?;
    if version != CHECKPOINT_VERSION {
        return Err(err(format!("unsupported version {version}")));
    }
    let hlen = r.u32().map_err(trunc)? as usize;
    let header: Header = serde_json::from_slice(r.bytes(hlen).map_err(trunc)?)?;
    header.config.validate()?;

    let expected = ParamStore::init(&ModelConfig {
        init_seed: 0,
        ..header.config
    });
    if expected.len() != header.blocks.len() {
        return Err(err("block count does not match the config"));
    }
    let mut names = Vec::with_capacity(header.blocks.len());
    let mut values = Vec::with_capacity(header.blocks.len());
    for (b, want) in header.blocks.iter().zip(&expected.values) {
        if expected.index_of(&b.name).is_none() || (b.rows, b.cols) != want.shape() {
            return Err(err(format!("unexpected block {} {}x{}", b.name, b.rows, b.cols)));
        }
        let mut data = Vec::with_capacity(b.rows * b.cols);
        for _ in 0..b.rows * b.cols {
            data.push(r.f32().map_err(trunc)? as f64);
        }
        names.push(b.name.clone());
        values.push(Mat::from_vec(b.rows, b.cols, data));
    }
    if r.remaining() != 0 {
        return Err(err("trailing bytes"));
    }
    if names != expected.names {
        return Err(err("block order does not match the config"));
    }
    Ok(Checkpoint {
        model: Surrogate {
            config: header.config,
            params: ParamStore::from_blocks(names, values),
            norm: header.norm,
        },
        coord_transform: header.coord_transform,
        meta: header.meta,
    })
}

/// Writes the checkpoint and returns its sha256 hex digest.
pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<String, ModelError> {
    let bytes = encode_checkpoint(ck);
    std::fs::write(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, ModelError> {
    decode_checkpoint(&std::fs::read(path)?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Rounds every weight to f32, matching what a saved checkpoint holds.
pub fn round_to_f32(params: &mut ParamStore) {
    for m in &mut params.values {
        for x in &mut m.data {
            *x = *x as f32 as f64;
        }
    }
}
