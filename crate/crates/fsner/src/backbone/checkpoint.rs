//! Self-describing binary container: magic, version, JSON header, f64
//! little-endian arrays, trailing SHA-256 of everything before it. Backbone
//! checkpoints and adapter files share this layout; any single flipped byte
//! fails the checksum on load.

use super::model::{Backbone, BackboneConfig, LayerParams, ModelParams};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

pub const BACKBONE_MAGIC: [u8; 4] = *b"FSNB";
pub const ADAPTER_MAGIC: [u8; 4] = *b"FSNA";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ArrayMeta {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

pub fn write_container(
    path: &Path,
    magic: [u8; 4],
    header: &serde_json::Value,
    arrays: &[(&str, &Matrix)],
) -> Result<()> {
    let metas: Vec<ArrayMeta> = arrays
        .iter()
        .map(|(name, m)| ArrayMeta {
            name: name.to_string(),
            rows: m.rows(),
            cols: m.cols(),
        })
        .collect();
    let full_header = serde_json::json!({ "meta": header, "arrays": metas });
    let header_bytes = serde_json::to_vec(&full_header)?;

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&magic);
    buf.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (_, m) in arrays {
        for v in m.as_slice() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_container(
    path: &Path,
    magic: [u8; 4],
) -> Result<(serde_json::Value, Vec<(ArrayMeta, Matrix)>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    if buf.len() < 4 + 4 + 8 + 32 {
        return Err(Error::Checkpoint("file too short for container layout".into()));
    }
    let (body, stored_digest) = buf.split_at(buf.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored_digest {
        return Err(Error::Checkpoint("checksum mismatch: file is corrupt".into()));
    }
    if body[0..4] != magic {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            &body[0..4],
            magic
        )));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != CONTAINER_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported container version {version}"
        )));
    }
    let header_len = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    if 16 + header_len > body.len() {
        return Err(Error::Checkpoint("header overruns file".into()));
    }
    let full_header: serde_json::Value = serde_json::from_slice(&body[16..16 + header_len])?;
    let metas: Vec<ArrayMeta> = serde_json::from_value(
        full_header
            .get("arrays")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("header missing array table".into()))?,
    )?;
    let meta = full_header
        .get("meta")
        .cloned()
        .ok_or_else(|| Error::Checkpoint("header missing meta".into()))?;

    let mut offset = 16 + header_len;
    let mut arrays = Vec::with_capacity(metas.len());
    for am in metas {
        let n = am.rows * am.cols;
        let end = offset + n * 8;
        if end > body.len() {
            return Err(Error::Checkpoint(format!(
                "array '{}' overruns file",
                am.name
            )));
        }
        let data: Vec<f64> = body[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push((am.clone(), Matrix::from_vec(am.rows, am.cols, data)));
        offset = end;
    }
    if offset != body.len() {
        return Err(Error::Checkpoint("trailing bytes after arrays".into()));
    }
    Ok((meta, arrays))
}

pub fn save_backbone(path: &Path, backbone: &Backbone) -> Result<()> {
    let header = serde_json::to_value(&backbone.config)?;
    let entries = backbone.params.entries();
    let arrays: Vec<(&str, &Matrix)> = entries
        .iter()
        .map(|(name, m)| (name.as_str(), *m))
        .collect();
    write_container(path, BACKBONE_MAGIC, &header, &arrays)
}

pub fn load_backbone(path: &Path) -> Result<Backbone> {
    let (meta, arrays) = read_container(path, BACKBONE_MAGIC)?;
    let config: BackboneConfig = serde_json::from_value(meta)?;
    config.validate()?;
    // reconstruct by name against a freshly shaped parameter set
    let mut params = ModelParams {
        embed: Matrix::zeros(0, 0),
        pos: Matrix::zeros(0, 0),
        layers: (0..config.n_layers)
            .map(|_| LayerParams {
                attn_norm: Matrix::zeros(0, 0),
                wq: Matrix::zeros(0, 0),
                wk: Matrix::zeros(0, 0),
                wv: Matrix::zeros(0, 0),
                wo: Matrix::zeros(0, 0),
                mlp_norm: Matrix::zeros(0, 0),
                w_gate: Matrix::zeros(0, 0),
                w_up: Matrix::zeros(0, 0),
                w_down: Matrix::zeros(0, 0),
            })
            .collect(),
        final_norm: Matrix::zeros(0, 0),
        lm_head: Matrix::zeros(0, 0),
    };
    {
        let mut slots = params.entries_mut();
        if slots.len() != arrays.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} arrays, found {}",
                slots.len(),
                arrays.len()
            )));
        }
        for ((name, slot), (meta, m)) in slots.iter_mut().zip(arrays) {
            if *name != meta.name {
                return Err(Error::Checkpoint(format!(
                    "array order mismatch: expected '{name}', found '{}'",
                    meta.name
                )));
            }
            **slot = m;
        }
    }
    let backbone = Backbone { config, params };
    verify_shapes(&backbone)?;
    Ok(backbone)
}

fn verify_shapes(bb: &Backbone) -> Result<()> {
    let d = bb.config.hidden_dim;
    let checks: Vec<(String, (usize, usize), (usize, usize))> = bb
        .params
        .entries()
        .into_iter()
        .map(|(name, m)| {
            let expect = match name.as_str() {
                "embed" => (bb.config.vocab_size, d),
                "pos" => (bb.config.max_positions, d),
                "final_norm" => (1, d),
                "lm_head" => (d, bb.config.vocab_size),
                n if n.ends_with("norm") => (1, d),
                n if n.ends_with("w_gate") || n.ends_with("w_up") => (d, bb.config.ff_dim),
                n if n.ends_with("w_down") => (bb.config.ff_dim, d),
                _ => (d, d),
            };
            (name, m.shape(), expect)
        })
        .collect();
    for (name, got, expect) in checks {
        if got != expect {
            return Err(Error::Checkpoint(format!(
                "array '{name}' has shape {got:?}, config implies {expect:?}"
            )));
        }
    }
    Ok(())
}
