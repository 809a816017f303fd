//! `VCKP1` checkpoint format.
//!
//! Layout: 5-byte magic `VCKP1`, newline, one JSON line holding the ordered
//! parameter list `[{"name":…,"shape":[…]}, …]`, newline, then the raw
//! little-endian f32 parameter buffers concatenated in that order.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

const CKPT_MAGIC: &[u8; 6] = b"VCKP1\n";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

pub fn save_checkpoint(params: &[(String, &Tensor)], path: &Path) -> Result<()> {
    let metas: Vec<ParamMeta> = params
        .iter()
        .map(|(name, t)| ParamMeta {
            name: name.clone(),
            shape: t.shape().to_vec(),
        })
        .collect();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(CKPT_MAGIC)?;
    serde_json::to_writer(&mut out, &metas)
        .map_err(|e| Error::BadHeader(format!("checkpoint header serialization failed: {e}")))?;
    out.write_all(b"\n")?;
    for (_, t) in params {
        let mut bytes = Vec::with_capacity(t.numel() * 4);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&bytes)?;
    }
    out.flush()?;
    Ok(())
}

/// Reads the header of a checkpoint without touching the payload.
pub fn read_checkpoint_meta(path: &Path) -> Result<Vec<ParamMeta>> {
    let bytes = std::fs::read(path)?;
    let (metas, _) = parse_header(&bytes)?;
    Ok(metas)
}

fn parse_header(bytes: &[u8]) -> Result<(Vec<ParamMeta>, usize)> {
    if bytes.len() < CKPT_MAGIC.len() || &bytes[..CKPT_MAGIC.len()] != CKPT_MAGIC {
        let found = bytes.iter().take(5).map(|&b| b as char).collect::<String>();
        return Err(Error::BadMagic {
            expected: "VCKP1".to_string(),
            found,
        });
    }
    let rest = &bytes[CKPT_MAGIC.len()..];
    let newline = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::BadHeader("missing header line terminator".into()))?;
    let metas: Vec<ParamMeta> = serde_json::from_slice(&rest[..newline])
        .map_err(|e| Error::BadHeader(format!("unparseable checkpoint header: {e}")))?;
    Ok((metas, CKPT_MAGIC.len() + newline + 1))
}

/// Loads a checkpoint into an existing parameter set.
///
/// The stored name/shape list must match the destination exactly, in order;
/// loading a checkpoint into a differently shaped model is an error.
pub fn load_checkpoint_into(params: &mut [(String, &mut Tensor)], path: &Path) -> Result<()> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let (metas, payload_start) = parse_header(&bytes)?;
    if metas.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "load_checkpoint",
            detail: format!(
                "checkpoint stores {} parameters, model has {}",
                metas.len(),
                params.len()
            ),
        });
    }
    for (meta, (name, tensor)) in metas.iter().zip(params.iter()) {
        if meta.name != *name || meta.shape != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "load_checkpoint",
                detail: format!(
                    "stored {}:{:?} vs model {}:{:?}",
                    meta.name,
                    meta.shape,
                    name,
                    tensor.shape()
                ),
            });
        }
    }
    let total: usize = metas.iter().map(|m| numel(&m.shape)).sum();
    let payload = &bytes[payload_start..];
    if payload.len() != total * 4 {
        return Err(Error::Truncated {
            expected: total * 4,
            found: payload.len(),
        });
    }
    let mut offset = 0usize;
    for (_, tensor) in params.iter_mut() {
        let n = tensor.numel();
        let dst = tensor.data_mut();
        for (i, chunk) in payload[offset..offset + n * 4].chunks_exact(4).enumerate() {
            dst[i] = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
        offset += n * 4;
    }
    Ok(())
}
