use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{param_specs, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor_from, write_tensor_to, Tensor};

const CHECKPOINT_MAGIC: &[u8; 8] = b"SALTCKPT";
const DIGEST_LEN: usize = 32;

/// Layout: magic, `u32` config length, config JSON, `u32` tensor count,
/// then per tensor a `u32` name length, the name and a raw tensor block;
/// a SHA-256 of everything before it closes the file.
pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let header = serde_json::to_vec(model.config())?;
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.named_params() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        write_tensor_to(&mut buf, t)?;
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    fs::write(path, buf)?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| Error::Integrity("checkpoint ends inside a length field".into()))?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let bytes = fs::read(path)?;
    if bytes.len() < CHECKPOINT_MAGIC.len() + DIGEST_LEN || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("not a checkpoint or truncated header".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checkpoint checksum mismatch (truncated or corrupted)".into()));
    }
    let mut r = Cursor::new(&body[8..]);
    let header_len = read_u32(&mut r)? as usize;
    let mut header = vec![0u8; header_len];
    r.read_exact(&mut header)
        .map_err(|_| Error::Integrity("checkpoint header is truncated".into()))?;
    let config: ModelConfig = serde_json::from_slice(&header)
        .map_err(|e| Error::Checkpoint(format!("unreadable config header: {e}")))?;
    let specs = param_specs(&config)?;
    let count = read_u32(&mut r)? as usize;
    if count != specs.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {count} tensors but the config needs {}",
            specs.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for spec in &specs {
        let len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Integrity("checkpoint tensor name is truncated".into()))?;
        let name = String::from_utf8_lossy(&name);
        if name != spec.name {
            return Err(Error::Checkpoint(format!("expected tensor `{}`, found `{name}`", spec.name)));
        }
        let t: Tensor = read_tensor_from(&mut r)?;
        if t.shape() != spec.shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                spec.shape
            )));
        }
        params.push(t);
    }
    Model::from_parts(config, specs, params)
}

/// Loads a checkpoint and checks that its config equals `expected`.
pub fn load_checkpoint_expecting(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if let Some((field, found, want)) = model.config().first_difference(expected) {
        return Err(Error::Checkpoint(format!(
            "config field `{field}` is {found} in the checkpoint, expected {want}"
        )));
    }
    Ok(model)
}
