//! Binary checkpoint format: magic, version, a JSON manifest describing the
//! model, then raw little-endian f32 parameter data in registration order.

use super::tensor::{Param, ParamSet};
use crate::error::{Error, Result};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SALD";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, manifest: &serde_json::Value, params: &ParamSet) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let header = serde_json::to_vec(manifest).map_err(|e| Error::Serialization(e.to_string()))?;
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(params.params.len() as u64).to_le_bytes());
    for p in &params.params {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(p.data.len() as u64).to_le_bytes());
        for v in &p.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, ParamSet)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::corrupt(path, "truncated checkpoint"));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(Error::corrupt(path, "bad magic"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::corrupt(path, format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let manifest: serde_json::Value =
        serde_json::from_slice(take(&mut pos, hlen)?).map_err(|e| Error::json(path, e))?;
    let n_params = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
    let mut params = ParamSet::default();
    for _ in 0..n_params {
        let nlen = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, nlen)?.to_vec())
            .map_err(|_| Error::corrupt(path, "bad parameter name"))?;
        let dlen = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let raw = take(&mut pos, dlen * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.params.push(Param { name, data });
    }
    Ok((manifest, params))
}
