//! Versioned tensor container used for network and trainer checkpoints.
//!
//! Layout: 8-byte magic, little-endian u64 header length, JSON header
//! (version, kind, caller metadata, ordered tensor names + shapes), then the
//! raw f32 payloads in header order. Tensor names are sorted before writing
//! so a save → load → save round trip is byte-identical.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"TSCKPT01";
pub const VERSION: &str = "1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: String,
    kind: String,
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub struct Container {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tensors: HashMap<String, Tensor>,
}

pub fn save(
    path: impl AsRef<Path>,
    kind: &str,
    meta: serde_json::Value,
    tensors: &[(String, Tensor)],
) -> Result<()> {
    let path = path.as_ref();
    let mut entries: Vec<(String, Vec<f32>, Vec<usize>)> = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let data = t
            .to_dtype(DType::F32)?
            .flatten_all()?
            .to_vec1::<f32>()?;
        entries.push((name.clone(), data, t.dims().to_vec()));
    }
    entries.sort_by(|a, b| a.0.cmp(&b.0));

    let header = Header {
        version: VERSION.to_string(),
        kind: kind.to_string(),
        meta,
        tensors: entries
            .iter()
            .map(|(name, _, shape)| TensorEntry {
                name: name.clone(),
                shape: shape.clone(),
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    let mut write = |buf: &[u8]| f.write_all(buf).map_err(|e| Error::io(&tmp, e));
    write(MAGIC)?;
    write(&(header_bytes.len() as u64).to_le_bytes())?;
    write(&header_bytes)?;
    for (_, data, _) in &entries {
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        write(&bytes)?;
    }
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Container> {
    let path = path.as_ref();
    let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;

    if buf.len() < 16 || &buf[..8] != MAGIC {
        return Err(Error::CorruptCheckpoint(format!(
            "{}: bad magic",
            path.display()
        )));
    }
    let header_len = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    if buf.len() < 16 + header_len {
        return Err(Error::CorruptCheckpoint(format!(
            "{}: truncated header",
            path.display()
        )));
    }
    let header: Header = serde_json::from_slice(&buf[16..16 + header_len])
        .map_err(|e| Error::CorruptCheckpoint(format!("{}: {e}", path.display())))?;
    if header.version != VERSION {
        return Err(Error::CheckpointVersion {
            got: header.version,
            expected: VERSION.to_string(),
        });
    }

    let mut offset = 16 + header_len;
    let mut tensors = HashMap::with_capacity(header.tensors.len());
    for entry in &header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + n * 4;
        if buf.len() < end {
            return Err(Error::CorruptCheckpoint(format!(
                "{}: truncated payload for `{}`",
                path.display(),
                entry.name
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in buf[offset..end].chunks_exact(4) {
            data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
        }
        let t = Tensor::from_vec(data, entry.shape.as_slice(), &Device::Cpu)?;
        tensors.insert(entry.name.clone(), t);
        offset = end;
    }
    Ok(Container {
        kind: header.kind,
        meta: header.meta,
        tensors,
    })
}
