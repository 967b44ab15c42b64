//! Binary checkpoint container.
//!
//! Layout: 8-byte magic `VSCK0001`, little-endian `u64` header length, a JSON
//! header, then the raw little-endian `f32` payload of every tensor in header
//! order. The header is `{"meta": <any>, "tensors": [CheckpointEntry, ..]}`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

const MAGIC: &[u8; 8] = b"VSCK0001";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    /// Byte offset into the payload.
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<CheckpointEntry>,
}

pub fn write_checkpoint(path: &Path, meta: &serde_json::Value, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let e = CheckpointEntry {
                name: name.clone(),
                dtype: "f32".into(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.len() as u64;
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors: entries,
    })?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    // Write to a sibling temp file so a crash never leaves a torn checkpoint.
    let tmp = path.with_extension("tmp");
    let write = || -> std::io::Result<()> {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_u64::<LittleEndian>(header.len() as u64)?;
        w.write_all(&header)?;
        for (_, t) in tensors {
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.into_inner().map_err(|e| e.into_error())?.sync_all()
    };
    write().map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let fmt = |reason: &str| Error::Format {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| fmt("truncated header"))?;
    if &magic != MAGIC {
        return Err(fmt("bad checkpoint magic"));
    }
    let len = r.read_u64::<LittleEndian>().map_err(|_| fmt("truncated header"))?;
    if len > 1 << 30 {
        return Err(fmt("implausible header length"));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf).map_err(|_| fmt("truncated header"))?;
    let header: Header = serde_json::from_slice(&buf).map_err(|e| fmt(&format!("header: {e}")))?;
    let mut out = Vec::with_capacity(header.tensors.len());
    let mut expected = 0u64;
    for e in header.tensors {
        if e.dtype != "f32" {
            return Err(fmt(&format!("unsupported dtype {}", e.dtype)));
        }
        if e.offset != expected {
            return Err(fmt("non-contiguous tensor offsets"));
        }
        let n: usize = e.shape.iter().product();
        expected += 4 * n as u64;
        let mut data = vec![0f32; n];
        r.read_f32_into::<LittleEndian>(&mut data)
            .map_err(|_| fmt(&format!("truncated payload in {}", e.name)))?;
        out.push((e.name, Tensor::from_vec(&e.shape, data)?));
    }
    Ok((header.meta, out))
}
