//! Uncompressed test fixture: `name.raw` holds little-endian float32 voxels in
//! C order, `name.json` holds `{"shape": [d,h,w], "spacing": [..], "origin": [..]}`.

use std::path::{Path, PathBuf};

use byteorder::{ByteOrder, LittleEndian};
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::{Vec3, Volume};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
struct Sidecar {
    shape: [usize; 3],
    spacing: Option<Vec3>,
    #[serde(default)]
    origin: Vec3,
}

fn pair(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("raw"), path.with_extension("json"))
}

pub(super) fn read(path: &Path) -> Result<Volume> {
    let (raw_path, meta_path) = pair(path);
    let meta = std::fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Sidecar = serde_json::from_slice(&meta)?;
    let spacing = meta.spacing.ok_or_else(|| Error::Format {
        path: meta_path.clone(),
        reason: "missing spacing metadata".into(),
    })?;
    let bytes = std::fs::read(&raw_path).map_err(|e| Error::io(&raw_path, e))?;
    let n: usize = meta.shape.iter().product();
    if bytes.len() != n * 4 {
        return Err(Error::Format {
            path: raw_path,
            reason: format!("expected {} bytes, found {}", n * 4, bytes.len()),
        });
    }
    let mut data = vec![0f32; n];
    LittleEndian::read_f32_into(&bytes, &mut data);
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(raw_path.display().to_string()));
    }
    let arr = Array3::from_shape_vec(meta.shape, data).expect("length checked");
    Volume::with_origin(arr, spacing, meta.origin)
}

pub(super) fn write(vol: &Volume, path: &Path) -> Result<()> {
    let (raw_path, meta_path) = pair(path);
    let values: Vec<f32> = vol.data().iter().copied().collect();
    let mut bytes = vec![0u8; values.len() * 4];
    LittleEndian::write_f32_into(&values, &mut bytes);
    std::fs::write(&raw_path, bytes).map_err(|e| Error::io(&raw_path, e))?;
    let meta = Sidecar {
        shape: vol.shape(),
        spacing: Some(vol.spacing()),
        origin: vol.origin(),
    };
    std::fs::write(&meta_path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&meta_path, e))
}
