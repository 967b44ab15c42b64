//! Minimal NIfTI-1 single-file (`.nii`, `.nii.gz`) reader and writer.
//!
//! Reads any scalar datatype in either byte order and applies `scl_slope` /
//! `scl_inter`. Writes little-endian float32 volumes and uint8 masks with an
//! axis-aligned sform built from spacing and origin.

use std::fs::File;
use std::io::{BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian, ReadBytesExt, WriteBytesExt};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::{Array3, ShapeBuilder};

use super::{LabelMask, Vec3, Volume};
use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;
const DT_UINT32: i16 = 768;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.into(),
        reason: reason.into(),
    }
}

pub(super) fn read(path: &Path) -> Result<Volume> {
    let mut raw = Vec::new();
    File::open(path)
        .and_then(|f| BufReader::new(f).read_to_end(&mut raw))
        .map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        raw = out;
    }
    if raw.len() < HEADER_SIZE {
        return Err(format_err(path, "file shorter than a NIfTI-1 header"));
    }
    if LittleEndian::read_i32(&raw[0..4]) == HEADER_SIZE as i32 {
        decode::<LittleEndian>(&raw, path)
    } else if BigEndian::read_i32(&raw[0..4]) == HEADER_SIZE as i32 {
        decode::<BigEndian>(&raw, path)
    } else {
        Err(format_err(path, "sizeof_hdr is not 348"))
    }
}

fn decode<B: ByteOrder>(raw: &[u8], path: &Path) -> Result<Volume> {
    let magic = &raw[344..348];
    if magic != b"n+1\0" && magic != b"ni1\0" {
        return Err(format_err(path, "missing NIfTI-1 magic"));
    }
    let i16_at = |off: usize| B::read_i16(&raw[off..off + 2]);
    let f32_at = |off: usize| B::read_f32(&raw[off..off + 4]);

    let ndim = i16_at(40);
    if !(1..=7).contains(&ndim) {
        return Err(format_err(path, format!("bad dim[0] = {ndim}")));
    }
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate().take(ndim.min(3) as usize) {
        let v = i16_at(42 + 2 * a);
        if v < 1 {
            return Err(format_err(path, format!("bad dim[{}] = {v}", a + 1)));
        }
        *d = v as usize;
    }
    for a in 3..ndim as usize {
        if i16_at(42 + 2 * a) > 1 {
            return Err(format_err(path, "only 3D scalar volumes are supported"));
        }
    }
    let datatype = i16_at(70);
    let mut spacing = [1.0; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let v = f32_at(80 + 4 * a) as f64;
        if !(v.is_finite() && v > 0.0) {
            return Err(format_err(path, "missing spacing metadata (pixdim)"));
        }
        *s = v;
    }
    let vox_offset = f32_at(108) as usize;
    let slope = f32_at(112);
    let inter = f32_at(116);
    let qform = i16_at(252);
    let sform = i16_at(254);
    let origin: Vec3 = if sform > 0 {
        [f32_at(280 + 12), f32_at(296 + 12), f32_at(312 + 12)].map(f64::from)
    } else if qform > 0 {
        [f32_at(268), f32_at(272), f32_at(276)].map(f64::from)
    } else {
        [0.0; 3]
    };

    let n: usize = dims.iter().product();
    let bytes_per = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_UINT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(format_err(path, format!("unsupported datatype {other}"))),
    };
    let start = vox_offset.max(HEADER_SIZE);
    let body = raw
        .get(start..start + n * bytes_per)
        .ok_or_else(|| format_err(path, "truncated voxel data"))?;
    let mut cur = Cursor::new(body);
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let v = match datatype {
            DT_UINT8 => cur.read_u8().map(f64::from),
            DT_INT8 => cur.read_i8().map(f64::from),
            DT_INT16 => cur.read_i16::<B>().map(f64::from),
            DT_UINT16 => cur.read_u16::<B>().map(f64::from),
            DT_INT32 => cur.read_i32::<B>().map(f64::from),
            DT_UINT32 => cur.read_u32::<B>().map(f64::from),
            DT_FLOAT32 => cur.read_f32::<B>().map(f64::from),
            _ => cur.read_f64::<B>(),
        }
        .map_err(|e| Error::io(path, e))?;
        values.push(v);
    }
    let scale = slope != 0.0 && slope.is_finite() && !(slope == 1.0 && inter == 0.0);
    let data: Vec<f32> = values
        .into_iter()
        .map(|v| {
            if scale {
                (v * slope as f64 + inter as f64) as f32
            } else {
                v as f32
            }
        })
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(path.display().to_string()));
    }
    // NIfTI stores the first axis fastest.
    let arr = Array3::from_shape_vec((dims[0], dims[1], dims[2]).f(), data)
        .map_err(|e| format_err(path, e.to_string()))?;
    Volume::with_origin(arr, spacing, origin)
}

fn header(shape: [usize; 3], spacing: Vec3, origin: Vec3, datatype: i16, bitpix: i16) -> Result<Vec<u8>> {
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    LittleEndian::write_i16(&mut h[40..42], 3);
    for (a, &d) in shape.iter().enumerate() {
        let d = i16::try_from(d).map_err(|_| crate::error::invalid("dimension exceeds NIfTI-1 limit"))?;
        LittleEndian::write_i16(&mut h[42 + 2 * a..44 + 2 * a], d);
    }
    for a in 3..7 {
        LittleEndian::write_i16(&mut h[42 + 2 * a..44 + 2 * a], 1);
    }
    LittleEndian::write_i16(&mut h[70..72], datatype);
    LittleEndian::write_i16(&mut h[72..74], bitpix);
    LittleEndian::write_f32(&mut h[76..80], 1.0); // qfac
    for (a, &s) in spacing.iter().enumerate() {
        LittleEndian::write_f32(&mut h[80 + 4 * a..84 + 4 * a], s as f32);
    }
    LittleEndian::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..116], 1.0);
    h[123] = 10 | 8; // xyzt_units: mm, s
    LittleEndian::write_i16(&mut h[252..254], 1);
    LittleEndian::write_i16(&mut h[254..256], 1);
    for (a, &o) in origin.iter().enumerate() {
        LittleEndian::write_f32(&mut h[268 + 4 * a..272 + 4 * a], o as f32);
    }
    for row in 0..3 {
        let base = 280 + 16 * row;
        LittleEndian::write_f32(&mut h[base + 4 * row..base + 4 * row + 4], spacing[row] as f32);
        LittleEndian::write_f32(&mut h[base + 12..base + 16], origin[row] as f32);
    }
    h[344..348].copy_from_slice(b"n+1\0");
    Ok(h)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.to_ascii_lowercase().ends_with(".gz"));
    let res = if gz {
        let mut enc = GzEncoder::new(BufWriter::new(file), Compression::fast());
        enc.write_all(bytes).and_then(|_| enc.finish().map(|_| ()))
    } else {
        let mut w = BufWriter::new(file);
        w.write_all(bytes).and_then(|_| w.flush())
    };
    res.map_err(|e| Error::io(path, e))
}

pub(super) fn write_f32(vol: &Volume, path: &Path) -> Result<()> {
    let mut bytes = header(vol.shape(), vol.spacing(), vol.origin(), DT_FLOAT32, 32)?;
    bytes.reserve(vol.len() * 4);
    // Fortran order: reversed axes of the C-order view.
    for &v in vol.data().t().iter() {
        bytes.write_f32::<LittleEndian>(v).expect("vec write");
    }
    write_bytes(path, &bytes)
}

pub(super) fn write_u8(mask: &LabelMask, path: &Path) -> Result<()> {
    let mut bytes = header(mask.shape(), mask.spacing(), mask.origin(), DT_UINT8, 8)?;
    bytes.extend(mask.data().t().iter().copied());
    write_bytes(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{load_mask, load_volume, save_mask, save_volume};

    fn ramp() -> Volume {
        let data = Array3::from_shape_fn((5, 4, 3), |(i, j, k)| (i * 100 + j * 10 + k) as f32 - 7.25);
        Volume::with_origin(data, [0.35, 0.35, 0.35], [1.0, -2.0, 3.5]).unwrap()
    }

    #[test]
    fn float_round_trip_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            let v = ramp();
            save_volume(&v, &p).unwrap();
            let back = load_volume(&p).unwrap();
            assert_eq!(back.data(), v.data());
            for a in 0..3 {
                assert!((back.spacing()[a] - 0.35).abs() < 1e-6);
                assert!((back.origin()[a] - v.origin()[a]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.nii.gz");
        let m = LabelMask::new(Array3::from_shape_fn((4, 4, 4), |(i, j, _)| u8::from(i == j)), [1.0; 3]).unwrap();
        save_mask(&m, &p).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
    }

    #[test]
    fn reads_int16_with_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.nii");
        let mut h = header([2, 1, 1], [0.5, 0.5, 0.5], [0.0; 3], DT_INT16, 16).unwrap();
        LittleEndian::write_f32(&mut h[112..116], 2.0);
        LittleEndian::write_f32(&mut h[116..120], 1.0);
        h.write_i16::<LittleEndian>(3).unwrap();
        h.write_i16::<LittleEndian>(-4).unwrap();
        std::fs::write(&p, &h).unwrap();
        let v = load_volume(&p).unwrap();
        assert_eq!(v.data().iter().copied().collect::<Vec<_>>(), vec![7.0, -7.0]);
        assert_eq!(v.spacing(), [0.5; 3]);
    }

    #[test]
    fn nan_voxel_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.nii");
        let mut h = header([2, 1, 1], [1.0; 3], [0.0; 3], DT_FLOAT32, 32).unwrap();
        h.write_f32::<LittleEndian>(1.0).unwrap();
        h.write_f32::<LittleEndian>(f32::NAN).unwrap();
        std::fs::write(&p, &h).unwrap();
        let err = load_volume(&p).unwrap_err();
        assert!(err.to_string().contains("non-finite intensities"), "{err}");
    }

    #[test]
    fn zero_pixdim_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nospacing.nii");
        let mut h = header([1, 1, 1], [1.0; 3], [0.0; 3], DT_UINT8, 8).unwrap();
        LittleEndian::write_f32(&mut h[84..88], 0.0);
        h.push(1);
        std::fs::write(&p, &h).unwrap();
        assert!(load_volume(&p).unwrap_err().to_string().contains("spacing"));
    }
}
