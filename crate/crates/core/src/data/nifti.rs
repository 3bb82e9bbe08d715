//! Minimal single-file NIfTI-1 (`.nii`, `.nii.gz`) reader and writer.
//!
//! Voxel `(i, j, k)` is stored at `i + nx * (j + ny * k)`, which is exactly
//! the row-major `[Z, H, W]` layout with `W = nx`, `H = ny`, `Z = nz`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};

const HEADER_LEN: usize = 348;
const DATA_OFFSET: usize = 352;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataType {
    U8,
    I8,
    I16,
    U16,
    I32,
    F32,
    F64,
}

impl DataType {
    fn code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::I32 => 8,
            DataType::F32 => 16,
            DataType::F64 => 64,
            DataType::I8 => 256,
            DataType::U16 => 512,
        }
    }

    fn from_code(code: i16) -> Option<Self> {
        Some(match code {
            2 => DataType::U8,
            4 => DataType::I16,
            8 => DataType::I32,
            16 => DataType::F32,
            64 => DataType::F64,
            256 => DataType::I8,
            512 => DataType::U16,
            _ => return None,
        })
    }

    fn bytes(self) -> usize {
        match self {
            DataType::U8 | DataType::I8 => 1,
            DataType::I16 | DataType::U16 => 2,
            DataType::I32 | DataType::F32 => 4,
            DataType::F64 => 8,
        }
    }
}

/// A decoded image: dims `(nx, ny, nz)`, spacing and voxels as `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiImage {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub data: Vec<f64>,
}

fn fail(path: &Path, reason: impl Into<String>) -> Error {
    Error::Volume { path: path.to_path_buf(), reason: reason.into() }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    BufReader::new(file).read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| fail(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read(path: &Path) -> Result<NiftiImage> {
    let bytes = read_all(path)?;
    if bytes.len() < HEADER_LEN {
        return Err(fail(path, "file shorter than a NIfTI-1 header"));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_LEN as i32 {
        decode::<LittleEndian>(path, &bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_LEN as i32 {
        decode::<BigEndian>(path, &bytes)
    } else {
        Err(fail(path, "bad header size field (not a NIfTI-1 file)"))
    }
}

fn decode<B: ByteOrder>(path: &Path, b: &[u8]) -> Result<NiftiImage> {
    if &b[344..347] != b"n+1" && &b[344..347] != b"ni1" {
        return Err(fail(path, "missing NIfTI-1 magic"));
    }
    let ndim = B::read_i16(&b[40..42]);
    if !(1..=7).contains(&ndim) {
        return Err(fail(path, format!("invalid dimension count {ndim}")));
    }
    let mut dims = [1usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        if (a as i16) < ndim {
            let v = B::read_i16(&b[42 + 2 * a..44 + 2 * a]);
            if v < 1 {
                return Err(fail(path, format!("invalid size {v} on axis {a}")));
            }
            *d = v as usize;
        }
    }
    for a in 3..ndim as usize {
        if B::read_i16(&b[42 + 2 * a..44 + 2 * a]) > 1 {
            return Err(fail(path, "only single 3D volumes are supported"));
        }
    }
    let code = B::read_i16(&b[70..72]);
    let dtype = DataType::from_code(code).ok_or_else(|| fail(path, format!("unsupported datatype {code}")))?;
    let mut spacing = [1f32; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        *s = B::read_f32(&b[80 + 4 * a..84 + 4 * a]);
    }
    let offset = B::read_f32(&b[108..112]);
    let offset = if offset >= HEADER_LEN as f32 { offset as usize } else { DATA_OFFSET };
    let mut slope = B::read_f32(&b[112..116]) as f64;
    let inter = B::read_f32(&b[116..120]) as f64;
    if slope == 0.0 || !slope.is_finite() {
        slope = 1.0;
    }
    let count: usize = dims.iter().product();
    let need = offset + count * dtype.bytes();
    if b.len() < need {
        return Err(fail(path, format!("truncated data: {} bytes, need {need}", b.len())));
    }
    let raw = &b[offset..need];
    let mut data: Vec<f64> = match dtype {
        DataType::U8 => raw.iter().map(|&v| v as f64).collect(),
        DataType::I8 => raw.iter().map(|&v| v as i8 as f64).collect(),
        DataType::I16 => raw.chunks_exact(2).map(|c| B::read_i16(c) as f64).collect(),
        DataType::U16 => raw.chunks_exact(2).map(|c| B::read_u16(c) as f64).collect(),
        DataType::I32 => raw.chunks_exact(4).map(|c| B::read_i32(c) as f64).collect(),
        DataType::F32 => raw.chunks_exact(4).map(|c| B::read_f32(c) as f64).collect(),
        DataType::F64 => raw.chunks_exact(8).map(B::read_f64).collect(),
    };
    if slope != 1.0 || inter != 0.0 {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Ok(NiftiImage { dims, spacing, data })
}

/// Voxel payload for [`write`].
pub enum Voxels<'a> {
    U8(&'a [u8]),
    F32(&'a [f32]),
}

/// Writes a little-endian NIfTI-1 file, gzip-compressed when the path ends
/// in `.gz`.
pub fn write(path: &Path, dims: [usize; 3], spacing: [f32; 3], voxels: Voxels<'_>) -> Result<()> {
    let count: usize = dims.iter().product();
    let (dtype, len) = match &voxels {
        Voxels::U8(v) => (DataType::U8, v.len()),
        Voxels::F32(v) => (DataType::F32, v.len()),
    };
    if len != count {
        return Err(fail(path, format!("{len} voxels for dims {dims:?}")));
    }
    if dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
        return Err(fail(path, format!("unsupported dims {dims:?}")));
    }
    let mut buf = vec![0u8; DATA_OFFSET + count * dtype.bytes()];
    LittleEndian::write_i32(&mut buf[0..4], HEADER_LEN as i32);
    LittleEndian::write_i16(&mut buf[40..42], 3);
    for (a, &d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut buf[42 + 2 * a..44 + 2 * a], d as i16);
    }
    for a in 3..8 {
        LittleEndian::write_i16(&mut buf[42 + 2 * a..44 + 2 * a], 1);
    }
    LittleEndian::write_i16(&mut buf[70..72], dtype.code());
    LittleEndian::write_i16(&mut buf[72..74], (dtype.bytes() * 8) as i16);
    LittleEndian::write_f32(&mut buf[76..80], 1.0);
    for (a, &s) in spacing.iter().enumerate() {
        LittleEndian::write_f32(&mut buf[80 + 4 * a..84 + 4 * a], s);
    }
    LittleEndian::write_f32(&mut buf[108..112], DATA_OFFSET as f32);
    LittleEndian::write_f32(&mut buf[112..116], 1.0);
    buf[123] = 10; // xyzt_units: mm, s
    buf[344..348].copy_from_slice(b"n+1\0");
    let body = &mut buf[DATA_OFFSET..];
    match voxels {
        Voxels::U8(v) => body.copy_from_slice(v),
        Voxels::F32(v) => LittleEndian::write_f32_into(v, body),
    }

    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        let mut enc = GzEncoder::new(out, Compression::fast());
        enc.write_all(&buf).and_then(|_| enc.finish()).and_then(|mut w| w.flush())
    } else {
        out.write_all(&buf).and_then(|_| out.flush())
    };
    res.map_err(|e| Error::io(path, e))
}
