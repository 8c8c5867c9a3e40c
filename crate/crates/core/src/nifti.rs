//! Minimal NIfTI-1 single-file (`.nii` / `.nii.gz`) reader and writer.
//!
//! Only the subset needed here is handled: up to four dimensions, the sform
//! affine, pixdim voxel sizes and `uint8`, `int16`, `float32`, `float64`
//! voxel data (only `uint8`, `float32` and `float64` are written). Both byte
//! orders are read; files are always written little-endian.
//!
//! The header stores the affine and voxel sizes as `f32`. To round-trip them
//! at full precision the writer also embeds a JSON comment extension
//! (ecode 6) holding the `f64` values and any caller metadata; the reader
//! prefers those values when it finds the extension.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde_json::{json, Value};

use crate::error::{Error, Result};

const HEADER_SIZE: usize = 348;
const ECODE_COMMENT: i32 = 6;
const META_TAG: &str = "physeg";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U8,
    I16,
    F32,
    F64,
}

impl Dtype {
    fn code(self) -> i16 {
        match self {
            Dtype::U8 => 2,
            Dtype::I16 => 4,
            Dtype::F32 => 16,
            Dtype::F64 => 64,
        }
    }

    fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Dtype::U8),
            4 => Some(Dtype::I16),
            16 => Some(Dtype::F32),
            64 => Some(Dtype::F64),
            _ => None,
        }
    }

    fn bytes(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::I16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "u8" | "uint8" => Ok(Dtype::U8),
            "f32" | "float32" => Ok(Dtype::F32),
            "f64" | "float64" => Ok(Dtype::F64),
            other => Err(Error::UnsupportedDtype(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum VoxelData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl VoxelData {
    pub fn dtype(&self) -> Dtype {
        match self {
            VoxelData::U8(_) => Dtype::U8,
            VoxelData::I16(_) => Dtype::I16,
            VoxelData::F32(_) => Dtype::F32,
            VoxelData::F64(_) => Dtype::F64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            VoxelData::U8(v) => v.len(),
            VoxelData::I16(v) => v.len(),
            VoxelData::F32(v) => v.len(),
            VoxelData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_f64(&self) -> Vec<f64> {
        match self {
            VoxelData::U8(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::I16(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            VoxelData::F64(v) => v.clone(),
        }
    }

    /// Converts `f64` samples to the requested storage type.
    pub fn from_f64(values: &[f64], dtype: Dtype) -> Result<Self> {
        Ok(match dtype {
            Dtype::F64 => VoxelData::F64(values.to_vec()),
            Dtype::F32 => VoxelData::F32(values.iter().map(|&x| x as f32).collect()),
            Dtype::U8 => VoxelData::U8(
                values
                    .iter()
                    .map(|&x| {
                        if (0.0..=255.0).contains(&x) && x.fract() == 0.0 {
                            Ok(x as u8)
                        } else {
                            Err(Error::validation(format!("{x} is not representable as uint8")))
                        }
                    })
                    .collect::<Result<_>>()?,
            ),
            Dtype::I16 => return Err(Error::UnsupportedDtype("int16 output".into())),
        })
    }

    fn encode_le(&self, out: &mut Vec<u8>) {
        match self {
            VoxelData::U8(v) => out.extend_from_slice(v),
            VoxelData::I16(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            VoxelData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            VoxelData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
}

/// An image as stored on disk: dims, geometry, raw voxel data and optional
/// JSON metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiImage {
    /// 3 or 4 entries; x fastest.
    pub dims: Vec<usize>,
    pub voxel_size: [f64; 3],
    pub affine: [[f64; 4]; 4],
    pub data: VoxelData,
    pub metadata: Option<Value>,
}

impl NiftiImage {
    pub fn n_voxels_3d(&self) -> usize {
        self.dims[..3].iter().product()
    }

    pub fn n_channels(&self) -> usize {
        self.dims.get(3).copied().unwrap_or(1)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut raw = Vec::new();
        BufReader::new(file)
            .read_to_end(&mut raw)
            .map_err(|e| Error::io(path, e))?;
        let bytes = if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
            let mut out = Vec::new();
            GzDecoder::new(&raw[..])
                .read_to_end(&mut out)
                .map_err(|e| Error::io(path, e))?;
            out
        } else {
            raw
        };
        decode(&bytes).map_err(|reason| Error::Nifti {
            path: path.to_path_buf(),
            reason,
        })
    }

    /// Writes the image; a `.gz` suffix selects gzip compression.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.encode()?;
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let gz = path.extension().is_some_and(|e| e == "gz");
        let res = if gz {
            let mut enc = GzEncoder::new(BufWriter::new(file), Compression::default());
            enc.write_all(&bytes)
                .and_then(|_| enc.finish())
                .and_then(|mut w| w.flush())
        } else {
            let mut w = BufWriter::new(file);
            w.write_all(&bytes).and_then(|_| w.flush())
        };
        res.map_err(|e| Error::io(path, e))
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        if !(3..=4).contains(&self.dims.len()) {
            return Err(Error::validation(format!(
                "NIfTI output supports 3 or 4 dims, got {}",
                self.dims.len()
            )));
        }
        let expected: usize = self.dims.iter().product();
        if expected != self.data.len() {
            return Err(Error::validation(format!(
                "data length {} does not match dims {:?}",
                self.data.len(),
                self.dims
            )));
        }
        if self.dims.iter().any(|&d| d == 0 || d > i16::MAX as usize) {
            return Err(Error::validation(format!("dims {:?} out of range", self.dims)));
        }
        let dtype = self.data.dtype();
        if dtype == Dtype::I16 {
            return Err(Error::UnsupportedDtype("int16 output".into()));
        }

        let mut ext_meta = json!({
            "tag": META_TAG,
            "affine": self.affine.iter().flatten().copied().collect::<Vec<f64>>(),
            "voxel_size": self.voxel_size,
        });
        if let Some(meta) = &self.metadata {
            ext_meta["meta"] = meta.clone();
        }
        let mut ext_payload = serde_json::to_vec(&ext_meta)?;
        // esize counts its own 8-byte header and must be a multiple of 16.
        let esize = (ext_payload.len() + 8).div_ceil(16) * 16;
        ext_payload.resize(esize - 8, 0);
        let vox_offset = HEADER_SIZE + 4 + esize;

        let mut h = vec![0u8; HEADER_SIZE];
        put_i32(&mut h, 0, HEADER_SIZE as i32);
        h[38] = b'r'; // regular
        let mut dim = [1i16; 8];
        dim[0] = self.dims.len() as i16;
        for (i, &d) in self.dims.iter().enumerate() {
            dim[i + 1] = d as i16;
        }
        for (i, d) in dim.iter().enumerate() {
            put_i16(&mut h, 40 + 2 * i, *d);
        }
        put_i16(&mut h, 70, dtype.code());
        put_i16(&mut h, 72, (dtype.bytes() * 8) as i16);
        let mut pixdim = [1f32; 8];
        pixdim[0] = 1.0; // qfac
        for i in 0..3 {
            pixdim[i + 1] = self.voxel_size[i] as f32;
        }
        for (i, p) in pixdim.iter().enumerate() {
            put_f32(&mut h, 76 + 4 * i, *p);
        }
        put_f32(&mut h, 108, vox_offset as f32);
        put_f32(&mut h, 112, 1.0); // scl_slope
        put_f32(&mut h, 116, 0.0); // scl_inter
        h[123] = 2 | 8; // mm, s
        let descrip = b"physeg";
        h[148..148 + descrip.len()].copy_from_slice(descrip);
        put_i16(&mut h, 252, 0); // qform_code
        put_i16(&mut h, 254, 1); // sform_code: scanner
        for r in 0..3 {
            for c in 0..4 {
                put_f32(&mut h, 280 + 16 * r + 4 * c, self.affine[r][c] as f32);
            }
        }
        h[344..348].copy_from_slice(b"n+1\0");

        let mut out = Vec::with_capacity(vox_offset + self.data.len() * dtype.bytes());
        out.extend_from_slice(&h);
        out.extend_from_slice(&[1, 0, 0, 0]);
        out.extend_from_slice(&(esize as i32).to_le_bytes());
        out.extend_from_slice(&ECODE_COMMENT.to_le_bytes());
        out.extend_from_slice(&ext_payload);
        self.data.encode_le(&mut out);
        Ok(out)
    }
}

fn put_i16(h: &mut [u8], off: usize, v: i16) {
    h[off..off + 2].copy_from_slice(&v.to_le_bytes());
}
fn put_i32(h: &mut [u8], off: usize, v: i32) {
    h[off..off + 4].copy_from_slice(&v.to_le_bytes());
}
fn put_f32(h: &mut [u8], off: usize, v: f32) {
    h[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

struct Cursor<'a> {
    bytes: &'a [u8],
    big_endian: bool,
}

impl Cursor<'_> {
    fn arr<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.bytes[off..off + N]);
        if self.big_endian {
            a.reverse();
        }
        a
    }
    fn i16(&self, off: usize) -> i16 {
        i16::from_le_bytes(self.arr(off))
    }
    fn i32(&self, off: usize) -> i32 {
        i32::from_le_bytes(self.arr(off))
    }
    fn f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.arr(off))
    }
    fn f64(&self, off: usize) -> f64 {
        f64::from_le_bytes(self.arr(off))
    }
}

fn decode(bytes: &[u8]) -> std::result::Result<NiftiImage, String> {
    if bytes.len() < HEADER_SIZE {
        return Err(format!("file too small ({} bytes)", bytes.len()));
    }
    let big_endian = match i32::from_le_bytes(bytes[0..4].try_into().unwrap()) {
        348 => false,
        _ if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 => true,
        other => return Err(format!("sizeof_hdr is {other}, expected 348")),
    };
    if &bytes[344..347] != b"n+1" {
        return Err("missing n+1 magic (only single-file NIfTI-1 is supported)".into());
    }
    let c = Cursor { bytes, big_endian };

    let ndim = c.i16(40);
    if !(1..=7).contains(&ndim) {
        return Err(format!("dim[0] = {ndim} out of range"));
    }
    let mut dims = Vec::new();
    for i in 0..ndim as usize {
        let d = c.i16(42 + 2 * i);
        if d < 1 {
            return Err(format!("dim[{}] = {d}", i + 1));
        }
        dims.push(d as usize);
    }
    while dims.len() < 3 {
        dims.push(1);
    }
    // Trailing singleton dims beyond the fourth are dropped; real 5D+ data is not supported.
    while dims.len() > 4 && dims.last() == Some(&1) {
        dims.pop();
    }
    if dims.len() > 4 {
        return Err(format!("{}-D images are not supported", dims.len()));
    }
    if dims.len() == 4 && dims[3] == 1 {
        dims.pop();
    }

    let code = c.i16(70);
    let dtype = Dtype::from_code(code).ok_or_else(|| format!("unsupported datatype code {code}"))?;

    let mut voxel_size = [1.0; 3];
    for (i, v) in voxel_size.iter_mut().enumerate() {
        *v = c.f32(80 + 4 * i).abs() as f64;
    }
    let mut affine = [[0.0; 4]; 4];
    affine[3][3] = 1.0;
    if c.i16(254) > 0 {
        for (r, row) in affine.iter_mut().take(3).enumerate() {
            for (col, v) in row.iter_mut().enumerate() {
                *v = c.f32(280 + 16 * r + 4 * col) as f64;
            }
        }
    } else {
        for i in 0..3 {
            affine[i][i] = voxel_size[i];
        }
    }

    let vox_offset = c.f32(108) as usize;
    let mut metadata = None;
    if bytes.len() >= HEADER_SIZE + 4 && bytes[HEADER_SIZE] != 0 {
        let mut off = HEADER_SIZE + 4;
        while off + 8 <= vox_offset.min(bytes.len()) {
            let esize = c.i32(off) as usize;
            let ecode = c.i32(off + 4);
            if esize < 8 || off + esize > bytes.len() {
                break;
            }
            if ecode == ECODE_COMMENT {
                let payload = &bytes[off + 8..off + esize];
                let end = payload.iter().position(|&b| b == 0).unwrap_or(payload.len());
                if let Ok(v) = serde_json::from_slice::<Value>(&payload[..end]) {
                    if v.get("tag").and_then(Value::as_str) == Some(META_TAG) {
                        if let Some(a) = v.get("affine").and_then(Value::as_array) {
                            let vals: Vec<f64> = a.iter().filter_map(Value::as_f64).collect();
                            if vals.len() == 16 {
                                for (i, x) in vals.into_iter().enumerate() {
                                    affine[i / 4][i % 4] = x;
                                }
                            }
                        }
                        if let Some(a) = v.get("voxel_size").and_then(Value::as_array) {
                            let vals: Vec<f64> = a.iter().filter_map(Value::as_f64).collect();
                            if vals.len() == 3 {
                                voxel_size.copy_from_slice(&vals);
                            }
                        }
                        metadata = v.get("meta").cloned();
                    }
                }
            }
            off += esize;
        }
    }

    let n: usize = dims.iter().product();
    let nbytes = n * dtype.bytes();
    if vox_offset < HEADER_SIZE || vox_offset + nbytes > bytes.len() {
        return Err(format!(
            "data section truncated: need {} bytes at offset {vox_offset}, file has {}",
            nbytes,
            bytes.len()
        ));
    }
    let body = Cursor {
        bytes: &bytes[vox_offset..vox_offset + nbytes],
        big_endian,
    };
    let mut data = match dtype {
        Dtype::U8 => VoxelData::U8(body.bytes.to_vec()),
        Dtype::I16 => VoxelData::I16((0..n).map(|i| body.i16(2 * i)).collect()),
        Dtype::F32 => VoxelData::F32((0..n).map(|i| body.f32(4 * i)).collect()),
        Dtype::F64 => VoxelData::F64((0..n).map(|i| body.f64(8 * i)).collect()),
    };

    let slope = c.f32(112);
    let inter = c.f32(116);
    if slope.is_finite() && slope != 0.0 && (slope != 1.0 || inter != 0.0) {
        let (s, b) = (slope as f64, inter as f64);
        data = VoxelData::F64(data.to_f64().into_iter().map(|x| x * s + b).collect());
    }

    Ok(NiftiImage {
        dims,
        voxel_size,
        affine,
        data,
        metadata,
    })
}
