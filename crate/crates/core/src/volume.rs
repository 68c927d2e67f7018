//! Core containers: real 3D volumes, complex 2D fields, and the `.xptv`
//! binary container they are stored in.
//!
//! Axis order is `(z, y, x)` row-major everywhere, `z` being the beam/depth
//! axis. Header layout (little-endian, 64 bytes):
//!
//! | bytes  | content                                   |
//! |--------|-------------------------------------------|
//! | 0..4   | magic `XPTV`                              |
//! | 4      | version (1)                               |
//! | 5      | dtype (0 f32, 1 f64, 2 complex64, 3 u8)   |
//! | 6      | kind (0 phase, 1 label, 2 intensity, 3 psd, 4 field) |
//! | 7      | ndim                                      |
//! | 8..32  | dims z, y, x as u64                       |
//! | 32..56 | pitch z, y, x in nm as f64                |
//! | 56..64 | reserved, zero                            |

use std::fs;
use std::io::Write;
use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"XPTV";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VolumeKind {
    Phase,
    Label,
    Intensity,
    Psd,
    /// Complex field stacks (probe modes). Only produced by the complex writer.
    Field,
}

impl VolumeKind {
    fn code(self) -> u8 {
        match self {
            VolumeKind::Phase => 0,
            VolumeKind::Label => 1,
            VolumeKind::Intensity => 2,
            VolumeKind::Psd => 3,
            VolumeKind::Field => 4,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => VolumeKind::Phase,
            1 => VolumeKind::Label,
            2 => VolumeKind::Intensity,
            3 => VolumeKind::Psd,
            4 => VolumeKind::Field,
            other => return Err(Error::UnsupportedKind(other)),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
    Complex64,
    U8,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
            Dtype::Complex64 => 2,
            Dtype::U8 => 3,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        Ok(match code {
            0 => Dtype::F32,
            1 => Dtype::F64,
            2 => Dtype::Complex64,
            3 => Dtype::U8,
            other => return Err(Error::UnsupportedDtype(other)),
        })
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
            Dtype::Complex64 => 8,
            Dtype::U8 => 1,
        }
    }
}

/// Real scalar field on a regular 3D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    pitch: [f64; 3],
    kind: VolumeKind,
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], pitch: [f64; 3], kind: VolumeKind, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("all dimensions must be >= 1, got {dims:?}")));
        }
        let len = dims[0] * dims[1] * dims[2];
        if data.len() != len {
            return Err(Error::Shape(format!(
                "data length {} does not match dims {dims:?}",
                data.len()
            )));
        }
        if pitch.iter().any(|&p| !(p > 0.0 && p.is_finite())) {
            return Err(Error::InvalidArgument(format!("pitch must be positive, got {pitch:?}")));
        }
        if kind == VolumeKind::Label && data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument("label volumes hold only 0 and 1".into()));
        }
        Ok(Volume { dims, pitch, kind, data })
    }

    pub fn zeros(dims: [usize; 3], pitch: [f64; 3], kind: VolumeKind) -> Result<Self> {
        let len = dims.iter().product();
        Self::new(dims, pitch, kind, vec![0.0; len])
    }

    /// Builds a volume by evaluating `f(z, y, x)` at every voxel.
    pub fn from_fn(
        dims: [usize; 3],
        pitch: [f64; 3],
        kind: VolumeKind,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    data.push(f(z, y, x));
                }
            }
        }
        Self::new(dims, pitch, kind, data)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn pitch(&self) -> [f64; 3] {
        self.pitch
    }

    pub fn kind(&self) -> VolumeKind {
        self.kind
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f64 {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f64) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    /// One xy-plane at depth `z`.
    pub fn layer(&self, z: usize) -> &[f64] {
        let n = self.dims[1] * self.dims[2];
        &self.data[z * n..(z + 1) * n]
    }

    /// Same grid, different kind and values.
    pub fn with_data(&self, kind: VolumeKind, data: Vec<f64>) -> Result<Self> {
        Self::new(self.dims, self.pitch, kind, data)
    }

    pub fn map(&self, kind: VolumeKind, mut f: impl FnMut(f64) -> f64) -> Result<Self> {
        self.with_data(kind, self.data.iter().map(|&v| f(v)).collect())
    }
}

/// Complex field on a 2D grid with square pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField2D {
    ny: usize,
    nx: usize,
    pitch: f64,
    data: Vec<Complex64>,
}

impl ComplexField2D {
    pub fn new(ny: usize, nx: usize, pitch: f64, data: Vec<Complex64>) -> Result<Self> {
        if ny == 0 || nx == 0 {
            return Err(Error::Shape(format!("field dims must be >= 1, got {ny}x{nx}")));
        }
        if data.len() != ny * nx {
            return Err(Error::Shape(format!(
                "field data length {} does not match {ny}x{nx}",
                data.len()
            )));
        }
        if !(pitch > 0.0 && pitch.is_finite()) {
            return Err(Error::InvalidArgument(format!("pitch must be positive, got {pitch}")));
        }
        if data.iter().any(|c| !c.re.is_finite() || !c.im.is_finite()) {
            return Err(Error::NonFinite("complex field"));
        }
        Ok(ComplexField2D { ny, nx, pitch, data })
    }

    pub fn filled(ny: usize, nx: usize, pitch: f64, value: Complex64) -> Result<Self> {
        Self::new(ny, nx, pitch, vec![value; ny * nx])
    }

    pub fn from_fn(
        ny: usize,
        nx: usize,
        pitch: f64,
        mut f: impl FnMut(usize, usize) -> Complex64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(ny * nx);
        for y in 0..ny {
            for x in 0..nx {
                data.push(f(y, x));
            }
        }
        Self::new(ny, nx, pitch, data)
    }

    pub fn ny(&self) -> usize {
        self.ny
    }

    pub fn nx(&self) -> usize {
        self.nx
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.ny, self.nx)
    }

    pub fn pitch(&self) -> f64 {
        self.pitch
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Complex64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> Complex64 {
        self.data[y * self.nx + x]
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }

    pub fn same_grid(&self, other: &ComplexField2D) -> bool {
        self.ny == other.ny && self.nx == other.nx
    }
}

struct Header {
    dtype: Dtype,
    kind: VolumeKind,
    dims: [usize; 3],
    pitch: [f64; 3],
}

fn encode_header(h: &Header) -> [u8; HEADER_LEN] {
    let mut buf = [0u8; HEADER_LEN];
    buf[0..4].copy_from_slice(MAGIC);
    buf[4] = VERSION;
    buf[5] = h.dtype.code();
    buf[6] = h.kind.code();
    buf[7] = 3;
    for (i, &d) in h.dims.iter().enumerate() {
        buf[8 + 8 * i..16 + 8 * i].copy_from_slice(&(d as u64).to_le_bytes());
    }
    for (i, &p) in h.pitch.iter().enumerate() {
        buf[32 + 8 * i..40 + 8 * i].copy_from_slice(&p.to_le_bytes());
    }
    buf
}

fn decode_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 4 || &bytes[0..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        return Err(Error::BadMagic { found });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[4] != VERSION {
        return Err(Error::UnsupportedVersion(bytes[4]));
    }
    let dtype = Dtype::from_code(bytes[5])?;
    let kind = VolumeKind::from_code(bytes[6])?;
    let ndim = bytes[7];
    if !(1..=3).contains(&ndim) {
        return Err(Error::Shape(format!("ndim {ndim} outside 1..=3")));
    }
    let mut dims = [0usize; 3];
    let mut pitch = [0f64; 3];
    for i in 0..3 {
        let mut d = [0u8; 8];
        d.copy_from_slice(&bytes[8 + 8 * i..16 + 8 * i]);
        dims[i] = usize::try_from(u64::from_le_bytes(d))
            .map_err(|_| Error::Shape("dimension exceeds address space".into()))?;
        let mut p = [0u8; 8];
        p.copy_from_slice(&bytes[32 + 8 * i..40 + 8 * i]);
        pitch[i] = f64::from_le_bytes(p);
    }
    Ok(Header { dtype, kind, dims, pitch })
}

fn payload<'a>(bytes: &'a [u8], h: &Header) -> Result<&'a [u8]> {
    let count = h
        .dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Shape("dimension product overflows".into()))?;
    let expected = count * h.dtype.width();
    let body = &bytes[HEADER_LEN..];
    if body.len() < expected {
        return Err(Error::Truncated {
            expected: HEADER_LEN + expected,
            found: bytes.len(),
        });
    }
    Ok(&body[..expected])
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(bytes).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Encodes a volume into container bytes. Labels go to disk as u8, everything
/// else as f32.
pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let dtype = if v.kind == VolumeKind::Label {
        Dtype::U8
    } else {
        Dtype::F32
    };
    encode_volume_as(v, dtype)
}

pub fn encode_volume_as(v: &Volume, dtype: Dtype) -> Vec<u8> {
    let header = Header {
        dtype,
        kind: v.kind,
        dims: v.dims,
        pitch: v.pitch,
    };
    let mut out = Vec::with_capacity(HEADER_LEN + v.len() * dtype.width());
    out.extend_from_slice(&encode_header(&header));
    match dtype {
        Dtype::F32 => v.data.iter().for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
        Dtype::F64 => v.data.iter().for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
        Dtype::U8 => v.data.iter().for_each(|&x| out.push(x.round().clamp(0.0, 255.0) as u8)),
        Dtype::Complex64 => v.data.iter().for_each(|&x| {
            out.extend_from_slice(&(x as f32).to_le_bytes());
            out.extend_from_slice(&0f32.to_le_bytes());
        }),
    }
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let h = decode_header(bytes)?;
    let body = payload(bytes, &h)?;
    let data: Vec<f64> = match h.dtype {
        Dtype::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect(),
        Dtype::U8 => body.iter().map(|&b| b as f64).collect(),
        Dtype::Complex64 => return Err(Error::UnsupportedDtype(Dtype::Complex64.code())),
    };
    Volume::new(h.dims, h.pitch, h.kind, data)
}

pub fn write_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume(v))
}

pub fn write_volume_as(v: &Volume, path: impl AsRef<Path>, dtype: Dtype) -> Result<()> {
    write_bytes(path.as_ref(), &encode_volume_as(v, dtype))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

/// Writes a stack of equally sized complex fields as a complex64 container
/// with dims `(count, ny, nx)`.
pub fn write_complex_stack(fields: &[ComplexField2D], path: impl AsRef<Path>) -> Result<()> {
    let first = fields
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty field stack".into()))?;
    if fields.iter().any(|f| !f.same_grid(first)) {
        return Err(Error::Shape("fields in a stack must share dimensions".into()));
    }
    let header = Header {
        dtype: Dtype::Complex64,
        kind: VolumeKind::Field,
        dims: [fields.len(), first.ny, first.nx],
        pitch: [1.0, first.pitch, first.pitch],
    };
    let mut out = Vec::with_capacity(HEADER_LEN + fields.len() * first.data.len() * 8);
    out.extend_from_slice(&encode_header(&header));
    for f in fields {
        for c in &f.data {
            out.extend_from_slice(&(c.re as f32).to_le_bytes());
            out.extend_from_slice(&(c.im as f32).to_le_bytes());
        }
    }
    write_bytes(path.as_ref(), &out)
}

pub fn read_complex_stack(path: impl AsRef<Path>) -> Result<Vec<ComplexField2D>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let h = decode_header(&bytes)?;
    if h.dtype != Dtype::Complex64 {
        return Err(Error::UnsupportedDtype(h.dtype.code()));
    }
    let body = payload(&bytes, &h)?;
    let [count, ny, nx] = h.dims;
    let values: Vec<Complex64> = body
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]) as f64;
            Complex64::new(re, im)
        })
        .collect();
    values
        .chunks_exact(ny * nx)
        .take(count)
        .map(|chunk| ComplexField2D::new(ny, nx, h.pitch[2], chunk.to_vec()))
        .collect()
}
