//! Single-file NIfTI-1 (`.nii`) reading and writing.
//!
//! Supported voxel types are uint8, int16 and float32. Gzip-compressed files
//! are rejected; inflate them before calling [`nifti_read`].

use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
const MAGIC: &[u8; 4] = b"n+1\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    F32,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::F32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Datatype::U8),
            4 => Some(Datatype::I16),
            16 => Some(Datatype::F32),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::F32 => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

/// Orientation fields, carried through unchanged.
#[derive(Clone, Debug, PartialEq)]
pub struct Orientation {
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
}

impl Default for Orientation {
    fn default() -> Self {
        Orientation {
            qform_code: 0,
            sform_code: 0,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow: [[0.0; 4]; 3],
        }
    }
}

/// A 3D scalar grid. `data` is x-fastest (`[z][y][x]` row-major) and holds
/// scaled values.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    /// `[nx, ny, nz]`
    pub dims: [usize; 3],
    /// mm per voxel along x, y, z.
    pub spacing: [f64; 3],
    pub data: Vec<f32>,
    pub datatype: Datatype,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub orientation: Orientation,
    pub xyzt_units: u8,
    pub descrip: String,
}

impl Volume {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], data: Vec<f32>, datatype: Datatype) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::Data(format!("volume dims {dims:?} must be positive")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!("voxel spacing {spacing:?} must be positive")));
        }
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Data(format!("{} voxels for dims {dims:?}", data.len())));
        }
        Ok(Volume {
            dims,
            spacing,
            data,
            datatype,
            scl_slope: 0.0,
            scl_inter: 0.0,
            orientation: Orientation::default(),
            xyzt_units: 2, // millimetres
            descrip: String::new(),
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Spatial dims in tensor order `[z, y, x]`.
    pub fn zyx(&self) -> [usize; 3] {
        [self.dims[2], self.dims[1], self.dims[0]]
    }

    /// Labels as integers (for masks).
    pub fn labels(&self) -> Vec<u8> {
        self.data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect()
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    endian: Endian,
}

impl Cursor<'_> {
    fn bytes<const N: usize>(&self, off: usize, field: &str) -> Result<[u8; N]> {
        let s = self
            .buf
            .get(off..off + N)
            .ok_or_else(|| Error::Format(format!("truncated NIfTI header reading {field} at offset {off}")))?;
        let mut a: [u8; N] = s.try_into().expect("length checked");
        if self.endian == Endian::Big {
            a.reverse();
        }
        Ok(a)
    }

    fn i16(&self, off: usize, field: &str) -> Result<i16> {
        Ok(i16::from_le_bytes(self.bytes(off, field)?))
    }

    fn f32(&self, off: usize, field: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes(off, field)?))
    }
}

pub fn nifti_read(bytes: &[u8]) -> Result<Volume> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        return Err(Error::Format("gzip-compressed NIfTI is not supported; decompress it first".into()));
    }
    if bytes.len() < HEADER_SIZE {
        return Err(Error::Format(format!("file of {} bytes is shorter than a NIfTI-1 header", bytes.len())));
    }
    let endian = match (
        i32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")),
        i32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes")),
    ) {
        (348, _) => Endian::Little,
        (_, 348) => Endian::Big,
        (v, _) => return Err(Error::Format(format!("sizeof_hdr at offset 0 is {v}, expected 348"))),
    };
    if &bytes[344..348] != MAGIC {
        return Err(Error::Format(format!(
            "magic at offset 344 is {:?}, expected \"n+1\\0\"",
            &bytes[344..348]
        )));
    }
    let c = Cursor { buf: bytes, endian };
    let ndim = c.i16(40, "dim[0]")?;
    if !(1..=7).contains(&ndim) {
        return Err(Error::Format(format!("dim[0] at offset 40 is {ndim}, expected 1..=7")));
    }
    let mut dims = [1usize; 3];
    for i in 0..ndim as usize {
        let d = c.i16(42 + 2 * i, "dim")?;
        if d < 1 {
            return Err(Error::Format(format!("dim[{}] at offset {} is {d}", i + 1, 42 + 2 * i)));
        }
        if i < 3 {
            dims[i] = d as usize;
        } else if d != 1 {
            return Err(Error::Format(format!("dim[{}] = {d}: only 3D volumes are supported", i + 1)));
        }
    }
    let code = c.i16(70, "datatype")?;
    let datatype =
        Datatype::from_code(code).ok_or_else(|| Error::Format(format!("unsupported datatype {code} at offset 70")))?;
    let mut spacing = [1.0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let v = c.f32(80 + 4 * i, "pixdim")?.abs() as f64;
        if v > 0.0 && v.is_finite() {
            *s = v;
        }
    }
    let vox_offset = c.f32(108, "vox_offset")?;
    if !(vox_offset >= HEADER_SIZE as f32) {
        return Err(Error::Format(format!("vox_offset {vox_offset} at offset 108 is inside the header")));
    }
    let scl_slope = c.f32(112, "scl_slope")?;
    let scl_inter = c.f32(116, "scl_inter")?;
    let xyzt_units = bytes[123];
    let descrip_raw = &bytes[148..228];
    let end = descrip_raw.iter().position(|&b| b == 0).unwrap_or(80);
    let descrip = String::from_utf8_lossy(&descrip_raw[..end]).into_owned();
    let mut orientation = Orientation {
        qform_code: c.i16(252, "qform_code")?,
        sform_code: c.i16(254, "sform_code")?,
        ..Default::default()
    };
    for i in 0..3 {
        orientation.quatern[i] = c.f32(256 + 4 * i, "quatern")?;
        orientation.qoffset[i] = c.f32(268 + 4 * i, "qoffset")?;
        for j in 0..4 {
            orientation.srow[i][j] = c.f32(280 + 16 * i + 4 * j, "srow")?;
        }
    }

    let n: usize = dims.iter().product();
    let start = vox_offset as usize;
    let len = n * datatype.bytes();
    let raw = bytes.get(start..start + len).ok_or_else(|| {
        Error::Format(format!(
            "voxel data truncated: need {len} bytes at offset {start}, file has {}",
            bytes.len()
        ))
    })?;
    let dc = Cursor { buf: raw, endian };
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        let v = match datatype {
            Datatype::U8 => raw[i] as f32,
            Datatype::I16 => dc.i16(2 * i, "voxel")? as f32,
            Datatype::F32 => dc.f32(4 * i, "voxel")?,
        };
        data.push(v);
    }
    if scl_slope != 0.0 && scl_slope.is_finite() {
        for v in &mut data {
            *v = *v * scl_slope + scl_inter;
        }
    }
    Ok(Volume { dims, spacing, data, datatype, scl_slope, scl_inter, orientation, xyzt_units, descrip })
}

struct Out {
    buf: Vec<u8>,
    endian: Endian,
}

impl Out {
    fn put(&mut self, off: usize, mut b: Vec<u8>) {
        if self.endian == Endian::Big {
            b.reverse();
        }
        self.buf[off..off + b.len()].copy_from_slice(&b);
    }
    fn i16(&mut self, off: usize, v: i16) {
        self.put(off, v.to_le_bytes().to_vec())
    }
    fn i32(&mut self, off: usize, v: i32) {
        self.put(off, v.to_le_bytes().to_vec())
    }
    fn f32(&mut self, off: usize, v: f32) {
        self.put(off, v.to_le_bytes().to_vec())
    }
}

pub fn nifti_write(v: &Volume) -> Result<Vec<u8>> {
    nifti_write_endian(v, Endian::Little)
}

/// Writes a canonical header: fields the reader does not keep are zero.
pub fn nifti_write_endian(v: &Volume, endian: Endian) -> Result<Vec<u8>> {
    let n = v.numel();
    let mut o = Out { buf: vec![0u8; VOX_OFFSET + n * v.datatype.bytes()], endian };
    o.i32(0, HEADER_SIZE as i32);
    o.buf[38] = b'r';
    o.i16(40, 3);
    for i in 0..3 {
        let d = i16::try_from(v.dims[i]).map_err(|_| Error::Data(format!("dim {} too large for NIfTI-1", v.dims[i])))?;
        o.i16(42 + 2 * i, d);
    }
    for i in 3..7 {
        o.i16(42 + 2 * i, 1);
    }
    o.i16(70, v.datatype.code());
    o.i16(72, (v.datatype.bytes() * 8) as i16);
    o.f32(76, 1.0); // qfac
    for i in 0..3 {
        o.f32(80 + 4 * i, v.spacing[i] as f32);
    }
    o.f32(108, VOX_OFFSET as f32);
    o.f32(112, v.scl_slope);
    o.f32(116, v.scl_inter);
    o.buf[123] = v.xyzt_units;
    let d = v.descrip.as_bytes();
    let dl = d.len().min(79);
    o.buf[148..148 + dl].copy_from_slice(&d[..dl]);
    o.i16(252, v.orientation.qform_code);
    o.i16(254, v.orientation.sform_code);
    for i in 0..3 {
        o.f32(256 + 4 * i, v.orientation.quatern[i]);
        o.f32(268 + 4 * i, v.orientation.qoffset[i]);
        for j in 0..4 {
            o.f32(280 + 16 * i + 4 * j, v.orientation.srow[i][j]);
        }
    }
    o.buf[344..348].copy_from_slice(MAGIC);

    let scaled = v.scl_slope != 0.0 && v.scl_slope.is_finite();
    let stored = |x: f32| if scaled { (x - v.scl_inter) / v.scl_slope } else { x };
    let range_err = |i: usize, x: f32| Error::Data(format!("voxel {i} value {x} does not fit {:?}", v.datatype));
    for (i, &x) in v.data.iter().enumerate() {
        let s = stored(x);
        let off = VOX_OFFSET + i * v.datatype.bytes();
        match v.datatype {
            Datatype::U8 => {
                let r = s.round();
                if !(0.0..=255.0).contains(&r) {
                    return Err(range_err(i, x));
                }
                o.buf[off] = r as u8;
            }
            Datatype::I16 => {
                let r = s.round();
                if !(i16::MIN as f32..=i16::MAX as f32).contains(&r) {
                    return Err(range_err(i, x));
                }
                o.i16(off, r as i16);
            }
            Datatype::F32 => o.f32(off, s),
        }
    }
    Ok(o.buf)
}
