//! Minimal NIfTI-1 single-file reader and writer (`.nii` / `.nii.gz`).
//!
//! Only 3D volumes with uint8, int16, int32 or float32 voxels are supported.
//! Orientation is taken as-is from the voxel axes; the origin comes from the
//! qoffset fields and spacing from `pixdim[1..4]`.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{KevsError, Result};
use crate::grid::{BinaryMask, GridGeometry, LabelMap, ScalarVolume};
use crate::schema::LabelSchema;

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;
const MAGIC_SINGLE: &[u8; 4] = b"n+1\0";

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;

const NIFTI_UNITS_MM: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Endian {
    Little,
    Big,
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl HeaderReader<'_> {
    fn arr<const N: usize>(&self, off: usize) -> [u8; N] {
        self.bytes[off..off + N].try_into().expect("header slice")
    }

    fn i16(&self, off: usize) -> i16 {
        match self.endian {
            Endian::Little => i16::from_le_bytes(self.arr(off)),
            Endian::Big => i16::from_be_bytes(self.arr(off)),
        }
    }

    fn f32(&self, off: usize) -> f32 {
        match self.endian {
            Endian::Little => f32::from_le_bytes(self.arr(off)),
            Endian::Big => f32::from_be_bytes(self.arr(off)),
        }
    }
}

/// Voxel payload in its on-disk type.
enum RawData {
    U8(Vec<u8>),
    I16(Vec<i16>),
    I32(Vec<i32>),
    F32(Vec<f32>),
}

struct RawImage {
    geometry: GridGeometry,
    slope: f32,
    inter: f32,
    data: RawData,
}

impl RawImage {
    fn has_scaling(&self) -> bool {
        self.slope != 0.0 && !(self.slope == 1.0 && self.inter == 0.0)
    }

    fn scaled(&self, raw: f64) -> f64 {
        if self.has_scaling() {
            raw * self.slope as f64 + self.inter as f64
        } else {
            raw
        }
    }

    fn to_f32(&self) -> Vec<f32> {
        match &self.data {
            RawData::F32(v) if !self.has_scaling() => v.clone(),
            RawData::F32(v) => v.iter().map(|&x| self.scaled(x as f64) as f32).collect(),
            RawData::U8(v) => v.iter().map(|&x| self.scaled(x as f64) as f32).collect(),
            RawData::I16(v) => v.iter().map(|&x| self.scaled(x as f64) as f32).collect(),
            RawData::I32(v) => v.iter().map(|&x| self.scaled(x as f64) as f32).collect(),
        }
    }

    fn to_labels(&self) -> Result<Vec<u32>> {
        let conv = |i: usize, x: f64| -> Result<u32> {
            let v = self.scaled(x);
            if v < 0.0 || v.fract() != 0.0 || v > u32::MAX as f64 {
                return Err(KevsError::Nifti(format!(
                    "voxel {i} holds {v}, not a non-negative integer label"
                )));
            }
            Ok(v as u32)
        };
        match &self.data {
            RawData::U8(v) if !self.has_scaling() => Ok(v.iter().map(|&x| x as u32).collect()),
            RawData::U8(v) => v.iter().enumerate().map(|(i, &x)| conv(i, x as f64)).collect(),
            RawData::I16(v) => v.iter().enumerate().map(|(i, &x)| conv(i, x as f64)).collect(),
            RawData::I32(v) => v.iter().enumerate().map(|(i, &x)| conv(i, x as f64)).collect(),
            RawData::F32(v) => v.iter().enumerate().map(|(i, &x)| conv(i, x as f64)).collect(),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| KevsError::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| KevsError::Nifti(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn decode(bytes: &[u8]) -> Result<RawImage> {
    if bytes.len() < HEADER_SIZE {
        return Err(KevsError::Nifti(format!(
            "file has {} bytes, shorter than the 348-byte header",
            bytes.len()
        )));
    }
    let sizeof_hdr: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    let endian = if i32::from_le_bytes(sizeof_hdr) == HEADER_SIZE as i32 {
        Endian::Little
    } else if i32::from_be_bytes(sizeof_hdr) == HEADER_SIZE as i32 {
        Endian::Big
    } else {
        return Err(KevsError::Nifti("sizeof_hdr is not 348".into()));
    };
    if &bytes[344..348] != MAGIC_SINGLE {
        return Err(KevsError::Nifti(format!(
            "magic {:?} is not single-file NIfTI-1 \"n+1\"",
            String::from_utf8_lossy(&bytes[344..348])
        )));
    }
    let h = HeaderReader { bytes, endian };

    let ndim = h.i16(40);
    if !(3..=7).contains(&ndim) {
        return Err(KevsError::Nifti(format!("expected a 3D volume, dim[0] = {ndim}")));
    }
    let dim: Vec<i16> = (0..8).map(|k| h.i16(40 + 2 * k)).collect();
    if dim[1..=3].iter().any(|&d| d < 1) {
        return Err(KevsError::Nifti(format!("non-positive dims {:?}", &dim[1..=3])));
    }
    if dim[4..=ndim as usize].iter().any(|&d| d > 1) {
        return Err(KevsError::Nifti(format!(
            "expected a 3D volume, got dims {:?}",
            &dim[1..=ndim as usize]
        )));
    }
    let dims = [dim[1] as usize, dim[2] as usize, dim[3] as usize];

    let datatype = h.i16(70);
    let pixdim: Vec<f32> = (0..4).map(|k| h.f32(76 + 4 * k)).collect();
    let vox_offset = h.f32(108);
    let slope = h.f32(112);
    let inter = h.f32(116);
    let qoffset = [h.f32(268), h.f32(272), h.f32(276)];

    let finite = pixdim[1..4].iter().chain(&qoffset).chain([&vox_offset, &slope, &inter]);
    if finite.into_iter().any(|v| !v.is_finite()) {
        return Err(KevsError::Nifti("non-finite pixdim, vox_offset, scaling or qoffset field".into()));
    }
    let spacing = [pixdim[1].abs() as f64, pixdim[2].abs() as f64, pixdim[3].abs() as f64];
    let geometry = GridGeometry::new(dims, spacing, qoffset.map(|v| v as f64))?;

    if vox_offset < HEADER_SIZE as f32 || vox_offset.fract() != 0.0 {
        return Err(KevsError::Nifti(format!("invalid vox_offset {vox_offset}")));
    }
    let offset = vox_offset as usize;
    let n = geometry.len();
    let width = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        other => return Err(KevsError::UnsupportedDatatype(other)),
    };
    let payload = bytes
        .get(offset..offset + n * width)
        .ok_or_else(|| KevsError::Nifti(format!("truncated data: need {} bytes after offset {offset}", n * width)))?;

    macro_rules! words {
        ($t:ty, $w:expr) => {
            payload
                .chunks_exact($w)
                .map(|c| {
                    let a: [u8; $w] = c.try_into().expect("chunk");
                    match endian {
                        Endian::Little => <$t>::from_le_bytes(a),
                        Endian::Big => <$t>::from_be_bytes(a),
                    }
                })
                .collect()
        };
    }
    let data = match datatype {
        DT_UINT8 => RawData::U8(payload.to_vec()),
        DT_INT16 => RawData::I16(words!(i16, 2)),
        DT_INT32 => RawData::I32(words!(i32, 4)),
        _ => RawData::F32(words!(f32, 4)),
    };
    Ok(RawImage {
        geometry,
        slope,
        inter,
        data,
    })
}

/// Reads a CT volume; `scl_slope`/`scl_inter` are applied.
pub fn read_scalar(path: impl AsRef<Path>) -> Result<ScalarVolume> {
    let img = decode(&read_bytes(path.as_ref())?)?;
    let data = img.to_f32();
    ScalarVolume::new(img.geometry, data)
}

/// Reads raw integer labels without attaching a schema.
pub fn read_label_data(path: impl AsRef<Path>) -> Result<(GridGeometry, Vec<u32>)> {
    let img = decode(&read_bytes(path.as_ref())?)?;
    let labels = img.to_labels()?;
    Ok((img.geometry, labels))
}

pub fn read_labels(path: impl AsRef<Path>, schema: LabelSchema) -> Result<LabelMap> {
    let (geometry, data) = read_label_data(path)?;
    LabelMap::new(geometry, data, schema)
}

/// Reads a mask; any nonzero voxel is foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<BinaryMask> {
    let (geometry, data) = read_label_data(path)?;
    BinaryMask::new(geometry, data.into_iter().map(|v| v != 0).collect())
}

fn encode_header(geometry: &GridGeometry, datatype: i16, bitpix: i16) -> Result<Vec<u8>> {
    let mut h = vec![0u8; DATA_OFFSET];
    let put_i16 = |h: &mut [u8], off: usize, v: i16| h[off..off + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], off: usize, v: f32| h[off..off + 4].copy_from_slice(&v.to_le_bytes());

    h[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    h[38] = b'r';
    let dims = geometry.dims();
    let mut dim = [3i16, 1, 1, 1, 1, 1, 1, 1];
    for (k, &d) in dims.iter().enumerate() {
        dim[k + 1] = i16::try_from(d)
            .map_err(|_| KevsError::Nifti(format!("dimension {d} exceeds the NIfTI-1 limit")))?;
    }
    for (k, d) in dim.iter().enumerate() {
        put_i16(&mut h, 40 + 2 * k, *d);
    }
    put_i16(&mut h, 70, datatype);
    put_i16(&mut h, 72, bitpix);
    let sp = geometry.spacing();
    let pixdim = [1.0f32, sp[0] as f32, sp[1] as f32, sp[2] as f32, 1.0, 1.0, 1.0, 1.0];
    for (k, p) in pixdim.iter().enumerate() {
        put_f32(&mut h, 76 + 4 * k, *p);
    }
    put_f32(&mut h, 108, DATA_OFFSET as f32);
    put_f32(&mut h, 112, 1.0);
    put_f32(&mut h, 116, 0.0);
    h[123] = NIFTI_UNITS_MM;
    let descrip = b"kevs";
    h[148..148 + descrip.len()].copy_from_slice(descrip);
    // qform and sform both encode the axis-aligned grid.
    put_i16(&mut h, 252, 1);
    put_i16(&mut h, 254, 1);
    let o = geometry.origin();
    for k in 0..3 {
        put_f32(&mut h, 268 + 4 * k, o[k] as f32);
        let row = 280 + 16 * k;
        put_f32(&mut h, row + 4 * k, sp[k] as f32);
        put_f32(&mut h, row + 12, o[k] as f32);
    }
    h[344..348].copy_from_slice(MAGIC_SINGLE);
    Ok(h)
}

fn write_bytes(path: &Path, header: Vec<u8>, payload: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| KevsError::io(path, e))?;
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        let mut enc = GzEncoder::new(std::io::BufWriter::new(file), Compression::default());
        enc.write_all(&header)
            .and_then(|_| enc.write_all(payload))
            .and_then(|_| enc.finish())
            .and_then(|mut w| w.flush())
    } else {
        let mut w = std::io::BufWriter::new(file);
        w.write_all(&header).and_then(|_| w.write_all(payload)).and_then(|_| w.flush())
    };
    res.map_err(|e| KevsError::io(path, e))
}

/// Writes float32 voxels with identity scaling.
pub fn write_scalar(volume: &ScalarVolume, path: impl AsRef<Path>) -> Result<()> {
    let header = encode_header(volume.geometry(), DT_FLOAT32, 32)?;
    let payload: Vec<u8> = volume.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(path.as_ref(), header, &payload)
}

fn write_label_values(geometry: &GridGeometry, data: &[u32], path: &Path) -> Result<()> {
    let max = data.iter().copied().max().unwrap_or(0);
    let (header, payload) = if max <= u8::MAX as u32 {
        (encode_header(geometry, DT_UINT8, 8)?, data.iter().map(|&v| v as u8).collect())
    } else if max <= i16::MAX as u32 {
        (
            encode_header(geometry, DT_INT16, 16)?,
            data.iter().flat_map(|&v| (v as i16).to_le_bytes()).collect(),
        )
    } else if max <= i32::MAX as u32 {
        (
            encode_header(geometry, DT_INT32, 32)?,
            data.iter().flat_map(|&v| (v as i32).to_le_bytes()).collect::<Vec<u8>>(),
        )
    } else {
        return Err(KevsError::Nifti(format!("label {max} does not fit in int32")));
    };
    write_bytes(path, header, &payload)
}

/// Writes labels using the narrowest integer type that holds them.
pub fn write_labels(labels: &LabelMap, path: impl AsRef<Path>) -> Result<()> {
    write_label_values(labels.geometry(), labels.data(), path.as_ref())
}

/// Writes a uint8 0/1 mask.
pub fn write_mask(mask: &BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let header = encode_header(mask.geometry(), DT_UINT8, 8)?;
    let payload: Vec<u8> = mask.bits().iter().map(|&b| b as u8).collect();
    write_bytes(path.as_ref(), header, &payload)
}
