//! Minimal single-file NIfTI-1 (`.nii` / `.nii.gz`) reader and writer.
//!
//! Only what the pipeline needs: little-endian 3D volumes stored as uint8,
//! int16 or float32. Everything is converted to `f32` on load. The raw
//! 348-byte header is retained so predictions can be written back with the
//! geometry of the reference input.

use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::grid::Dims;

const HEADER_SIZE: usize = 348;
const DATA_OFFSET: usize = 352;

/// On-disk element types accepted by the reader.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataType {
    U8,
    I16,
    F32,
}

impl DataType {
    fn code(self) -> i16 {
        match self {
            DataType::U8 => 2,
            DataType::I16 => 4,
            DataType::F32 => 16,
        }
    }

    fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(DataType::U8),
            4 => Some(DataType::I16),
            16 => Some(DataType::F32),
            _ => None,
        }
    }

    fn bytes(self) -> usize {
        match self {
            DataType::U8 => 1,
            DataType::I16 => 2,
            DataType::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    raw: Vec<u8>,
}

impl NiftiHeader {
    /// A fresh header for a 3D volume with the given voxel spacing.
    pub fn new(dims: Dims, spacing: [f32; 3], datatype: DataType) -> Self {
        let mut raw = vec![0u8; HEADER_SIZE];
        raw[0..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
        raw[38] = b'r'; // regular
        let mut h = NiftiHeader { raw };
        h.put_f32(76, 1.0); // qfac
        h.set_dims(dims);
        h.set_spacing(spacing);
        h.set_datatype(datatype);
        h.raw[123] = 2; // xyzt_units: mm
        h.raw[344..348].copy_from_slice(b"n+1\0");
        h
    }

    fn get_i16(&self, off: usize) -> i16 {
        i16::from_le_bytes([self.raw[off], self.raw[off + 1]])
    }

    fn get_f32(&self, off: usize) -> f32 {
        f32::from_le_bytes(self.raw[off..off + 4].try_into().unwrap())
    }

    fn put_i16(&mut self, off: usize, v: i16) {
        self.raw[off..off + 2].copy_from_slice(&v.to_le_bytes());
    }

    fn put_f32(&mut self, off: usize, v: f32) {
        self.raw[off..off + 4].copy_from_slice(&v.to_le_bytes());
    }

    pub fn dims(&self) -> Dims {
        Dims::new(
            self.get_i16(42) as usize,
            self.get_i16(44) as usize,
            self.get_i16(46) as usize,
        )
    }

    fn set_dims(&mut self, dims: Dims) {
        self.put_i16(40, 3);
        for (i, &d) in dims.0.iter().enumerate() {
            self.put_i16(42 + 2 * i, d as i16);
        }
        for i in 4..8 {
            self.put_i16(40 + 2 * i, 1);
        }
    }

    pub fn spacing(&self) -> [f32; 3] {
        let s = [self.get_f32(80), self.get_f32(84), self.get_f32(88)];
        s.map(|v| if v.is_finite() && v > 0.0 { v } else { 1.0 })
    }

    fn set_spacing(&mut self, spacing: [f32; 3]) {
        for (i, &s) in spacing.iter().enumerate() {
            self.put_f32(80 + 4 * i, s);
        }
    }

    pub fn datatype(&self) -> Option<DataType> {
        DataType::from_code(self.get_i16(70))
    }

    fn set_datatype(&mut self, dt: DataType) {
        self.put_i16(70, dt.code());
        self.put_i16(72, (dt.bytes() * 8) as i16);
        self.put_f32(108, DATA_OFFSET as f32);
        self.put_f32(112, 1.0);
        self.put_f32(116, 0.0);
    }

    fn vox_offset(&self) -> f32 {
        self.get_f32(108)
    }

    fn scaling(&self) -> Option<(f32, f32)> {
        let slope = self.get_f32(112);
        let inter = self.get_f32(116);
        if slope == 0.0 || !slope.is_finite() || (slope == 1.0 && inter == 0.0) {
            None
        } else {
            Some((slope, inter))
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.raw
    }

    /// Rebuilds a header from raw bytes previously obtained via `as_bytes`.
    pub fn from_bytes(raw: &[u8]) -> Result<Self> {
        parse_header(raw, Path::new("<embedded header>"))
    }
}

/// A loaded volume: header plus voxel values converted to `f32`.
#[derive(Clone, Debug)]
pub struct NiftiImage {
    pub header: NiftiHeader,
    pub data: Vec<f32>,
}

fn parse_header(bytes: &[u8], path: &Path) -> Result<NiftiHeader> {
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(
            path,
            format!("file too small ({} bytes) for a NIfTI-1 header", bytes.len()),
        ));
    }
    let sizeof_hdr = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
    if sizeof_hdr != HEADER_SIZE as i32 {
        if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
            return Err(Error::format(path, "big-endian NIfTI is not supported"));
        }
        return Err(Error::format(path, format!("bad sizeof_hdr {sizeof_hdr}")));
    }
    if &bytes[344..348] != b"n+1\0" {
        return Err(Error::format(path, "missing single-file NIfTI-1 magic 'n+1'"));
    }
    let header = NiftiHeader {
        raw: bytes[..HEADER_SIZE].to_vec(),
    };
    let ndim = header.get_i16(40);
    if !(3..=7).contains(&ndim) {
        return Err(Error::format(path, format!("unsupported dim[0]={ndim}")));
    }
    for i in 1..=3 {
        if header.get_i16(40 + 2 * i) < 1 {
            return Err(Error::format(path, format!("non-positive dim[{i}]")));
        }
    }
    for i in 4..=(ndim as usize) {
        if header.get_i16(40 + 2 * i) > 1 {
            return Err(Error::format(path, "only 3D volumes are supported"));
        }
    }
    if header.datatype().is_none() {
        return Err(Error::format(
            path,
            format!("unsupported datatype code {}", header.get_i16(70)),
        ));
    }
    Ok(header)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    let bytes = read_bytes(path)?;
    let header = parse_header(&bytes, path)?;
    let dt = header.datatype().expect("validated");
    let n = header.dims().len();
    let off = header.vox_offset();
    if !(off >= HEADER_SIZE as f32) {
        return Err(Error::format(path, format!("bad vox_offset {off}")));
    }
    let off = off as usize;
    let need = off + n * dt.bytes();
    if bytes.len() < need {
        return Err(Error::format(
            path,
            format!("truncated data: need {need} bytes, have {}", bytes.len()),
        ));
    }
    let body = &bytes[off..need];
    let mut data: Vec<f32> = match dt {
        DataType::U8 => body.iter().map(|&b| b as f32).collect(),
        DataType::I16 => body
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        DataType::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
    };
    if let Some((slope, inter)) = header.scaling() {
        for v in &mut data {
            *v = *v * slope + inter;
        }
    }
    Ok(NiftiImage { header, data })
}

/// Writes `data` using `template` for everything but the dimensions, the
/// element type and the scaling fields. Gzip-compressed when the path ends
/// in `.gz`.
pub fn write_nifti(
    path: &Path,
    template: &NiftiHeader,
    dims: Dims,
    datatype: DataType,
    data: &[f32],
) -> Result<()> {
    assert_eq!(data.len(), dims.len(), "data length does not match dims");
    let mut header = template.clone();
    header.set_dims(dims);
    header.set_datatype(datatype);

    let mut buf = Vec::with_capacity(DATA_OFFSET + data.len() * datatype.bytes());
    buf.extend_from_slice(&header.raw);
    buf.extend_from_slice(&[0u8; DATA_OFFSET - HEADER_SIZE]);
    match datatype {
        DataType::U8 => buf.extend(data.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8)),
        DataType::I16 => {
            for &v in data {
                buf.extend_from_slice(&(v.round().clamp(-32768.0, 32767.0) as i16).to_le_bytes());
            }
        }
        DataType::F32 => {
            for &v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }

    let gz = path
        .file_name()
        .and_then(|n| n.to_str())
        .is_some_and(|n| n.ends_with(".gz"));
    let bytes = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::fast());
        enc.write_all(&buf).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        buf
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_each_datatype() {
        let dir = tempfile::tempdir().unwrap();
        let dims = Dims::new(3, 2, 4);
        let data: Vec<f32> = (0..dims.len()).map(|i| i as f32 * 3.0).collect();
        for (dt, name) in [
            (DataType::U8, "a.nii"),
            (DataType::I16, "b.nii.gz"),
            (DataType::F32, "c.nii.gz"),
        ] {
            let p = dir.path().join(name);
            let h = NiftiHeader::new(dims, [1.0, 2.0, 3.0], dt);
            write_nifti(&p, &h, dims, dt, &data).unwrap();
            let img = read_nifti(&p).unwrap();
            assert_eq!(img.header.dims(), dims);
            assert_eq!(img.header.spacing(), [1.0, 2.0, 3.0]);
            assert_eq!(img.data, data);
        }
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.nii");
        let dims = Dims::new(2, 2, 2);
        write_nifti(&p, &NiftiHeader::new(dims, [1.0; 3], DataType::U8), dims, DataType::U8, &[0.0; 8]).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[344] = b'x';
        std::fs::write(&p, bytes).unwrap();
        assert!(matches!(read_nifti(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.nii");
        std::fs::write(&p, [0u8; 100]).unwrap();
        assert!(matches!(read_nifti(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn scaling_is_applied() {
        let dims = Dims::new(1, 1, 2);
        let mut h = NiftiHeader::new(dims, [1.0; 3], DataType::I16);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.nii");
        write_nifti(&p, &h, dims, DataType::I16, &[2.0, 4.0]).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[112..116].copy_from_slice(&0.5f32.to_le_bytes());
        bytes[116..120].copy_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&p, bytes).unwrap();
        assert_eq!(read_nifti(&p).unwrap().data, vec![2.0, 3.0]);
        h.set_spacing([0.0, -1.0, 2.0]);
        assert_eq!(h.spacing(), [1.0, 1.0, 2.0]);
    }
}
