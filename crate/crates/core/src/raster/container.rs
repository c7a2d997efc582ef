//! `CBSK` band-stack and `CMSK` mask containers.
//!
//! Band stack layout (little-endian):
//!
//! ```text
//! "CBSK" | u16 version=1 | u32 height | u32 width | u16 band count | u8 dtype
//! band count x 8-byte ASCII band id (NUL padded)
//! band planes, row-major, in the declared dtype
//! ```
//!
//! The mask container drops the band ids and appends `u8 class count`
//! and `u8 scheme` to the header; its payload is one u8 plane.

use std::fs;
use std::path::Path;

use super::{BandId, BandStack, DType, MaskRaster, MaskScheme};
use crate::codec::{checked_u32, put_u16, put_u32, ByteReader};
use crate::error::{Error, FormatError, Result};

const STACK_MAGIC: &[u8; 4] = b"CBSK";
const MASK_MAGIC: &[u8; 4] = b"CMSK";
const VERSION: u16 = 1;

pub fn encode_band_stack(stack: &BandStack) -> Result<Vec<u8>, FormatError> {
    let h = stack.height();
    let w = stack.width();
    let dtype = stack.dtype();
    let band_count = u16::try_from(stack.band_count())
        .map_err(|_| FormatError::Invalid("more than 65535 bands".into()))?;
    let mut out = Vec::with_capacity(17 + 8 * stack.band_count() + stack.data().len() * 4);
    out.extend_from_slice(STACK_MAGIC);
    put_u16(&mut out, VERSION);
    put_u32(&mut out, checked_u32(h, "height")?);
    put_u32(&mut out, checked_u32(w, "width")?);
    put_u16(&mut out, band_count);
    out.push(dtype.code());
    for band in stack.bands() {
        let mut id = [0u8; BandId::MAX_LEN];
        id[..band.as_str().len()].copy_from_slice(band.as_str().as_bytes());
        out.extend_from_slice(&id);
    }
    for (index, &v) in stack.data().iter().enumerate() {
        match dtype {
            DType::F32 => out.extend_from_slice(&v.to_le_bytes()),
            DType::U16 => {
                if v.fract() != 0.0 || !(0.0..=u16::MAX as f32).contains(&v) {
                    return Err(FormatError::ValueNotRepresentable {
                        value: v,
                        index,
                        dtype: dtype.name(),
                    });
                }
                out.extend_from_slice(&(v as u16).to_le_bytes());
            }
            DType::U8 => {
                if v.fract() != 0.0 || !(0.0..=u8::MAX as f32).contains(&v) {
                    return Err(FormatError::ValueNotRepresentable {
                        value: v,
                        index,
                        dtype: dtype.name(),
                    });
                }
                out.push(v as u8);
            }
        }
    }
    Ok(out)
}

fn read_dims(r: &mut ByteReader<'_>) -> Result<(usize, usize, usize, DType), FormatError> {
    let version = r.u16()?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion {
            container: "raster",
            version,
        });
    }
    let h = r.u32()? as usize;
    let w = r.u32()? as usize;
    let bands = r.u16()? as usize;
    let dtype_code = r.u8()?;
    let dtype = DType::from_code(dtype_code).ok_or(FormatError::UnknownDtype(dtype_code))?;
    if h == 0 || w == 0 || bands == 0 {
        return Err(FormatError::DimensionMismatch(format!(
            "header declares {h}x{w} with {bands} bands"
        )));
    }
    Ok((h, w, bands, dtype))
}

pub fn decode_band_stack(bytes: &[u8]) -> Result<BandStack, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(STACK_MAGIC)?;
    let (h, w, band_count, dtype) = read_dims(&mut r)?;
    let mut bands = Vec::with_capacity(band_count);
    for _ in 0..band_count {
        let raw = r.take(BandId::MAX_LEN)?;
        let end = raw.iter().position(|&b| b == 0).unwrap_or(raw.len());
        let text = std::str::from_utf8(&raw[..end])
            .map_err(|_| FormatError::Invalid("band id is not ASCII".into()))?;
        bands.push(BandId::new(text).map_err(|e| FormatError::Invalid(e.to_string()))?);
    }
    let n = h
        .checked_mul(w)
        .and_then(|p| p.checked_mul(band_count))
        .ok_or_else(|| FormatError::DimensionMismatch("pixel count overflows".into()))?;
    let payload = n
        .checked_mul(dtype.byte_width())
        .ok_or_else(|| FormatError::DimensionMismatch("payload size overflows".into()))?;
    let raw = r.take(payload)?;
    r.finish()?;
    let data: Vec<f32> = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        DType::U16 => raw
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32)
            .collect(),
        DType::U8 => raw.iter().map(|&b| b as f32).collect(),
    };
    BandStack::new(bands, h, w, data)
        .map(|s| s.with_dtype(dtype))
        .map_err(|e| FormatError::Invalid(e.to_string()))
}

pub fn encode_mask(mask: &MaskRaster) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(19 + mask.data().len());
    out.extend_from_slice(MASK_MAGIC);
    put_u16(&mut out, VERSION);
    put_u32(&mut out, checked_u32(mask.height(), "height")?);
    put_u32(&mut out, checked_u32(mask.width(), "width")?);
    put_u16(&mut out, 1);
    out.push(DType::U8.code());
    out.push(mask.classes());
    out.push(mask.scheme().code());
    out.extend_from_slice(mask.data());
    Ok(out)
}

pub fn decode_mask(bytes: &[u8]) -> Result<MaskRaster, FormatError> {
    let mut r = ByteReader::new(bytes);
    r.magic(MASK_MAGIC)?;
    let (h, w, bands, dtype) = read_dims(&mut r)?;
    if bands != 1 || dtype != DType::U8 {
        return Err(FormatError::DimensionMismatch(format!(
            "mask must be one u8 plane, header declares {bands} x {}",
            dtype.name()
        )));
    }
    let classes = r.u8()?;
    let scheme_code = r.u8()?;
    let scheme = MaskScheme::from_code(scheme_code).ok_or(FormatError::UnknownScheme(scheme_code))?;
    let n = h
        .checked_mul(w)
        .ok_or_else(|| FormatError::DimensionMismatch("pixel count overflows".into()))?;
    let data = r.take(n)?.to_vec();
    r.finish()?;
    MaskRaster::with_classes(h, w, classes, scheme, data)
        .map_err(|e| FormatError::Invalid(e.to_string()))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_band_stack(stack: &BandStack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_band_stack(stack).map_err(|e| Error::format(path, e))?;
    write_file(path, &bytes)
}

pub fn load_band_stack(path: impl AsRef<Path>) -> Result<BandStack> {
    let path = path.as_ref();
    decode_band_stack(&read_file(path)?).map_err(|e| Error::format(path, e))
}

pub fn save_mask(mask: &MaskRaster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_mask(mask).map_err(|e| Error::format(path, e))?;
    write_file(path, &bytes)
}

pub fn load_mask(path: impl AsRef<Path>) -> Result<MaskRaster> {
    let path = path.as_ref();
    decode_mask(&read_file(path)?).map_err(|e| Error::format(path, e))
}
