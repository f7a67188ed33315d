//! VSG1 binary volume files.
//!
//! Layout, all little-endian after the magic:
//!
//! ```text
//! magic "VSG1"
//! u32  ndims            4 for volumes, 3 for label maps
//! u64  dims[ndims]      (channel, x, y, z) or (x, y, z)
//! f32  spacing[3]       voxel edge lengths in mm
//! u8   dtype            0 = f32 volume, 1 = u8 label map
//! raw payload           x-fastest within each channel
//! ```
//!
//! The format stores no channel names; readers assign "ch0", "ch1", ...

use std::path::Path;

use crate::ioutil::write_atomic;

use super::{LabelMap, VolError, Volume};

const MAGIC: &[u8; 4] = b"VSG1";
const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

fn header(ndims: u32, dims: &[u64], spacing: [f32; 3], dtype: u8) -> Vec<u8> {
    let mut buf = Vec::with_capacity(4 + 4 + dims.len() * 8 + 12 + 1);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&ndims.to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for &s in &spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf.push(dtype);
    buf
}

/// Writes a volume; the file appears atomically or not at all.
pub fn write_volume(v: &Volume, path: &Path) -> Result<(), VolError> {
    // Construction already guarantees finiteness; re-check so a file can
    // never be produced from a value that slipped past it.
    if !v.data().iter().all(|x| x.is_finite()) {
        return Err(VolError::Validation(
            "volume contains non-finite values".into(),
        ));
    }
    let [x, y, z] = v.dims();
    let dims = [v.channels() as u64, x as u64, y as u64, z as u64];
    let mut buf = header(4, &dims, v.spacing(), DTYPE_F32);
    buf.reserve(v.data().len() * 4);
    for &val in v.data() {
        buf.extend_from_slice(&val.to_le_bytes());
    }
    write_atomic(path, &buf)?;
    Ok(())
}

/// Writes a label map; the file appears atomically or not at all.
pub fn write_labelmap(m: &LabelMap, path: &Path) -> Result<(), VolError> {
    let [x, y, z] = m.dims();
    let dims = [x as u64, y as u64, z as u64];
    let mut buf = header(3, &dims, m.spacing(), DTYPE_U8);
    buf.extend_from_slice(m.data());
    write_atomic(path, &buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], VolError> {
        if self.pos + n > self.bytes.len() {
            return Err(VolError::Corrupt(format!(
                "need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, VolError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, VolError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }

    fn f32(&mut self) -> Result<f32, VolError> {
        let b = self.take(4)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

fn open_header<'a>(
    bytes: &'a [u8],
    expect_ndims: u32,
    expect_dtype: u8,
) -> Result<(Vec<usize>, [f32; 3], Reader<'a>), VolError> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(VolError::Format(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let ndims = r.u32()?;
    if ndims != expect_ndims {
        return Err(VolError::Format(format!(
            "ndims {ndims}, expected {expect_ndims}"
        )));
    }
    let mut dims = Vec::with_capacity(ndims as usize);
    for _ in 0..ndims {
        let d = r.u64()?;
        if d == 0 {
            return Err(VolError::Validation("zero extent in header".into()));
        }
        dims.push(usize::try_from(d).map_err(|_| {
            VolError::Validation(format!("extent {d} exceeds this platform's address space"))
        })?);
    }
    let spacing = [r.f32()?, r.f32()?, r.f32()?];
    let dtype = r.take(1)?[0];
    if dtype != expect_dtype {
        return Err(VolError::Format(format!(
            "dtype {dtype}, expected {expect_dtype}"
        )));
    }
    Ok((dims, spacing, r))
}

fn oversized() -> VolError {
    VolError::Validation("header extents overflow the payload size".into())
}

/// Element count from header extents, rejecting products that overflow
/// rather than trusting a hostile header.
fn checked_numel(dims: &[usize]) -> Result<usize, VolError> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d).ok_or_else(oversized))
}

/// Reads a 4D (channel, x, y, z) f32 volume.
pub fn read_volume(path: &Path) -> Result<Volume, VolError> {
    let bytes = std::fs::read(path)?;
    let (dims, spacing, mut r) = open_header(&bytes, 4, DTYPE_F32)?;
    let numel = checked_numel(&dims)?;
    let payload = r.take(numel.checked_mul(4).ok_or_else(oversized)?)?;
    if r.pos != bytes.len() {
        return Err(VolError::Corrupt(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
    }
    Volume::new(
        dims[0],
        [dims[1], dims[2], dims[3]],
        spacing,
        Volume::default_channel_names(dims[0]),
        data,
    )
}

/// Reads a 3D u8 label map.
pub fn read_labelmap(path: &Path) -> Result<LabelMap, VolError> {
    let bytes = std::fs::read(path)?;
    let (dims, spacing, mut r) = open_header(&bytes, 3, DTYPE_U8)?;
    let numel = checked_numel(&dims)?;
    let payload = r.take(numel)?;
    if r.pos != bytes.len() {
        return Err(VolError::Corrupt(format!(
            "{} trailing bytes after payload",
            bytes.len() - r.pos
        )));
    }
    LabelMap::new([dims[0], dims[1], dims[2]], spacing, payload.to_vec())
}
