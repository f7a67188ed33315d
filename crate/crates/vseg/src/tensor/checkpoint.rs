//! Named-parameter checkpoint files.
//!
//! Layout: magic `VSGW`, little-endian u32 tensor count, then per tensor a
//! u16 name length, the UTF-8 name bytes, u32 ndims, u64 extents, and the
//! f32 little-endian payload. Values are stored in f32 regardless of the
//! in-memory element type.

use std::fs;
use std::io::Read;
use std::path::Path;

use crate::ioutil::write_atomic;

use super::{Element, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"VSGW";

/// Writes all entries to `path`. The file appears atomically: bytes go to a
/// sibling temp file first and are renamed into place, so a failed run never
/// leaves a truncated checkpoint behind.
pub fn save_checkpoint<T: Element>(
    path: &Path,
    entries: &[(&str, &Tensor<T>)],
) -> Result<(), TensorError> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    let count = u32::try_from(entries.len())
        .map_err(|_| TensorError::Format("too many tensors for a checkpoint".into()))?;
    buf.extend_from_slice(&count.to_le_bytes());
    for (name, tensor) in entries {
        let name_bytes = name.as_bytes();
        let name_len = u16::try_from(name_bytes.len()).map_err(|_| {
            TensorError::Format(format!("tensor name '{name}' exceeds 65535 bytes"))
        })?;
        buf.extend_from_slice(&name_len.to_le_bytes());
        buf.extend_from_slice(name_bytes);
        let ndims = u32::try_from(tensor.shape().len())
            .map_err(|_| TensorError::Format("tensor rank exceeds u32".into()))?;
        buf.extend_from_slice(&ndims.to_le_bytes());
        for &d in tensor.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in tensor.data() {
            buf.extend_from_slice(&v.to_f32().to_le_bytes());
        }
    }
    write_atomic(path, &buf)?;
    Ok(())
}

/// Reads every named tensor, in file order.
pub fn load_checkpoint<T: Element>(path: &Path) -> Result<Vec<(String, Tensor<T>)>, TensorError> {
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let mut cursor = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    let magic = cursor.take(4)?;
    if magic != MAGIC {
        return Err(TensorError::Format(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let count = cursor.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let name_len = cursor.u16()? as usize;
        let name_bytes = cursor.take(name_len)?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| TensorError::Format(format!("tensor {i}: name is not UTF-8")))?
            .to_string();
        let ndims = cursor.u32()? as usize;
        if ndims > 32 {
            return Err(TensorError::Format(format!(
                "tensor '{name}': implausible rank {ndims}"
            )));
        }
        let mut shape = Vec::with_capacity(ndims);
        let mut numel: u128 = 1;
        for _ in 0..ndims {
            let d = cursor.u64()?;
            numel = numel.saturating_mul(d as u128);
            shape.push(d as usize);
        }
        let remaining = (cursor.bytes.len() - cursor.pos) as u128;
        if numel.saturating_mul(4) > remaining {
            return Err(TensorError::Format(format!(
                "tensor '{name}': payload of {numel} elements exceeds remaining bytes"
            )));
        }
        let mut data = Vec::with_capacity(numel as usize);
        for _ in 0..numel {
            let raw = cursor.take(4)?;
            data.push(T::from_f32(f32::from_le_bytes([
                raw[0], raw[1], raw[2], raw[3],
            ])));
        }
        let tensor =
            Tensor::new(&shape, data).map_err(|e| TensorError::Format(format!("'{name}': {e}")))?;
        out.push((name, tensor));
    }
    if cursor.pos != bytes.len() {
        return Err(TensorError::Format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - cursor.pos
        )));
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        if self.pos + n > self.bytes.len() {
            return Err(TensorError::Format("file truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, TensorError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, TensorError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_names_shapes_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.vsgw");
        let a = Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.5 - 1.0);
        let b = Tensor::<f32>::scalar(7.25);
        let c = Tensor::<f32>::from_fn(&[4], |i| (i as f32).exp());
        save_checkpoint(&path, &[("enc.w", &a), ("lr", &b), ("head.b", &c)]).unwrap();
        let loaded = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded[0].0, "enc.w");
        assert_eq!(loaded[0].1, a);
        assert_eq!(loaded[1].0, "lr");
        assert_eq!(loaded[1].1, b);
        assert_eq!(loaded[2].0, "head.b");
        assert_eq!(loaded[2].1, c);
    }

    #[test]
    fn header_bytes_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.vsgw");
        let t = Tensor::<f32>::new(&[2], vec![1.0, 2.0]).unwrap();
        save_checkpoint(&path, &[("w", &t)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // magic(4) + count(4) + namelen(2) + "w"(1) + ndims(4) + dim(8) + payload(8)
        assert_eq!(bytes.len(), 31);
        assert_eq!(&bytes[..4], b"VSGW");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u16::from_le_bytes(bytes[8..10].try_into().unwrap()), 1);
        assert_eq!(bytes[10], b'w');
        assert_eq!(u32::from_le_bytes(bytes[11..15].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[15..23].try_into().unwrap()), 2);
        assert_eq!(f32::from_le_bytes(bytes[23..27].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(bytes[27..31].try_into().unwrap()), 2.0);
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.vsgw");
        std::fs::write(&path, b"NOPE\x01\x00\x00\x00").unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(TensorError::Format(_))
        ));
        let t = Tensor::<f32>::new(&[8], vec![0.0; 8]).unwrap();
        save_checkpoint(&path, &[("w", &t)]).unwrap();
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 3]).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path),
            Err(TensorError::Format(_))
        ));
    }

    #[test]
    fn no_temp_litter_after_save() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clean.vsgw");
        let t = Tensor::<f32>::scalar(1.0);
        save_checkpoint(&path, &[("s", &t)]).unwrap();
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["clean.vsgw".to_string()]);
    }
}
