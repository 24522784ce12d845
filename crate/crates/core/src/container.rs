//! Named-tensor container shared by model files (`STXG`) and descriptor
//! weight files (`STXW`).
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic[4] | version u32 | meta_len u32 | meta (UTF-8 JSON)
//! count u32 | count x { name_len u32 | name | rank u32 | dims u32[rank] | offset u64 }
//! payload: f32 LE, offsets counted in bytes from the start of the payload
//! ```

use std::io::Write;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::ParamTensor;

pub const VERSION: u32 = 1;
pub const MODEL_MAGIC: [u8; 4] = *b"STXG";
pub const WEIGHTS_MAGIC: [u8; 4] = *b"STXW";

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub metadata: Value,
    pub tensors: Vec<(String, ParamTensor)>,
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode(magic: [u8; 4], metadata: &Value, tensors: &[(&str, &ParamTensor)]) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(metadata).map_err(|e| Error::format(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(&magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0u64;
    for (name, t) in tensors {
        if t.shape.iter().product::<usize>() != t.data.len() {
            return Err(Error::format(format!("tensor {name}: shape {:?} does not match {} values", t.shape, t.data.len())));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += 4 * t.data.len() as u64;
    }
    for (_, t) in tensors {
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(format!("truncated while reading {what} at byte {}", self.pos))),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], magic: [u8; 4]) -> Result<Container> {
    let mut r = Reader { bytes, pos: 0 };
    let got = r.take(4, "magic")?;
    if got != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(got),
            String::from_utf8_lossy(&magic)
        )));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported format version {version}, expected {VERSION}")));
    }
    let meta_len = r.u32("metadata length")? as usize;
    let meta = r.take(meta_len, "metadata")?;
    let metadata: Value = serde_json::from_slice(meta).map_err(|e| Error::format(format!("metadata: {e}")))?;
    let count = r.u32("tensor count")? as usize;
    let mut index = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "tensor name")?)
            .map_err(|_| Error::format("tensor name is not UTF-8"))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(Error::format(format!("tensor {name}: rank {rank} too large")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dims")? as usize);
        }
        let offset = r.u64("offset")?;
        index.push((name, shape, offset));
    }
    let payload = &bytes[r.pos..];
    let mut tensors = Vec::with_capacity(index.len());
    for (name, shape, offset) in index {
        let n: usize = shape.iter().product();
        let start = usize::try_from(offset).map_err(|_| Error::format("offset overflow"))?;
        let end = start
            .checked_add(4 * n)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| Error::format(format!("truncated payload for tensor {name}")))?;
        let data = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, ParamTensor::new(shape, data)));
    }
    Ok(Container { metadata, tensors })
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Format { msg, .. } => Error::Format {
            path: Some(path.to_path_buf()),
            msg,
        },
        other => other,
    }
}

pub fn write_file(path: &Path, magic: [u8; 4], metadata: &Value, tensors: &[(&str, &ParamTensor)]) -> Result<()> {
    let bytes = encode(magic, metadata, tensors).map_err(|e| with_path(e, path))?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_file(path: &Path, magic: [u8; 4]) -> Result<Container> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, magic).map_err(|e| with_path(e, path))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (Value, ParamTensor, ParamTensor) {
        (
            serde_json::json!({"K": 1, "note": "x"}),
            ParamTensor::new(vec![2, 3], vec![1.0, -2.0, 3.5, 0.0, f32::MIN_POSITIVE, 7.0]),
            ParamTensor::new(vec![1], vec![0.25]),
        )
    }

    #[test]
    fn round_trip() {
        let (m, a, b) = sample();
        let bytes = encode(MODEL_MAGIC, &m, &[("a", &a), ("b", &b)]).unwrap();
        let c = decode(&bytes, MODEL_MAGIC).unwrap();
        assert_eq!(c.metadata, m);
        assert_eq!(c.get("a"), Some(&a));
        assert_eq!(c.get("b"), Some(&b));
        let names: Vec<&str> = c.tensors.iter().map(|(n, _)| n.as_str()).collect();
        let again = encode(MODEL_MAGIC, &c.metadata, &c.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect::<Vec<_>>()).unwrap();
        assert_eq!(names, ["a", "b"]);
        assert_eq!(bytes, again);
    }

    #[test]
    fn rejects_wrong_magic_and_truncation() {
        let (m, a, b) = sample();
        let bytes = encode(MODEL_MAGIC, &m, &[("a", &a), ("b", &b)]).unwrap();
        assert!(matches!(decode(&bytes, WEIGHTS_MAGIC), Err(Error::Format { .. })));
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut], MODEL_MAGIC), Err(Error::Format { .. })), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(decode(&bad, MODEL_MAGIC).is_err());
    }
}
