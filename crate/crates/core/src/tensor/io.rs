//! `TFRX1` named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TFRX1"
//! repeated until EOF:
//!     u64 name_len, name_len bytes of UTF-8 name
//!     u64 rank, rank × u64 dims
//!     product(dims) × f32 payload
//! ```
//!
//! Records are written in name order, so equal contents give equal bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{NamedTensors, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"TFRX1";

pub fn encode(tensors: &NamedTensors<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(MAGIC.len() + tensors.numel() * 4);
    out.extend_from_slice(MAGIC);
    for (name, t) in tensors.iter() {
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u64).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| malformed(format!("truncated at byte {}", self.pos)))?;
        let slice = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(slice)
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| malformed("length overflows usize".into()))
    }
}

fn malformed(detail: String) -> Error {
    Error::Format {
        what: "TFRX container",
        detail,
    }
}

pub fn decode(bytes: &[u8]) -> Result<NamedTensors<f32>> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(malformed("missing TFRX1 magic".into()));
    }
    let mut r = Reader {
        bytes,
        pos: MAGIC.len(),
    };
    let mut out = NamedTensors::new();
    while r.pos < bytes.len() {
        let name_len = r.len()?;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|e| malformed(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.len()?;
        let dims = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| malformed(format!("dims of `{name}` overflow")))?;
        let payload = r.take(
            numel
                .checked_mul(4)
                .ok_or_else(|| malformed("payload overflow".into()))?,
        )?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let tensor = Tensor::new(dims, data).map_err(|e| malformed(format!("`{name}`: {e}")))?;
        out.insert(name, tensor)
            .map_err(|e| malformed(e.to_string()))?;
    }
    Ok(out)
}

/// Writes `bytes` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save(path: &Path, tensors: &NamedTensors<f32>) -> Result<()> {
    write_atomic(path, &encode(tensors))
}

pub fn load(path: &Path) -> Result<NamedTensors<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
