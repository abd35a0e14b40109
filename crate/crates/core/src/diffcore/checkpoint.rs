//! Parameter checkpoints as `(name, shape, values)` triples.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic    b"STDACKPT"
//! version  u32
//! count    u32
//! count × { name_len u32, name utf-8, ndim u32, dims u64 × ndim, values f64 × Π dims }
//! ```
//!
//! The JSON form is `{"format_version": 1, "entries": [{"name", "shape", "values"}]}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DenseArray, ParamSet};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"STDACKPT";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonEntry {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonCheckpoint {
    format_version: u32,
    entries: Vec<JsonEntry>,
}

pub fn to_bytes(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + params.num_values() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, value) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<ParamSet> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32()?;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?
            .to_string();
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let len = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let len = len.ok_or_else(|| Error::Checkpoint(format!("shape of `{name}` overflows")))?;
        let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(name, DenseArray::new(shape, data)?)?;
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok(params)
}

pub fn to_json(params: &ParamSet) -> Result<String> {
    let doc = JsonCheckpoint {
        format_version: FORMAT_VERSION,
        entries: params
            .iter()
            .map(|(name, v)| JsonEntry {
                name: name.to_string(),
                shape: v.shape().to_vec(),
                values: v.data().to_vec(),
            })
            .collect(),
    };
    Ok(serde_json::to_string_pretty(&doc)?)
}

pub fn from_json(text: &str) -> Result<ParamSet> {
    let doc: JsonCheckpoint = serde_json::from_str(text)?;
    if doc.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            doc.format_version
        )));
    }
    let mut params = ParamSet::new();
    for e in doc.entries {
        params.insert(e.name, DenseArray::new(e.shape, e.values)?)?;
    }
    Ok(params)
}

/// Writes JSON when the extension is `.json`, binary otherwise.
pub fn save(params: &ParamSet, path: &Path) -> Result<()> {
    if path.extension().is_some_and(|e| e == "json") {
        std::fs::write(path, to_json(params)?)?;
    } else {
        std::fs::write(path, to_bytes(params))?;
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<ParamSet> {
    if path.extension().is_some_and(|e| e == "json") {
        from_json(&std::fs::read_to_string(path)?)
    } else {
        from_bytes(&std::fs::read(path)?)
    }
}
