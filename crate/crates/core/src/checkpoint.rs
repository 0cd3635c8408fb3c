//! Binary checkpoints of named parameter tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "RACOLNCK"
//! version  u32      1
//! n_meta   u32      then n_meta × (key: str, value: str)
//! n_tensor u32      then n_tensor × (name: str, rank: u32,
//!                                    extents: rank × u64,
//!                                    data: Π extents × f64, row-major)
//! str      u32 byte length followed by UTF-8 bytes
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Float, Parameters};

const MAGIC: &[u8; 8] = b"RACOLNCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Array2<f64>)>,
}

impl Checkpoint {
    pub fn from_params<F: Float, P: Parameters<F> + ?Sized>(
        model: &P,
        meta: BTreeMap<String, String>,
    ) -> Self {
        let tensors = model
            .named_params()
            .into_iter()
            .map(|(n, t)| (n, t.value().mapv(|v| v.as_f64())))
            .collect();
        Checkpoint { meta, tensors }
    }

    pub fn meta(&self, key: &str) -> Result<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key `{key}`")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("metadata `{key}` = `{raw}` is not an integer")))
    }

    pub fn meta_f64(&self, key: &str) -> Result<f64> {
        let raw = self.meta(key)?;
        raw.parse()
            .map_err(|_| Error::Checkpoint(format!("metadata `{key}` = `{raw}` is not a number")))
    }

    /// Copies stored values into `model`; names and shapes must match exactly.
    pub fn load_into<F: Float, P: Parameters<F> + ?Sized>(&self, model: &mut P) -> Result<()> {
        let mut params = model.named_params_mut();
        if params.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                params.len()
            )));
        }
        for ((name, tensor), (cname, value)) in params.iter_mut().zip(&self.tensors) {
            if name != cname {
                return Err(Error::Checkpoint(format!(
                    "tensor `{cname}` found where `{name}` was expected"
                )));
            }
            tensor
                .assign(value.mapv(F::c))
                .map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, value) in &self.tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(value.nrows() as u64).to_le_bytes());
            out.extend_from_slice(&(value.ncols() as u64).to_le_bytes());
            for v in value.iter() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            meta.insert(k, v);
        }
        let n = r.u32()?;
        let mut tensors = Vec::with_capacity(n as usize);
        for _ in 0..n {
            let name = r.string()?;
            let rank = r.u32()? as usize;
            let extents: Vec<usize> = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<_>>()?;
            let (rows, cols) = match extents.as_slice() {
                [n] => (1, *n),
                [r, c] => (*r, *c),
                _ => return Err(Error::Checkpoint(format!("`{name}` has rank {rank}"))),
            };
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("`{name}` is too large")))?;
            let data = (0..count).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            let value = Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
            tensors.push((name, value));
        }
        if r.at != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 string".into()))
    }
}

/// SHA-256 over parameter names, shapes and 64-bit values.
pub fn param_hash<F: Float, P: Parameters<F> + ?Sized>(model: &P) -> String {
    let mut h = Sha256::new();
    for (name, t) in model.named_params() {
        h.update(name.as_bytes());
        let [r, c] = t.shape();
        h.update((r as u64).to_le_bytes());
        h.update((c as u64).to_le_bytes());
        for v in t.value().iter() {
            h.update(v.as_f64().to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
