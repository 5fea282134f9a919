//! Binary checkpoint container.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic      8 bytes  "CHATNMT\0"
//! version    u32      1
//! entries    u32      number of header entries
//!   key      u32 length + UTF-8 bytes
//!   value    u32 length + UTF-8 bytes
//! tensors    u32      number of tensors
//!   name     u32 length + UTF-8 bytes
//!   dtype    u8       1 = f64
//!   ndim     u32
//!   dims     ndim x u64
//!   values   prod(dims) x f64
//! ```
//!
//! Header entries hold the model configuration under its own key names;
//! any other key is free-form metadata. Tensors are written in name order.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Model, ModelConfig, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CHATNMT\0";
pub const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// A model together with the free-form metadata stored beside it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub metadata: BTreeMap<String, String>,
}

fn put_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn put_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    put_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

pub fn write_checkpoint<W: Write>(w: &mut W, model: &Model, metadata: &BTreeMap<String, String>) -> Result<()> {
    w.write_all(MAGIC)?;
    put_u32(w, VERSION)?;
    let pairs = model.config.to_pairs();
    for key in metadata.keys() {
        if pairs.iter().any(|(k, _)| k == key) {
            return Err(Error::contract(format!("metadata key `{key}` collides with a model setting")));
        }
    }
    put_u32(w, (pairs.len() + metadata.len()) as u32)?;
    for (k, v) in &pairs {
        put_str(w, k)?;
        put_str(w, v)?;
    }
    for (k, v) in metadata {
        put_str(w, k)?;
        put_str(w, v)?;
    }
    put_u32(w, model.params.len() as u32)?;
    for (name, t) in model.params.iter() {
        put_str(w, name)?;
        w.write_all(&[DTYPE_F64])?;
        put_u32(w, t.ndim() as u32)?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn save_checkpoint(path: &Path, model: &Model, metadata: &BTreeMap<String, String>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    write_checkpoint(&mut w, model, metadata)?;
    w.flush()?;
    Ok(())
}

struct Reader<'a, R> {
    inner: R,
    path: &'a str,
}

impl<R: Read> Reader<'_, R> {
    fn bad(&self, msg: impl Into<String>) -> Error {
        Error::Checkpoint {
            path: self.path.into(),
            msg: msg.into(),
        }
    }

    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.bad("truncated file"))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        let b = self.bytes(8)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let b = self.bytes(n)?;
        String::from_utf8(b).map_err(|_| self.bad("string is not UTF-8"))
    }
}

/// Reads a checkpoint; `path` only labels errors.
pub fn read_checkpoint<R: Read>(inner: R, path: &str) -> Result<Checkpoint> {
    let mut r = Reader { inner, path };
    if r.bytes(8)? != MAGIC {
        return Err(r.bad("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.bad(format!("unsupported format version {version}")));
    }
    let mut config = ModelConfig::default();
    let mut metadata = BTreeMap::new();
    for _ in 0..r.u32()? {
        let key = r.string()?;
        let value = r.string()?;
        if !config.set(&key, &value)? {
            metadata.insert(key, value);
        }
    }
    let mut params = ParamStore::new();
    for _ in 0..r.u32()? {
        let name = r.string()?;
        let dtype = r.bytes(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(r.bad(format!("tensor `{name}` has unknown dtype {dtype}")));
        }
        let ndim = r.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.bytes(n * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| r.bad(format!("tensor `{name}`: {e}")))?;
        params.insert(name, t);
    }
    let model = Model::from_params(config, params)?;
    Ok(Checkpoint { model, metadata })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = std::fs::File::open(path).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    read_checkpoint(BufReader::new(file), &path.display().to_string())
}
