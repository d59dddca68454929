//! Parameter checkpoints.
//!
//! ```text
//! HMCK\t1\t<n_tensors>\n
//! <name>\t<dtype>\t<d0>,<d1>,...\n     (one line per tensor)
//! <raw little-endian values, tensors in manifest order>
//! ```

use std::path::Path;

use thiserror::Error;

use crate::tensor::{ParamStore, Scalar, Tensor};

const MAGIC: &str = "HMCK";
const VERSION: &str = "1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("tensor `{0}`: data section is truncated")]
    Truncated(String),
    #[error("tensor `{name}`: {reason}")]
    Mismatch { name: String, reason: String },
    #[error("{0} trailing bytes after the last tensor")]
    Trailing(usize),
}

/// A tensor as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: String,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

pub fn to_bytes<T: Scalar>(store: &ParamStore<T>) -> Vec<u8> {
    let mut out = format!("{MAGIC}\t{VERSION}\t{}\n", store.len()).into_bytes();
    for (_, p) in store.iter() {
        let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
        out.extend(format!("{}\t{}\t{}\n", p.name, T::DTYPE, dims.join(",")).bytes());
    }
    for (_, p) in store.iter() {
        for &x in p.value.data() {
            x.write_le(&mut out);
        }
    }
    out
}

pub fn save<T: Scalar>(store: &ParamStore<T>, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(store))
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), message: e.to_string() })
}

fn dtype_width(dtype: &str) -> Option<usize> {
    match dtype {
        "f32" => Some(4),
        "f64" => Some(8),
        _ => None,
    }
}

pub fn parse(bytes: &[u8]) -> Result<Vec<Entry>, CheckpointError> {
    let fmt = |m: &str| CheckpointError::Format(m.to_string());
    let mut pos = 0;
    let mut line = |what: &str| -> Result<String, CheckpointError> {
        let end = bytes[pos..].iter().position(|&b| b == b'\n').ok_or_else(|| fmt(&format!("missing {what}")))?;
        let s = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| fmt("manifest is not UTF-8"))?.to_string();
        pos += end + 1;
        Ok(s)
    };
    let header = line("header")?;
    let h: Vec<&str> = header.split('\t').collect();
    if h.len() != 3 || h[0] != MAGIC || h[1] != VERSION {
        return Err(fmt("bad header"));
    }
    let n: usize = h[2].parse().map_err(|_| fmt("bad tensor count"))?;
    let mut manifest = Vec::with_capacity(n);
    for _ in 0..n {
        let l = line("manifest line")?;
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() != 3 {
            return Err(fmt(&format!("bad manifest line `{l}`")));
        }
        let shape = f[2]
            .split(',')
            .map(|d| d.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|_| CheckpointError::Mismatch { name: f[0].into(), reason: format!("bad shape `{}`", f[2]) })?;
        if dtype_width(f[1]).is_none() {
            return Err(CheckpointError::Mismatch { name: f[0].into(), reason: format!("unknown dtype `{}`", f[1]) });
        }
        manifest.push((f[0].to_string(), f[1].to_string(), shape));
    }
    let mut entries = Vec::with_capacity(n);
    for (name, dtype, shape) in manifest {
        let len = shape.iter().product::<usize>() * dtype_width(&dtype).unwrap();
        if bytes.len() - pos < len {
            return Err(CheckpointError::Truncated(name));
        }
        entries.push(Entry { name, dtype, shape, bytes: bytes[pos..pos + len].to_vec() });
        pos += len;
    }
    if pos != bytes.len() {
        return Err(CheckpointError::Trailing(bytes.len() - pos));
    }
    Ok(entries)
}

pub fn read(path: &Path) -> Result<Vec<Entry>, CheckpointError> {
    let bytes = std::fs::read(path)
        .map_err(|e| CheckpointError::Io { path: path.display().to_string(), message: e.to_string() })?;
    parse(&bytes)
}

/// Replaces every value in `store` with the checkpoint's. The checkpoint
/// must hold exactly the store's tensors; nothing is modified on error.
pub fn restore<T: Scalar>(store: &mut ParamStore<T>, entries: &[Entry]) -> Result<(), CheckpointError> {
    if entries.len() != store.len() {
        return Err(CheckpointError::Format(format!(
            "checkpoint holds {} tensors, model has {}",
            entries.len(),
            store.len()
        )));
    }
    let mut values = Vec::with_capacity(entries.len());
    let mut seen = vec![false; store.len()];
    for e in entries {
        let mismatch = |reason: String| CheckpointError::Mismatch { name: e.name.clone(), reason };
        let id = store.id(&e.name).ok_or_else(|| mismatch("not a model parameter".into()))?;
        if std::mem::replace(&mut seen[id.index()], true) {
            return Err(mismatch("listed twice".into()));
        }
        if e.dtype != T::DTYPE {
            return Err(mismatch(format!("dtype {} but the model uses {}", e.dtype, T::DTYPE)));
        }
        if e.shape != store.value(id).shape() {
            return Err(mismatch(format!("shape {:?} but the model expects {:?}", e.shape, store.value(id).shape())));
        }
        let data = e.bytes.chunks_exact(T::BYTES).map(T::read_le).collect();
        values.push((id, Tensor::new(e.shape.clone(), data).map_err(|err| mismatch(err.to_string()))?));
    }
    for (id, v) in values {
        *store.value_mut(id) = v;
    }
    Ok(())
}

pub fn load<T: Scalar>(store: &mut ParamStore<T>, path: &Path) -> Result<(), CheckpointError> {
    restore(store, &read(path)?)
}
