//! Binary item feature tables.
//!
//! ```text
//! HMFT\t1\t<n_rows>\t<dim>\n
//! <item_id>\t<offset>\n      (n_rows lines)
//! <n_rows * dim little-endian f32>
//! ```
//! Row `offset` of the binary section holds the vector of `item_id`.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use super::{io_err, DataError, Result};

const MAGIC: &str = "HMFT";
const VERSION: &str = "1";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    pub dim: usize,
    ids: Vec<String>,
    data: Vec<f32>,
    index: HashMap<String, usize>,
}

impl FeatureTable {
    pub fn new(dim: usize, rows: Vec<(String, Vec<f32>)>) -> Result<Self> {
        if dim == 0 {
            return Err(DataError::Invalid("feature dimension must be positive".into()));
        }
        let mut ids = Vec::with_capacity(rows.len());
        let mut data = Vec::with_capacity(rows.len() * dim);
        let mut index = HashMap::new();
        for (id, v) in rows {
            if v.len() != dim {
                return Err(DataError::Invalid(format!("feature row `{id}` has {} values, expected {dim}", v.len())));
            }
            if index.insert(id.clone(), ids.len()).is_some() {
                return Err(DataError::Invalid(format!("duplicate feature row `{id}`")));
            }
            ids.push(id);
            data.extend(v);
        }
        Ok(Self { dim, ids, data, index })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn get(&self, item: &str) -> Option<&[f32]> {
        self.index.get(item).map(|&r| &self.data[r * self.dim..(r + 1) * self.dim])
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = format!("{MAGIC}\t{VERSION}\t{}\t{}\n", self.ids.len(), self.dim).into_bytes();
        for (offset, id) in self.ids.iter().enumerate() {
            out.extend(format!("{id}\t{offset}\n").bytes());
        }
        for x in &self.data {
            out.extend(x.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| DataError::Feature { path: path.to_path_buf(), reason };
        let mut pos = 0;
        let mut next_line = |what: &str| -> Result<&str> {
            let end = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad(format!("truncated while reading {what}")))?;
            let line = std::str::from_utf8(&bytes[pos..pos + end]).map_err(|_| bad(format!("{what} is not UTF-8")))?;
            pos += end + 1;
            Ok(line)
        };
        let header: Vec<&str> = next_line("header")?.split('\t').collect();
        if header.len() != 4 || header[0] != MAGIC {
            return Err(bad("missing HMFT header".into()));
        }
        if header[1] != VERSION {
            return Err(bad(format!("unsupported version {}", header[1])));
        }
        let n: usize = header[2].parse().map_err(|_| bad(format!("bad row count `{}`", header[2])))?;
        let dim: usize = header[3].parse().map_err(|_| bad(format!("bad dimension `{}`", header[3])))?;
        if dim == 0 {
            return Err(bad("dimension must be positive".into()));
        }
        let mut slots: Vec<Option<String>> = vec![None; n];
        for row in 0..n {
            let line = next_line("index")?;
            let (id, off) = line.split_once('\t').ok_or_else(|| bad(format!("index row {row} is malformed")))?;
            let off: usize = off.parse().map_err(|_| bad(format!("bad offset `{off}` for `{id}`")))?;
            if off >= n || slots[off].is_some() {
                return Err(bad(format!("offset {off} for `{id}` is out of range or repeated")));
            }
            slots[off] = Some(id.to_string());
        }
        let expected = n * dim * 4;
        let body = &bytes[pos..];
        if body.len() != expected {
            return Err(bad(format!("expected {expected} bytes of vectors, found {}", body.len())));
        }
        let values: Vec<f32> = body.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let rows = slots
            .into_iter()
            .enumerate()
            .map(|(off, id)| (id.expect("offsets form a permutation"), values[off * dim..(off + 1) * dim].to_vec()))
            .collect();
        Self::new(dim, rows).map_err(|e| bad(e.to_string()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, path)
    }

    /// Reads only the header line, returning `(n_rows, dim)`.
    pub fn read_header(path: &Path) -> Result<(usize, usize)> {
        use std::io::BufRead;
        let f = std::fs::File::open(path).map_err(io_err(path))?;
        let mut line = String::new();
        std::io::BufReader::new(f).read_line(&mut line).map_err(io_err(path))?;
        let parts: Vec<&str> = line.trim_end().split('\t').collect();
        let bad = || DataError::Feature { path: path.to_path_buf(), reason: "missing HMFT header".into() };
        if parts.len() != 4 || parts[0] != MAGIC {
            return Err(bad());
        }
        Ok((parts[2].parse().map_err(|_| bad())?, parts[3].parse().map_err(|_| bad())?))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(io_err(path))?;
        f.write_all(&self.to_bytes()).map_err(io_err(path))
    }
}
