//! `.rblb` checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "RBLB1"
//! u64 header_len, header_len bytes of JSON
//! u32 array_count
//! per array: u32 name_len, name, u32 ndim, ndim × u64 dims, u64 byte_len, f32 data
//! ```
//!
//! Arrays are `<store>/<param>` for network weights and
//! `opt:<name>/m/<param>`, `opt:<name>/v/<param>` for Adam moments.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetworkSpec, ParamStore};
use crate::error::{Error, Result};
use crate::numerics::{AdamHyper, Method, OptimizerState, Shape, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"RBLB1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub stores: BTreeMap<String, ParamStore>,
    pub optimizers: BTreeMap<String, OptimizerState>,
    /// Free-form run metadata (step, learning rate, config hash, ...).
    pub metadata: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
struct StoreHeader {
    spec: NetworkSpec,
    seed: u64,
    spec_hash: String,
}

#[derive(Serialize, Deserialize)]
struct OptimizerHeader {
    method: Method,
    hyper: AdamHyper,
    step: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: u32,
    stores: BTreeMap<String, StoreHeader>,
    optimizers: BTreeMap<String, OptimizerHeader>,
    metadata: serde_json::Value,
}

fn put_array(buf: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    buf.extend_from_slice(&((data.len() * 4) as u64).to_le_bytes());
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut arrays: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
    let mut stores = BTreeMap::new();
    for (name, store) in &ckpt.stores {
        if !store.all_finite() {
            return Err(Error::invalid(
                "save checkpoint",
                format!("store `{name}` has non-finite values"),
            ));
        }
        stores.insert(
            name.clone(),
            StoreHeader {
                spec: store.spec,
                seed: store.seed,
                spec_hash: store.spec_hash(),
            },
        );
        for (p, t) in store.params() {
            arrays.push((format!("{name}/{p}"), t.shape().dims().to_vec(), t.data()));
        }
    }
    let mut optimizers = BTreeMap::new();
    for (name, opt) in &ckpt.optimizers {
        optimizers.insert(
            name.clone(),
            OptimizerHeader {
                method: opt.method,
                hyper: opt.hyper,
                step: opt.step,
            },
        );
        for (p, m) in &opt.first_moment {
            arrays.push((format!("opt:{name}/m/{p}"), vec![m.len()], m));
        }
        for (p, v) in &opt.second_moment {
            arrays.push((format!("opt:{name}/v/{p}"), vec![v.len()], v));
        }
    }
    let header = serde_json::to_vec(&Header {
        format: FORMAT_VERSION,
        stores,
        optimizers,
        metadata: ckpt.metadata.clone(),
    })?;

    let mut buf = Vec::with_capacity(header.len() + 64);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, dims, data) in arrays {
        put_array(&mut buf, &name, &dims, data);
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::CorruptCheckpoint {
            path: self.path.to_path_buf(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| self.corrupt(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.corrupt("length overflow"))
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    if bytes.len() >= CHECKPOINT_MAGIC.len() && &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC
    {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    r.take(CHECKPOINT_MAGIC.len())?;
    let header_len = r.len()?;
    let header: Header = serde_json::from_slice(r.take(header_len)?)
        .map_err(|e| r.corrupt(format!("header: {e}")))?;
    if header.format != FORMAT_VERSION {
        return Err(r.corrupt(format!("unknown format version {}", header.format)));
    }

    let count = r.u32()?;
    let mut arrays: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| r.corrupt("array name is not UTF-8"))?
            .to_string();
        let ndim = r.u32()? as usize;
        if ndim > 8 {
            return Err(r.corrupt(format!("array `{name}` has {ndim} dims")));
        }
        let dims = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
        let byte_len = r.len()?;
        let numel: usize = dims.iter().product();
        if byte_len != numel * 4 {
            return Err(r.corrupt(format!(
                "array `{name}`: {byte_len} bytes for dims {dims:?}"
            )));
        }
        let data = r
            .take(byte_len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        arrays.insert(name, (dims, data));
    }
    if r.pos != bytes.len() {
        return Err(r.corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let take_array = |arrays: &mut BTreeMap<String, (Vec<usize>, Vec<f32>)>, key: &str| {
        arrays.remove(key).ok_or_else(|| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: format!("missing array `{key}`"),
        })
    };

    let mut stores = BTreeMap::new();
    for (name, h) in header.stores {
        if h.spec.hash() != h.spec_hash {
            return Err(Error::CorruptCheckpoint {
                path: path.to_path_buf(),
                reason: format!("store `{name}` spec does not match its recorded hash"),
            });
        }
        let mut params = BTreeMap::new();
        for (p, shape) in h.spec.layout() {
            let (dims, data) = take_array(&mut arrays, &format!("{name}/{p}"))?;
            if dims != shape.dims() {
                return Err(Error::CorruptCheckpoint {
                    path: path.to_path_buf(),
                    reason: format!("`{name}/{p}` has dims {dims:?}, spec wants {shape}"),
                });
            }
            params.insert(
                p,
                Tensor::from_vec(Shape::new(dims[0], dims[1], dims[2], dims[3]), data)?,
            );
        }
        stores.insert(name, ParamStore::from_params(h.spec, h.seed, params)?);
    }

    let mut optimizers = BTreeMap::new();
    for (name, h) in header.optimizers {
        let mut state = OptimizerState {
            method: h.method,
            hyper: h.hyper,
            step: h.step,
            ..Default::default()
        };
        let m_prefix = format!("opt:{name}/m/");
        let v_prefix = format!("opt:{name}/v/");
        let keys: Vec<String> = arrays
            .keys()
            .filter(|k| k.starts_with(&m_prefix) || k.starts_with(&v_prefix))
            .cloned()
            .collect();
        for k in keys {
            let (_, data) = take_array(&mut arrays, &k)?;
            if let Some(p) = k.strip_prefix(&m_prefix) {
                state.first_moment.insert(p.to_string(), data);
            } else if let Some(p) = k.strip_prefix(&v_prefix) {
                state.second_moment.insert(p.to_string(), data);
            }
        }
        optimizers.insert(name, state);
    }
    if let Some(extra) = arrays.keys().next() {
        return Err(Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason: format!("unreferenced array `{extra}`"),
        });
    }

    Ok(Checkpoint {
        stores,
        optimizers,
        metadata: header.metadata,
    })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode(ckpt)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

impl Checkpoint {
    /// The named store, provided it was saved with `expected`'s architecture.
    pub fn store(&self, name: &str, expected: &NetworkSpec) -> Result<&ParamStore> {
        let s = self
            .stores
            .get(name)
            .ok_or_else(|| Error::Data(format!("checkpoint has no store `{name}`")))?;
        if s.spec_hash() != expected.hash() {
            return Err(Error::SpecHashMismatch {
                store: name.to_string(),
                expected: expected.hash(),
                found: s.spec_hash(),
            });
        }
        Ok(s)
    }

    /// Loads `path` and verifies each `(store, spec)` pair.
    pub fn load_checked(path: &Path, expected: &[(&str, &NetworkSpec)]) -> Result<Self> {
        let ckpt = load_checkpoint(path)?;
        for (name, spec) in expected {
            ckpt.store(name, spec)?;
        }
        Ok(ckpt)
    }
}
