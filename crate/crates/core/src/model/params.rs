//! Named parameter tensors and the checkpoint file format.
//!
//! ```text
//! "DVPSW1\0"                 7 bytes magic
//! version                    u32
//! meta_len                   u32, then meta_len bytes of JSON metadata
//! count                      u32
//! per tensor (name order):
//!     name_len u32, name (UTF-8), ndim u32, dims u64 * ndim,
//!     values f64 * prod(dims)
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Tape, Tensor, Var};
use crate::rng::{self, Rng};

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"DVPSW1\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_ELEMENTS: u64 = 1 << 28;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Missing(format!("parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Entries whose name starts with `prefix`, names kept.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    /// Records every tensor on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &Tape, trainable: bool) -> Result<Bound> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.tensors {
            let var = if trainable {
                tape.leaf(v.clone())?
            } else {
                tape.constant(v.clone())?
            };
            vars.insert(k.clone(), var);
        }
        Ok(Bound { vars })
    }
}

/// Parameters recorded on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Missing(format!("parameter {name:?}")))
    }

    /// Gradients by parameter name; parameters the loss does not reach get
    /// zeros.
    pub fn gradients(&self, tape: &Tape, grads: &mut Gradients) -> ParamStore {
        let mut out = ParamStore::new();
        for (k, &v) in &self.vars {
            let g = grads
                .take(v)
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
            out.insert(k.clone(), g);
        }
        out
    }
}

/// Gaussian weights with standard deviation `1/sqrt(fan_in)`.
pub fn init_weight(rng: &mut Rng, fan_in: usize, fan_out: usize) -> Tensor {
    Tensor::randn([fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Adds `prefix.w [din,dout]` and `prefix.b [dout]`.
pub fn add_linear(store: &mut ParamStore, rng: &mut Rng, prefix: &str, din: usize, dout: usize) {
    store.insert(format!("{prefix}.w"), init_weight(rng, din, dout));
    store.insert(format!("{prefix}.b"), Tensor::zeros([dout]));
}

pub fn add_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(format!("{prefix}.g"), Tensor::ones([d]));
    store.insert(format!("{prefix}.b"), Tensor::zeros([d]));
}

pub fn add_attention(store: &mut ParamStore, rng: &mut Rng, prefix: &str, d: usize) {
    for p in ["q", "k", "v", "o"] {
        add_linear(store, rng, &format!("{prefix}.{p}"), d, d);
    }
}

pub fn init_stream(seed: u64, name: &str) -> Rng {
    rng::stream(seed, name)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// `"tracker"` or `"refiner"`.
    pub stage: String,
    /// Iterations completed.
    pub iteration: usize,
    /// Optimizer steps taken.
    pub adam_step: u64,
    /// Resolved model and training configuration.
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: ParamStore,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&ck.meta).map_err(|e| Error::json("checkpoint metadata", e))?;
    let u32_of =
        |v: usize| u32::try_from(v).map_err(|_| Error::ExtentOverflow(format!("{v} exceeds u32")));
    let mut out = CHECKPOINT_MAGIC.to_vec();
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&u32_of(meta.len())?.to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&u32_of(ck.tensors.len())?.to_le_bytes());
    for (name, t) in ck.tensors.iter() {
        out.extend_from_slice(&u32_of(name.len())?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&u32_of(t.ndim())?.to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let avail = self.bytes.len() - self.pos;
        if n > avail {
            return Err(Error::Truncated {
                offset: self.bytes.len(),
                needed: n - avail,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 7 || &bytes[..7] != CHECKPOINT_MAGIC {
        return Err(Error::UnrecognizedFormat(
            "missing DVPSW1 magic in checkpoint".into(),
        ));
    }
    let mut c = Cursor { bytes, pos: 7 };
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnrecognizedFormat(format!(
            "checkpoint version {version}"
        )));
    }
    let meta_len = c.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(c.take(meta_len)?)
        .map_err(|e| Error::json("checkpoint metadata", e))?;
    let count = c.u32()?;
    let mut tensors = ParamStore::new();
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| Error::Integrity("tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = c.u32()?;
        if ndim > 8 {
            return Err(Error::ExtentOverflow(format!(
                "tensor {name:?} has {ndim} dimensions"
            )));
        }
        let mut dims = Vec::with_capacity(ndim as usize);
        let mut numel: u64 = 1;
        for _ in 0..ndim {
            let d = c.u64()?;
            numel = numel
                .checked_mul(d)
                .filter(|&n| n <= MAX_ELEMENTS)
                .ok_or_else(|| Error::ExtentOverflow(format!("tensor {name:?} is too large")))?;
            dims.push(d as usize);
        }
        let data = c
            .take(numel as usize * 8)?
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        if tensors.contains(&name) {
            return Err(Error::Integrity(format!("duplicate tensor {name:?}")));
        }
        tensors.insert(name, Tensor::new(dims, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes in checkpoint",
            bytes.len() - c.pos
        )));
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode_checkpoint(ck)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
