//! Named parameter storage and the `BPCK` checkpoint format.
//!
//! Checkpoint layout (little endian): magic `BPCK`, u16 version = 1,
//! u32 tensor count, then per tensor: u16 name length, UTF-8 name,
//! u8 trainable flag, u8 rank, rank × u32 dims, f32 payload.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::tape::{Array, Gradients, Tape, Var};
use super::{Result, Tensor, TensorError};

const MAGIC: &[u8; 4] = b"BPCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Name → tensor map. Iteration order is sorted by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, ParamEntry>,
}

/// Tape variables for every parameter of a store, created by [`ParamStore::bind`].
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(TensorError::Precondition(format!(
                "parameter `{name}` already exists"
            )));
        }
        self.entries
            .insert(name.to_string(), ParamEntry { tensor, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Replaces the values of a trainable tensor. Frozen tensors cannot be updated.
    pub fn update(&mut self, name: &str, data: &[f32]) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if !e.trainable {
            return Err(TensorError::Precondition(format!(
                "parameter `{name}` is frozen"
            )));
        }
        if e.tensor.len() != data.len() {
            return Err(TensorError::Mismatch {
                name: name.to_string(),
                detail: format!("{} values for {} elements", data.len(), e.tensor.len()),
            });
        }
        e.tensor.data_mut().copy_from_slice(data);
        Ok(())
    }

    /// Overwrites a trainable tensor with a full replacement of the same shape.
    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let shape_ok = self
            .entries
            .get(name)
            .map(|e| e.tensor.shape() == tensor.shape())
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))?;
        if !shape_ok {
            return Err(TensorError::Mismatch {
                name: name.to_string(),
                detail: format!("shape {:?}", tensor.shape()),
            });
        }
        self.update(name, tensor.data())
    }

    /// SHA-256 over the names, flags, shapes and payloads of the selected tensors.
    pub fn checksum(&self, mut select: impl FnMut(&str, &ParamEntry) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, e) in &self.entries {
            if !select(name, e) {
                continue;
            }
            h.update(name.as_bytes());
            h.update([e.trainable as u8]);
            for d in e.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in e.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Places every tensor on the tape; trainable ones record gradients.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        self.bind_with(tape, |_, e| e.trainable, |_| None)
    }

    /// Binding with control over which entries record gradients and with
    /// optional replacement values (used by gradient checks).
    pub fn bind_with(
        &self,
        tape: &mut Tape,
        mut requires_grad: impl FnMut(&str, &ParamEntry) -> bool,
        mut replace: impl FnMut(&str) -> Option<Array>,
    ) -> Bindings {
        let vars = self
            .entries
            .iter()
            .map(|(name, e)| {
                let value = replace(name).unwrap_or_else(|| e.tensor.to_array());
                let rg = requires_grad(name, e);
                (name.clone(), tape.leaf(value, rg))
            })
            .collect();
        Bindings { vars }
    }

    /// Gradients of trainable entries, keyed by name. Missing gradients are zeros.
    pub fn collect_grads(&self, b: &Bindings, g: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(name, e)| {
                let grad = b
                    .vars
                    .get(name)
                    .and_then(|&v| g.get(v))
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; e.tensor.len()]);
                (name.clone(), grad)
            })
            .collect()
    }

    pub fn encode<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let invalid = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidInput, m);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, e) in &self.entries {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| invalid(format!("name too long: {name}")))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(nb)?;
            w.write_all(&[e.trainable as u8])?;
            let rank = u8::try_from(e.tensor.shape().len())
                .map_err(|_| invalid(format!("rank too large: {name}")))?;
            w.write_all(&[rank])?;
            for &d in e.tensor.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(e.tensor.len() * 4);
            for v in e.tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()
    }

    pub fn decode<R: Read>(mut r: R) -> Result<Self> {
        fn read<const N: usize>(r: &mut impl Read, what: &str) -> Result<[u8; N]> {
            let mut b = [0u8; N];
            r.read_exact(&mut b)
                .map_err(|_| TensorError::Corrupt(format!("truncated while reading {what}")))?;
            Ok(b)
        }
        let magic: [u8; 4] = read(&mut r, "magic")?;
        if &magic != MAGIC {
            return Err(TensorError::Corrupt("bad magic, not a BPCK file".into()));
        }
        let version = u16::from_le_bytes(read(&mut r, "version")?);
        if version != VERSION {
            return Err(TensorError::Corrupt(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(read(&mut r, "tensor count")?);
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(read(&mut r, "name length")?) as usize;
            let mut nb = vec![0u8; len];
            r.read_exact(&mut nb)
                .map_err(|_| TensorError::Corrupt("truncated name".into()))?;
            let name = String::from_utf8(nb)
                .map_err(|_| TensorError::Corrupt("tensor name is not UTF-8".into()))?;
            let [flag] = read::<1>(&mut r, "trainable flag")?;
            let [rank] = read::<1>(&mut r, "rank")?;
            let mut shape = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                shape.push(u32::from_le_bytes(read(&mut r, "dims")?) as usize);
            }
            let n: usize = shape.iter().product();
            let mut payload = vec![0u8; n * 4];
            r.read_exact(&mut payload)
                .map_err(|_| TensorError::Corrupt(format!("truncated payload of `{name}`")))?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            store
                .insert(&name, Tensor::new(shape, data)?, flag != 0)
                .map_err(|_| TensorError::Corrupt(format!("duplicate tensor `{name}`")))?;
        }
        Ok(store)
    }

    /// Replaces every tensor of `self` with the checkpoint's; names, shapes
    /// and flags must agree exactly.
    pub fn load_into(&mut self, other: ParamStore) -> Result<()> {
        for (name, e) in &self.entries {
            let o = other.entries.get(name).ok_or_else(|| TensorError::Mismatch {
                name: name.clone(),
                detail: "missing from checkpoint".into(),
            })?;
            if o.tensor.shape() != e.tensor.shape() || o.trainable != e.trainable {
                return Err(TensorError::Mismatch {
                    name: name.clone(),
                    detail: format!(
                        "expected {:?} (trainable={}), checkpoint has {:?} (trainable={})",
                        e.tensor.shape(),
                        e.trainable,
                        o.tensor.shape(),
                        o.trainable
                    ),
                });
            }
        }
        if let Some(extra) = other.entries.keys().find(|k| !self.entries.contains_key(*k)) {
            return Err(TensorError::Mismatch {
                name: extra.clone(),
                detail: "not part of this model".into(),
            });
        }
        self.entries = other.entries;
        Ok(())
    }
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let io = |source| TensorError::Io {
        path: path.display().to_string(),
        source,
    };
    let f = std::fs::File::create(path).map_err(io)?;
    store.encode(std::io::BufWriter::new(f)).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let f = std::fs::File::open(path).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    ParamStore::decode(std::io::BufReader::new(f))
}
