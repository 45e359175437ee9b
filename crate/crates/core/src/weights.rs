//! Named weight tensors and the NTW1 container format.
//!
//! Layout: magic `NTW1`, then records of
//! `{u32 name_len, name (UTF-8), u32 rank, u32 dims[rank], f32 payload}`,
//! all little-endian. Records are written in name order.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const NTW1_MAGIC: &[u8; 4] = b"NTW1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
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

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn get_any(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    /// Looks up `name` and checks its shape.
    pub fn get(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get_any(name)?;
        if t.shape() != shape {
            return Err(Error::shape(
                "weights",
                name.to_string(),
                format!("{shape:?}"),
                format!("{:?}", t.shape()),
            ));
        }
        Ok(t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    /// Inserts a fan-in-uniform weight and a zero bias under `prefix`.
    pub fn init_layer(&mut self, rng: &SeededRng, prefix: &str, weight_shape: &[usize], fan_in: usize) {
        let wname = format!("{prefix}.weight");
        let w = rng.fan_in_uniform(&wname, weight_shape, fan_in);
        self.insert(wname, w);
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[weight_shape[0]]));
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(NTW1_MAGIC);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, path };
        if cur.take(4, "magic")? != NTW1_MAGIC {
            return Err(Error::format(path, "magic", "expected NTW1"));
        }
        let mut store = WeightStore::new();
        while cur.pos < bytes.len() {
            let name_len = cur.u32("name length")? as usize;
            let name = std::str::from_utf8(cur.take(name_len, "name")?)
                .map_err(|_| Error::format(path, "name", "not valid UTF-8"))?
                .to_string();
            let rank = cur.u32("rank")? as usize;
            if rank == 0 {
                return Err(Error::format(path, &name, "rank must be positive"));
            }
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                let d = cur.u32("dims")? as usize;
                if d == 0 {
                    return Err(Error::format(path, &name, "zero extent"));
                }
                dims.push(d);
            }
            let count: usize = dims.iter().product();
            let payload = cur.take(count * 4, &name)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            if store.contains(&name) {
                return Err(Error::format(path, &name, "duplicate tensor name"));
            }
            store.insert(name, Tensor::from_vec(&dims, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, field, "truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
