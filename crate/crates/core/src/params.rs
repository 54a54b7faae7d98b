//! Named parameter storage and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!   u32 format version, u32 record count, then per record:
//!   u32 name length, UTF-8 name bytes, u32 rank, u64 per dimension,
//!   f64 little-endian payload. Round trips are bit exact.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

/// Handle to one parameter tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
struct Entry {
    name: String,
    value: Tensor,
}

/// All trainable tensors of a model, addressed by [`ParamId`] or name.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name:?}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(Entry {
            name: name.to_string(),
            value,
        });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, e)| (ParamId(i), e.name.as_str(), &e.value))
    }

    /// Total number of scalar parameters.
    pub fn total_elems(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let put = |w: &mut BufWriter<File>, bytes: &[u8]| -> Result<()> {
            w.write_all(bytes).map_err(|e| Error::io(path, e))
        };
        put(&mut w, &CHECKPOINT_VERSION.to_le_bytes())?;
        put(&mut w, &(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            put(&mut w, &(e.name.len() as u32).to_le_bytes())?;
            put(&mut w, e.name.as_bytes())?;
            let dims = e.value.shape();
            put(&mut w, &(dims.len() as u32).to_le_bytes())?;
            for d in dims {
                put(&mut w, &(d as u64).to_le_bytes())?;
            }
            for v in e.value.data() {
                put(&mut w, &v.to_le_bytes())?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a checkpoint written by [`ParamStore::save`].
    pub fn load(path: &Path) -> Result<ParamStore> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let version = read_u32(&mut r, path)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version} in {}",
                path.display()
            )));
        }
        let count = read_u32(&mut r, path)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r, path)? as usize;
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes)
                .map_err(|e| Error::io(path, e))?;
            let name = String::from_utf8(name_bytes)
                .map_err(|e| Error::Checkpoint(format!("invalid parameter name: {e}")))?;
            let rank = read_u32(&mut r, path)? as usize;
            if rank != 2 {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has rank {rank}, expected 2"
                )));
            }
            let mut dims = [0usize; 2];
            for d in dims.iter_mut() {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
                *d = u64::from_le_bytes(buf) as usize;
            }
            let numel = dims[0] * dims[1];
            let mut data = vec![0.0f64; numel];
            for v in data.iter_mut() {
                let mut buf = [0u8; 8];
                r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
                *v = f64::from_le_bytes(buf);
            }
            store.add(&name, Tensor::new(dims[0], dims[1], data)?);
        }
        Ok(store)
    }

    /// Overwrites this store's values with same-named records from `other`.
    /// Every parameter here must be present with a matching shape.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for i in 0..self.entries.len() {
            let name = self.entries[i].name.clone();
            let src = other
                .by_name
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))?;
            let src = &other.entries[*src].value;
            if src.shape() != self.entries[i].value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {:?}, expected {:?}",
                    src.shape(),
                    self.entries[i].value.shape()
                )));
            }
            self.entries[i].value = src.clone();
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

/// Per-parameter gradient accumulators, parallel to a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradSet {
    bufs: Vec<Vec<f64>>,
}

impl GradSet {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradSet {
            bufs: store
                .entries
                .iter()
                .map(|e| vec![0.0; e.value.numel()])
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for buf in &mut self.bufs {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        let buf = &mut self.bufs[id.0];
        debug_assert_eq!(buf.len(), grad.len());
        for (b, g) in buf.iter_mut().zip(grad) {
            *b += g;
        }
    }

    pub fn global_norm(&self) -> f64 {
        let sq: f64 = self
            .bufs
            .iter()
            .flat_map(|b| b.iter())
            .map(|v| v * v)
            .sum();
        sq.sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for buf in &mut self.bufs {
            buf.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.bufs.iter()
    }
}
