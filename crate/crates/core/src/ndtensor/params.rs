use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{Result, Tensor, TensorError};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPLN";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (magic {0:?})")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated record for parameter {0:?}")]
    Truncated(String),
    #[error("parameter name is not UTF-8")]
    BadName,
}

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Default)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `data` as a fresh trainable leaf under `name`.
    pub fn insert(&mut self, name: &str, data: Vec<f64>, shape: &[usize]) -> Result<()> {
        self.tensors.insert(name.to_string(), Tensor::param(data, shape)?);
        Ok(())
    }

    /// Stores an existing tensor as-is, keeping its identity in the graph.
    pub fn insert_tensor(&mut self, name: &str, tensor: Tensor) {
        self.tensors.insert(name.to_string(), tensor);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> Vec<String> {
        self.tensors.keys().cloned().collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn zero_grads(&self) {
        self.tensors.values().for_each(Tensor::zero_grad);
    }

    /// Copies every entry whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Inserts or replaces all entries of `other`.
    pub fn merge(&mut self, other: &ParamStore) {
        for (k, v) in &other.tensors {
            self.tensors.insert(k.clone(), v.clone());
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::result::Result<(), CheckpointError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        for (name, t) in &self.tensors {
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name.as_bytes())?;
            w.write_u32::<LittleEndian>(t.rank() as u32)?;
            for &e in t.shape() {
                w.write_u64::<LittleEndian>(e as u64)?;
            }
            for &v in t.data() {
                w.write_f32::<LittleEndian>(v as f32)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> std::result::Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let mut store = ParamStore::new();
        loop {
            let name_len = match r.read_u32::<LittleEndian>() {
                Ok(n) => n as usize,
                Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(e.into()),
            };
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)
                .map_err(|_| CheckpointError::Truncated(String::from_utf8_lossy(&name).into()))?;
            let name = String::from_utf8(name).map_err(|_| CheckpointError::BadName)?;
            let truncated = |_| CheckpointError::Truncated(name.clone());
            let rank = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u64::<LittleEndian>().map(|e| e as usize))
                .collect::<io::Result<Vec<_>>>()
                .map_err(truncated)?;
            let n: usize = shape.iter().product();
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(truncated)?;
            store.tensors.insert(
                name.clone(),
                Tensor::param(data.into_iter().map(f64::from).collect(), &shape)
                    .map_err(|_| CheckpointError::Truncated(name))?,
            );
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::result::Result<(), CheckpointError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> std::result::Result<Self, CheckpointError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

/// Rounds through `f32`, the storage precision of checkpoints.
pub fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}
