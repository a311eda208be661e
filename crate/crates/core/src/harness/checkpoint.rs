//! Checkpoint files: the experiment config followed by all parameters and
//! optimizer state.
//!
//! Layout, little-endian: `"TPCK"`, u32 version, u32 config length, the
//! config as TOML, then a parameter store (see [`ParamStore::write_to`]).

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{ExperimentConfig, HarnessError};
use crate::ndtensor::ParamStore;

pub const CHECKPOINT_FILE_MAGIC: &[u8; 4] = b"TPCK";
const VERSION: u32 = 1;
const OPTIM_PREFIX: &str = "optim.";

#[derive(Clone)]
pub struct Checkpoint {
    pub config: ExperimentConfig,
    pub params: ParamStore,
    /// Optimizer moments and step counter.
    pub state: ParamStore,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), HarnessError> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        // Write to a sibling and rename so a crash never leaves a torn file.
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
            let text = self.config.to_toml()?;
            w.write_all(CHECKPOINT_FILE_MAGIC)?;
            w.write_u32::<LittleEndian>(VERSION)?;
            w.write_u32::<LittleEndian>(text.len() as u32)?;
            w.write_all(text.as_bytes())?;
            let mut all = self.params.clone();
            all.merge(&self.state);
            all.write_to(&mut w)?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_FILE_MAGIC {
            return Err(HarnessError::Config(format!("{} is not a training checkpoint", path.display())));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != VERSION {
            return Err(HarnessError::Config(format!("unsupported checkpoint version {version}")));
        }
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut text = vec![0u8; len];
        r.read_exact(&mut text)?;
        let text = String::from_utf8(text).map_err(|_| HarnessError::Config("checkpoint config is not UTF-8".into()))?;
        let config = ExperimentConfig::from_toml(&text)?;
        let all = ParamStore::read_from(r)?;
        let state = all.subset(OPTIM_PREFIX);
        let mut params = all;
        for name in state.names() {
            params.remove(&name);
        }
        Ok(Self { config, params, state })
    }

    /// Optimizer steps taken so far.
    pub fn step(&self) -> u64 {
        self.state.get("optim.step").map(|t| t.item() as u64).unwrap_or(0)
    }
}
