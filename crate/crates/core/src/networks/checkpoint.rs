//! Checkpoint container.
//!
//! Layout, all integers little-endian: the 8-byte magic `CWGCKPT1`, a `u32`
//! format version, a `u64` byte length and that many bytes of JSON header,
//! then a `u32` tensor count. Each tensor is a `u32` name length, the UTF-8
//! name, a `u32` rank, `u64` dimensions and `f64` values in row-major order.
//! Generator tensors are prefixed `generator/`, critic tensors `critic/`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{build_discriminator, build_generator, ArchitectureConfig, Critic, Generator, LossFamily};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"CWGCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;
const GENERATOR_PREFIX: &str = "generator/";
const CRITIC_PREFIX: &str = "critic/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub architecture: ArchitectureConfig,
    pub loss: LossFamily,
    pub step: u64,
    /// Free-form training state (growth counters, schedule position).
    #[serde(default)]
    pub state: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn from_models(generator: &Generator, critic: &Critic, step: u64, state: serde_json::Value) -> Self {
        let mut tensors = BTreeMap::new();
        for (k, v) in generator.store.named_tensors() {
            tensors.insert(format!("{GENERATOR_PREFIX}{k}"), v);
        }
        for (k, v) in critic.store.named_tensors() {
            tensors.insert(format!("{CRITIC_PREFIX}{k}"), v);
        }
        Self {
            header: CheckpointHeader {
                architecture: generator.config.clone(),
                loss: critic.loss,
                step,
                state,
            },
            tensors,
        }
    }

    fn with_prefix(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(prefix).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    /// Rebuilds both models from the stored configuration and loads their
    /// parameters.
    pub fn restore(&self) -> Result<(Generator, Critic)> {
        let mut rng = seeded(0);
        let mut g = build_generator(&self.header.architecture, &mut rng)?;
        let mut c = build_discriminator(&self.header.architecture, self.header.loss, &mut rng)?;
        g.store.load_named(&self.with_prefix(GENERATOR_PREFIX))?;
        c.store.load_named(&self.with_prefix(CRITIC_PREFIX))?;
        Ok((g, c))
    }
}

fn bad(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let header = serde_json::to_vec(&ckpt.header).map_err(|e| bad(path, e))?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(CHECKPOINT_MAGIC)?;
    f.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    f.write_all(&(header.len() as u64).to_le_bytes())?;
    f.write_all(&header)?;
    f.write_all(&(ckpt.tensors.len() as u32).to_le_bytes())?;
    for (name, t) in &ckpt.tensors {
        f.write_all(&(name.len() as u32).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        f.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            f.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    f.flush()?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(self.path, "truncated checkpoint"))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    if cur.take(8)? != CHECKPOINT_MAGIC {
        return Err(bad(path, "not a checkpoint file"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(path, format!("unsupported checkpoint version {version}")));
    }
    let len = cur.u64()? as usize;
    let header: CheckpointHeader = serde_json::from_slice(cur.take(len)?).map_err(|e| bad(path, e))?;
    let count = cur.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let n = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(n)?.to_vec()).map_err(|e| bad(path, e))?;
        let rank = cur.u32()? as usize;
        let shape = (0..rank).map(|_| cur.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let data = cur
            .take(numel.checked_mul(8).ok_or_else(|| bad(path, "tensor too large"))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.insert(name, Tensor::new(&shape, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(bad(path, "trailing bytes after tensors"));
    }
    Ok(Checkpoint { header, tensors })
}
