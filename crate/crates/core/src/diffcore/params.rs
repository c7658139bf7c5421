use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use indexmap::IndexMap;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "symflow-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub frozen: bool,
}

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(
            name,
            ParamEntry {
                tensor,
                frozen: false,
            },
        );
        Ok(())
    }

    /// He-normal weights (`std = sqrt(2 / fan_in)` times `gain`).
    pub fn insert_he<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        gain: f64,
        rng: &mut R,
    ) -> Result<()> {
        let std = gain * (2.0 / fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<()> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn entry(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.frozen)
    }

    pub fn set_frozen(&mut self, name: &str, frozen: bool) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        e.frozen = frozen;
        Ok(())
    }

    /// Freezes every parameter whose name starts with `prefix`; returns how
    /// many scalar values were frozen.
    pub fn freeze_prefix(&mut self, prefix: &str) -> usize {
        self.entries
            .iter_mut()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, e)| {
                e.frozen = true;
                e.tensor.len()
            })
            .sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_count(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| !e.frozen)
            .map(|e| e.tensor.len())
            .sum()
    }

    /// Copies every entry of `other` into `self`, failing on name clashes.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (name, e) in other.entries {
            if self.entries.contains_key(&name) {
                return Err(Error::Config(format!("duplicate parameter `{name}`")));
            }
            self.entries.insert(name, e);
        }
        Ok(())
    }

    /// Entries whose names start with `prefix`, cloned.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, e)| (n.clone(), e.clone()))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path, meta: &serde_json::Value) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w, meta)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }

    /// Manifest line (JSON) followed by each tensor as little-endian f64, in
    /// manifest order.
    pub fn write_to<W: Write>(&self, w: &mut W, meta: &serde_json::Value) -> Result<()> {
        let manifest = CheckpointManifest {
            format: CHECKPOINT_FORMAT.to_string(),
            format_version: CHECKPOINT_VERSION,
            tensors: self
                .entries
                .iter()
                .map(|(name, e)| TensorRecord {
                    name: name.clone(),
                    shape: e.tensor.shape().to_vec(),
                    frozen: e.frozen,
                })
                .collect(),
            meta: meta.clone(),
        };
        serde_json::to_writer(&mut *w, &manifest)?;
        w.write_all(b"\n")?;
        for e in self.entries.values() {
            for v in e.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<(ParamStore, serde_json::Value)> {
        let mut line = String::new();
        r.read_line(&mut line)?;
        let manifest: CheckpointManifest = serde_json::from_str(line.trim_end())?;
        if manifest.format != CHECKPOINT_FORMAT {
            return Err(Error::Format(format!("not a checkpoint: `{}`", manifest.format)));
        }
        if manifest.format_version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {}",
                manifest.format_version
            )));
        }
        let mut store = ParamStore::new();
        let mut buf = [0u8; 8];
        for rec in manifest.tensors {
            let n: usize = rec.shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Format(format!("truncated tensor `{}`", rec.name)))?;
                data.push(f64::from_le_bytes(buf));
            }
            store.insert(rec.name.clone(), Tensor::new(rec.shape, data)?)?;
            store.set_frozen(&rec.name, rec.frozen)?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after last tensor".into()));
        }
        Ok((store, manifest.meta))
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: String,
    format_version: u32,
    tensors: Vec<TensorRecord>,
    #[serde(default)]
    meta: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    frozen: bool,
}
