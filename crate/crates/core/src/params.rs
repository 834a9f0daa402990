//! Named parameter registry, per-forward binding onto a [`Graph`], and the
//! flat binary checkpoint format.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ParamGroup {
    Embedding,
    Backbone,
    Lora,
    Gate,
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor, trainable: bool) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            group,
            value,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0].value;
        if slot.shape() != value.shape() {
            return Err(Error::dim("set_value", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Set the trainable flag for every parameter in `group`.
    pub fn set_group_trainable(&mut self, group: ParamGroup, trainable: bool) {
        for e in &mut self.entries {
            if e.group == group {
                e.trainable = trainable;
            }
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.len()).sum()
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, e)| e.trainable).map(|(id, _)| id).collect()
    }

    /// Bitwise equality of every value and flag.
    pub fn bit_eq(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self.entries.iter().zip(&other.entries).all(|(a, b)| {
                a.name == b.name && a.group == b.group && a.trainable == b.trainable && a.value.bit_eq(&b.value)
            })
    }

    /// Write the parameters whose group is in `groups` (all when empty) as a
    /// flat binary file plus a JSON manifest at `<path>.json`.
    pub fn save_checkpoint(&self, path: &Path, groups: &[ParamGroup]) -> Result<()> {
        let selected: Vec<&ParamEntry> = self
            .entries
            .iter()
            .filter(|e| groups.is_empty() || groups.contains(&e.group))
            .collect();
        let total: usize = selected.iter().map(|e| e.value.len()).sum();
        let mut bytes = Vec::with_capacity(CKPT_HEADER_LEN + 8 * total);
        bytes.extend_from_slice(CKPT_MAGIC);
        bytes.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(selected.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&(total as u64).to_le_bytes());

        let mut manifest = CheckpointManifest {
            format: CKPT_FORMAT.to_string(),
            version: CKPT_VERSION,
            entries: Vec::with_capacity(selected.len()),
        };
        let mut offset = 0;
        for e in selected {
            manifest.entries.push(ManifestEntry {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                offset,
            });
            for v in e.value.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            offset += e.value.len();
        }
        fs::write(path, bytes)?;
        fs::write(manifest_path(path), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    /// Overwrite matching parameters (by name and shape) from a checkpoint.
    /// Returns how many entries were loaded.
    pub fn load_checkpoint(&mut self, path: &Path) -> Result<usize> {
        let manifest: CheckpointManifest = serde_json::from_str(&fs::read_to_string(manifest_path(path))?)?;
        if manifest.format != CKPT_FORMAT || manifest.version != CKPT_VERSION {
            return Err(Error::Parse(format!(
                "unsupported checkpoint {} v{}",
                manifest.format, manifest.version
            )));
        }
        let bytes = fs::read(path)?;
        if bytes.len() < CKPT_HEADER_LEN || &bytes[..8] != CKPT_MAGIC {
            return Err(Error::Parse("bad checkpoint header".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let count = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let total = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
        if version != CKPT_VERSION || count != manifest.entries.len() || bytes.len() != CKPT_HEADER_LEN + 8 * total {
            return Err(Error::Parse("checkpoint header disagrees with manifest".into()));
        }
        let read = |i: usize| f64::from_le_bytes(bytes[CKPT_HEADER_LEN + 8 * i..CKPT_HEADER_LEN + 8 * i + 8].try_into().unwrap());

        let mut loaded = 0;
        for m in &manifest.entries {
            let Some(id) = self.find(&m.name) else {
                continue;
            };
            let len: usize = m.shape.iter().product();
            if m.offset + len > total {
                return Err(Error::Parse(format!("entry {} overruns data", m.name)));
            }
            let value = Tensor::new(m.shape.clone(), (m.offset..m.offset + len).map(read).collect())?;
            self.set_value(id, value)?;
            loaded += 1;
        }
        Ok(loaded)
    }
}

const CKPT_MAGIC: &[u8; 8] = b"TRCCKPT\0";
const CKPT_VERSION: u32 = 1;
const CKPT_FORMAT: &str = "trace-checkpoint";
const CKPT_HEADER_LEN: usize = 24;

#[derive(Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u32,
    pub entries: Vec<ManifestEntry>,
}

/// `offset` counts `f64` elements from the start of the data section.
#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

pub fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Which parameters get `requires_grad` leaves in a bound graph.
#[derive(Clone, Debug)]
pub enum GradMode {
    None,
    Trainable,
    Only(BTreeSet<ParamId>),
}

/// One forward pass: a fresh [`Graph`] with parameters bound lazily as leaves.
pub struct Binder<'a> {
    pub graph: Graph,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    mode: GradMode,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, mode: GradMode) -> Self {
        Binder {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
            mode,
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn var(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let rg = match &self.mode {
            GradMode::None => false,
            GradMode::Trainable => self.store.is_trainable(id),
            GradMode::Only(set) => set.contains(&id),
        };
        let v = self.graph.leaf(self.store.value(id).clone(), rg);
        self.bound[id.0] = Some(v);
        v
    }

    pub fn grad(&self, id: ParamId) -> Option<&Tensor> {
        self.bound[id.0].and_then(|v| self.graph.grad(v))
    }

    /// Gradients of every bound parameter that received one, in id order.
    pub fn grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| self.graph.grad(v)).map(|g| (ParamId(i), g.clone())))
            .collect()
    }
}
