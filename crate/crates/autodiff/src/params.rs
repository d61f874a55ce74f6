//! Named parameter storage, gradient buffers, the Adam optimizer and the
//! checkpoint container.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{AdError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    value: Tensor,
}

/// Ordered collection of named parameter tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    frozen: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(Entry { name, value });
        ParamId(self.entries.len() - 1)
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// A frozen store loads into graphs as constants.
    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.all_finite())
    }

    /// Writes the binary container: magic, count, then per parameter the
    /// name, the shape header and the little-endian `f64` payload.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(e.value.ndim() as u32).to_le_bytes())?;
            for &d in e.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in e.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(AdError::Checkpoint("bad magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CKPT_VERSION {
            return Err(AdError::Checkpoint(format!("unsupported version {version}")));
        }
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| AdError::Checkpoint("non-utf8 name".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            if store.find(&name).is_some() {
                return Err(AdError::Checkpoint(format!("duplicate parameter {name}")));
            }
            store.add(name, Tensor::new(&shape, data)?);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::read_from(bytes.as_slice())
    }

    /// Copies values by name from `other`; shapes must agree.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for e in &mut self.entries {
            let id = other
                .find(&e.name)
                .ok_or_else(|| AdError::Checkpoint(format!("missing parameter {}", e.name)))?;
            let src = other.value(id);
            if src.shape() != e.value.shape() {
                return Err(AdError::Checkpoint(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    e.name,
                    src.shape(),
                    e.value.shape()
                )));
            }
            e.value = src.clone();
        }
        Ok(())
    }
}

const CKPT_MAGIC: &[u8; 4] = b"DTCK";
const CKPT_VERSION: u32 = 1;

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Gradient buffers aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self { grads: store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect() }
    }

    pub fn accumulate(&mut self, pairs: &[(ParamId, Tensor)]) {
        for (id, g) in pairs {
            self.grads[id.0].add_assign(g);
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.grads.iter_mut().for_each(|g| g.scale_assign(factor));
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.value(id).shape())).collect();
        Self { config, m: zeros.clone(), v: zeros, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let g = grads.get(id).data();
            let m = self.m[id.0].data_mut();
            let v = self.v[id.0].data_mut();
            let p = store.value_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mh = m[k] / bc1;
                let vh = v[k] / bc2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Plain `key = value` manifest accompanying a checkpoint.
pub fn write_manifest(path: &Path, entries: &BTreeMap<String, String>) -> Result<()> {
    let mut text = String::new();
    for (k, v) in entries {
        text.push_str(k);
        text.push_str(" = ");
        text.push_str(v);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = BTreeMap::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| AdError::Checkpoint(format!("bad manifest line: {line}")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}
