//! Named parameter store with SGD updates and a binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!   magic bytes b"CVFPARAMS\x01"
//!   u32 entry count
//!   per entry: u32 name length, name bytes (UTF-8),
//!              u32 rank, u64 extents, f64 values (little-endian, row-major)
//! Entries are sorted by name so the file is deterministic.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::{CvfError, Result};

pub const CHECKPOINT_MAGIC: &[u8] = b"CVFPARAMS\x01";

#[derive(Debug, Default, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    grads: BTreeMap<String, Vec<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: Tensor) {
        self.params.insert(name.to_string(), t);
    }

    /// Insert a tensor initialized from a seeded uniform distribution,
    /// scaled by 1/sqrt(fan_in). Returns without overwriting if present.
    pub fn init_uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, seed: u64) {
        if self.params.contains_key(name) {
            return;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ hash_name(name));
        let scale = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-scale..scale)).collect();
        self.params
            .insert(name.to_string(), Tensor::new(shape, data).expect("valid shape"));
    }

    pub fn init_zeros(&mut self, name: &str, shape: Vec<usize>) {
        self.params
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(shape));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Register a parameter as a trainable graph leaf.
    pub fn attach(&self, graph: &mut Graph, name: &str) -> Result<Var> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| CvfError::InvalidArgument(format!("unknown parameter '{name}'")))?;
        Ok(graph.param(t.clone()))
    }

    /// Accumulate gradients from a graph after `backward`.
    pub fn collect_grad(&mut self, graph: &Graph, name: &str, var: Var) -> Result<()> {
        let g = graph
            .grad(var)
            .ok_or_else(|| CvfError::MissingGradient(name.to_string()))?;
        let buf = self
            .grads
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in buf.iter_mut().zip(g) {
            *a += *b;
        }
        Ok(())
    }

    /// Like [`Self::collect_grad`], but a parameter the loss never touched
    /// accumulates an explicit zero gradient instead of erroring.
    pub fn collect_grad_or_zero(&mut self, graph: &Graph, name: &str, var: Var) -> Result<()> {
        if graph.grad(var).is_some() {
            return self.collect_grad(graph, name, var);
        }
        let n = self
            .params
            .get(name)
            .ok_or_else(|| CvfError::InvalidArgument(format!("unknown parameter '{name}'")))?
            .numel();
        self.grads.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        Ok(())
    }

    pub fn grad_of(&self, name: &str) -> Option<&[f64]> {
        self.grads.get(name).map(|v| v.as_slice())
    }

    /// p <- p - lr * grad for every parameter; clears gradients. Errors if
    /// any parameter has no gradient.
    pub fn sgd_step(&mut self, learning_rate: f64) -> Result<()> {
        for name in self.params.keys() {
            if !self.grads.contains_key(name) {
                return Err(CvfError::MissingGradient(name.clone()));
            }
        }
        for (name, t) in self.params.iter_mut() {
            let g = &self.grads[name];
            for (p, gv) in t.data_mut().iter_mut().zip(g) {
                *p -= learning_rate * gv;
            }
        }
        self.grads.clear();
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.grads.clear();
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for (name, t) in &self.params {
            f.write_all(&(name.len() as u32).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            f.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                f.write_all(&(d as u64).to_le_bytes())?;
            }
            for &v in t.data() {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::fs::File::open(path)?;
        let mut magic = [0u8; 10];
        f.read_exact(&mut magic)
            .map_err(|_| CvfError::Checkpoint("file shorter than magic header".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(CvfError::Checkpoint("bad magic header".into()));
        }
        let count = read_u32(&mut f)? as usize;
        let mut store = Self::new();
        for i in 0..count {
            let name_len = read_u32(&mut f)? as usize;
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name)
                .map_err(|_| CvfError::Checkpoint(format!("truncated name in entry {i}")))?;
            let name = String::from_utf8(name)
                .map_err(|_| CvfError::Checkpoint(format!("non-UTF8 name in entry {i}")))?;
            let rank = read_u32(&mut f)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                f.read_exact(&mut b)
                    .map_err(|_| CvfError::Checkpoint(format!("truncated shape in '{name}'")))?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                f.read_exact(&mut b)
                    .map_err(|_| CvfError::Checkpoint(format!("truncated payload in '{name}'")))?;
                data.push(f64::from_le_bytes(b));
            }
            store.insert(&name, Tensor::new(shape, data).map_err(|e| {
                CvfError::Checkpoint(format!("bad shape in '{name}': {e}"))
            })?);
        }
        Ok(store)
    }
}

fn read_u32(f: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    f.read_exact(&mut b)
        .map_err(|_| CvfError::Checkpoint("truncated integer field".into()))?;
    Ok(u32::from_le_bytes(b))
}

fn hash_name(name: &str) -> u64 {
    // FNV-1a, keeps per-parameter init streams independent of insertion order.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
