//! Named parameter storage, seeded initialization and checkpoint I/O.
//!
//! A checkpoint is two files: a text manifest with one `name<TAB>shape<TAB>offset`
//! line per parameter (shape as `AxBxC`, offset in bytes) and a flat blob of
//! little-endian `f64` values in manifest order.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{io_err, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Adds a parameter drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Tensor::new(shape, data).expect("valid parameter shape"))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.add(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.values.iter().map(Tensor::numel).sum()
    }

    /// Puts every parameter on `tape`; those for which `trainable` holds
    /// become gradient-tracking leaves, the rest constants.
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(ParamId) -> bool) -> Bindings {
        Bindings(
            self.ids()
                .map(|id| tape.leaf(self.values[id.0].clone(), trainable(id)))
                .collect(),
        )
    }

    /// Plain SGD: `p -= lr * grad` for every id with a gradient on `tape`.
    /// Returns the number of parameters updated.
    pub fn sgd_step(&mut self, tape: &Tape, bindings: &Bindings, ids: &[ParamId], lr: f64) -> usize {
        let mut updated = 0;
        for &id in ids {
            if let Some(g) = tape.grad(bindings.var(id)) {
                for (p, gv) in self.values[id.0].data_mut().iter_mut().zip(g) {
                    *p -= lr * gv;
                }
                updated += 1;
            }
        }
        updated
    }

    pub fn manifest(&self) -> String {
        let mut out = String::new();
        let mut offset = 0usize;
        for (name, t) in self.names.iter().zip(&self.values) {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            writeln!(out, "{name}\t{}\t{offset}", shape.join("x")).expect("write to string");
            offset += t.numel() * 8;
        }
        out
    }

    pub fn blob(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.total_values() * 8);
        for t in &self.values {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Writes `<stem>.manifest` and `<stem>.bin` next to each other.
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let blob_path = blob_path(manifest_path);
        fs::write(manifest_path, self.manifest()).map_err(io_err(manifest_path))?;
        fs::write(&blob_path, self.blob()).map_err(io_err(&blob_path))?;
        Ok(())
    }

    /// Loads values into this store. Names, order and shapes must match the
    /// manifest exactly; nothing is modified unless the whole checkpoint
    /// validates.
    pub fn load(&mut self, manifest_path: &Path) -> Result<()> {
        let manifest = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
        let blob_path = blob_path(manifest_path);
        let blob = fs::read(&blob_path).map_err(io_err(&blob_path))?;
        self.load_from(&manifest, &blob)
    }

    pub fn load_from(&mut self, manifest: &str, blob: &[u8]) -> Result<()> {
        let lines: Vec<&str> = manifest.lines().filter(|l| !l.trim().is_empty()).collect();
        if lines.len() != self.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters, model has {}",
                lines.len(),
                self.len()
            )));
        }
        let mut staged = Vec::with_capacity(self.len());
        let mut expected_offset = 0usize;
        for (line, (name, current)) in lines.iter().zip(self.names.iter().zip(&self.values)) {
            let fields: Vec<&str> = line.split('\t').collect();
            let [n, shape, offset] = fields[..] else {
                return Err(Error::Format(format!("malformed manifest line `{line}`")));
            };
            if n != name {
                return Err(Error::Format(format!("expected parameter `{name}`, found `{n}`")));
            }
            let shape: Vec<usize> = shape
                .split('x')
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Format(format!("bad shape in `{line}`")))?;
            if shape != current.shape() {
                return Err(Error::Format(format!(
                    "parameter `{name}` has shape {shape:?} in checkpoint but {:?} in model",
                    current.shape()
                )));
            }
            let offset: usize = offset
                .parse()
                .map_err(|_| Error::Format(format!("bad offset in `{line}`")))?;
            if offset != expected_offset {
                return Err(Error::Format(format!(
                    "parameter `{name}` at offset {offset}, expected {expected_offset}"
                )));
            }
            let end = offset + current.numel() * 8;
            let bytes = blob
                .get(offset..end)
                .ok_or_else(|| Error::Format(format!("blob too short for parameter `{name}`")))?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            staged.push(Tensor::new(&shape, data)?);
            expected_offset = end;
        }
        if expected_offset != blob.len() {
            return Err(Error::Format(format!(
                "blob has {} bytes, manifest covers {expected_offset}",
                blob.len()
            )));
        }
        self.values = staged;
        Ok(())
    }
}

pub fn blob_path(manifest_path: &Path) -> std::path::PathBuf {
    manifest_path.with_extension("bin")
}

/// Tape handles for every parameter of a [`ParamStore`], indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bindings(Vec<Var>);

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Points `id` at another tape node, e.g. a perturbed copy in a gradient check.
    pub fn set(&mut self, id: ParamId, var: Var) {
        self.0[id.0] = var;
    }
}
