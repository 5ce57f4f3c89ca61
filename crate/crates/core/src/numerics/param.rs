//! Named parameters and the on-disk checkpoint container.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes  "STKCKPT\0"
//! version  u32      currently 1
//! count    u32      number of parameters
//! repeated count times:
//!   name_len u32, name utf-8 bytes
//!   trainable u8 (0 or 1)
//!   ndim u32, dims u64 x ndim
//!   values f64 x product(dims)
//! ```

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fs::File;
use std::hash::{Hash, Hasher};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"STKCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME_LEN: usize = 4096;
const MAX_RANK: usize = 8;
const READ_CHUNK: usize = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Arc<Tensor>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter name {name}")));
        }
        if !value.is_finite() {
            return Err(Error::Numerical(format!("parameter {name} initialized non-finite")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value: Arc::new(value),
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::Validation(format!("checkpoint lacks parameter {name}")))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Sets the trainable flag on every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in &mut self.params {
            if p.name.starts_with(prefix) {
                p.trainable = trainable;
            }
        }
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> + '_ {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Hash over names, shapes, and exact value bits of the parameters selected by `filter`.
    pub fn fingerprint(&self, filter: impl Fn(&Parameter) -> bool) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.params.iter().filter(|p| filter(p)) {
            p.name.hash(&mut h);
            p.value.shape().hash(&mut h);
            for v in p.value.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    /// Copies values from `other` for every parameter present in both with equal shape.
    pub fn copy_matching(&mut self, other: &ParamStore) -> usize {
        let mut copied = 0;
        for p in &mut self.params {
            if let Some(id) = other.id(&p.name) {
                let src = &other.params[id.0].value;
                if src.shape() == p.value.shape() {
                    p.value = Arc::clone(src);
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        w.write_u32::<LittleEndian>(self.params.len() as u32)?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name)?;
            w.write_u8(u8::from(p.trainable))?;
            w.write_u32::<LittleEndian>(p.value.shape().len() as u32)?;
            for &d in p.value.shape() {
                w.write_u64::<LittleEndian>(d as u64)?;
            }
            for &v in p.value.data() {
                w.write_f64::<LittleEndian>(v)?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r, &path.display().to_string())
    }

    pub fn read_from(r: &mut impl Read, origin: &str) -> Result<Self> {
        Self::read_body(r, origin).map_err(|e| match e {
            Error::Io(io) if io.kind() == std::io::ErrorKind::UnexpectedEof => Error::Format {
                path: origin.to_string(),
                message: "truncated checkpoint".into(),
            },
            other => other,
        })
    }

    fn read_body(r: &mut impl Read, origin: &str) -> Result<Self> {
        let bad = |message: String| Error::Format {
            path: origin.to_string(),
            message,
        };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a parameter checkpoint".into()));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("checkpoint version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let count = r.read_u32::<LittleEndian>()? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.read_u32::<LittleEndian>()? as usize;
            if len > MAX_NAME_LEN {
                return Err(bad(format!("parameter name of {len} bytes")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| bad(e.to_string()))?;
            let trainable = r.read_u8()? != 0;
            let ndim = r.read_u32::<LittleEndian>()? as usize;
            if ndim > MAX_RANK {
                return Err(bad(format!("tensor of rank {ndim}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.read_u64::<LittleEndian>()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| bad(format!("shape {shape:?} overflows")))?;
            // grow chunk by chunk so a corrupt shape fails at end of file
            // instead of allocating up front
            let mut data = Vec::new();
            while data.len() < n {
                let start = data.len();
                data.resize(start + (n - start).min(READ_CHUNK), 0.0);
                r.read_f64_into::<LittleEndian>(&mut data[start..])?;
            }
            store.add(name, Tensor::new(shape, data)?, trainable)?;
        }
        Ok(store)
    }

    /// Replaces values in `self` with those from a checkpoint, requiring an
    /// exact match of names and shapes.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let other = ParamStore::load(path)?;
        for p in &self.params {
            let id = other.id(&p.name).ok_or_else(|| {
                Error::Validation(format!("{} lacks parameter {}", path.display(), p.name))
            })?;
            let shape = other.value(id).shape();
            if shape != p.value.shape() {
                return Err(Error::Validation(format!(
                    "parameter {} has shape {:?} in {}, model expects {:?}",
                    p.name,
                    shape,
                    path.display(),
                    p.value.shape()
                )));
            }
        }
        self.copy_matching(&other);
        Ok(())
    }
}

/// Gradients keyed by parameter, summed over however many tapes contributed.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Vec<f64>>>,
}

impl ParamGrads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &[f64]) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(g) => g.iter_mut().zip(grad).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }

    pub fn merge(&mut self, other: &ParamGrads) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }
}
