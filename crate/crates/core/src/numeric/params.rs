//! Named parameters and the `HADW` checkpoint format.
//!
//! Layout (little-endian): magic `HADW`, version u32, count u64, then per
//! parameter: name length u32, UTF-8 name, rank u32, dims u64 × rank,
//! f32 data row-major.

use std::collections::HashMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};

use super::{Scalar, Tensor};
use crate::error::{HadError, Result};
use crate::rng::Rng;

const MAGIC: &[u8; 4] = b"HADW";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<F> {
    pub name: String,
    pub value: Tensor<F>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<F> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(HadError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, value });
        Ok(id)
    }

    pub fn add_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut Rng) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).map_err(|e| HadError::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::of(dist.sample(rng))).collect();
        self.add(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn add_const(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape, F::of(v)))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| HadError::UnknownParameter(name.to_string()))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<F> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<F>> {
        self.by_name.get(name).map(|&id| self.get(id))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(p.value.len() * 4);
            for &x in p.value.data() {
                buf.extend_from_slice(&(x.f64() as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    /// Reads a checkpoint into a fresh store, preserving file order.
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let bad = |reason: &str| HadError::BadFile {
            what: "checkpoint",
            reason: reason.to_string(),
        };
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = read_u64(r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
            let rank = read_u32(r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut raw = vec![0u8; n * 4];
            r.read_exact(&mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| F::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
                .collect();
            store.add(name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| {
            std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))
        })?;
        Self::read_from(&mut bytes.as_slice())
    }

    /// Copies every parameter of `other` into the same-named parameter here.
    /// Returns the number of parameters copied.
    pub fn load_matching(&mut self, other: &ParamStore<F>) -> Result<usize> {
        for p in &other.params {
            let id = self.id(&p.name)?;
            let mine = self.get_mut(id);
            if mine.shape() != p.value.shape() {
                return Err(HadError::dims(
                    p.name.clone(),
                    format!("{:?}", mine.shape()),
                    format!("{:?}", p.value.shape()),
                ));
            }
            *mine = p.value.clone();
        }
        Ok(other.params.len())
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
