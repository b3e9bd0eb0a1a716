use candle_core::{DType, Device, Tensor, Var};
use indexmap::IndexMap;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named trainable tensors in layer order, tagged with the hash of the
/// architecture config that produced them.
#[derive(Debug, Clone)]
pub struct ParamSet {
    config_hash: String,
    tensors: IndexMap<String, Var>,
}

/// Hex SHA-256 of the config's JSON serialization.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_vec(config).expect("config serializes");
    hex::encode(Sha256::digest(json))
}

impl ParamSet {
    pub fn new(config_hash: impl Into<String>) -> Self {
        Self { config_hash: config_hash.into(), tensors: IndexMap::new() }
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.tensors.insert(name, Var::from_tensor(&tensor)?);
        Ok(())
    }

    /// Gaussian-initialized `f32` tensor drawn from `rng`.
    pub fn insert_gaussian(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        mean: f64,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(mean as f32, std as f32).map_err(|e| Error::Config(e.to_string()))?;
        let values: Vec<f32> = (0..n).map(|_| dist.sample(rng)).collect();
        self.insert(name, Tensor::from_vec(values, shape, &Device::Cpu)?)
    }

    pub fn insert_constant(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<()> {
        let t = (Tensor::ones(shape, DType::F32, &Device::Cpu)? * value)?;
        self.insert(name, t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .map(|v| v.as_tensor())
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.tensors.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|v| v.elem_count()).sum()
    }

    /// Deep copy with fresh storage, so updates to one do not reach the other.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = Self::new(self.config_hash.clone());
        for (name, v) in &self.tensors {
            out.tensors.insert(name.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(out)
    }

    pub fn host_values(&self, name: &str) -> Result<Vec<f32>> {
        Ok(self.get(name)?.flatten_all()?.to_vec1()?)
    }

    /// Name of the first tensor holding a NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Result<Option<String>> {
        for (name, v) in &self.tensors {
            let vals: Vec<f32> = v.as_tensor().flatten_all()?.to_vec1()?;
            if vals.iter().any(|x| !x.is_finite()) {
                return Ok(Some(name.clone()));
            }
        }
        Ok(None)
    }

    /// Overwrites every tensor with the matching entry of `values`, checking
    /// names and shapes first so nothing changes on error.
    pub fn assign_from(&self, values: &IndexMap<String, (Vec<usize>, Vec<f32>)>) -> Result<()> {
        if values.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                values.len()
            )));
        }
        for (name, var) in &self.tensors {
            let (shape, data) = values
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
            if shape.as_slice() != var.dims() || data.len() != var.elem_count() {
                return Err(Error::Checkpoint(format!(
                    "tensor {name}: shape {shape:?} does not match {:?}",
                    var.dims()
                )));
            }
        }
        for (name, var) in &self.tensors {
            let (shape, data) = &values[name];
            var.set(&Tensor::from_slice(data, shape.as_slice(), &Device::Cpu)?)?;
        }
        Ok(())
    }

    pub fn to_host(&self) -> Result<IndexMap<String, (Vec<usize>, Vec<f32>)>> {
        self.tensors
            .iter()
            .map(|(k, v)| Ok((k.clone(), (v.dims().to_vec(), v.as_tensor().flatten_all()?.to_vec1()?))))
            .collect()
    }
}
