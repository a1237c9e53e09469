//! Named parameter storage.
//!
//! Parameters live outside the graph in a flat name → buffer map; each forward
//! pass loads the ones it touches as graph leaves. Names are hierarchical
//! dotted paths ("enc.conv0.w"), which is also the checkpoint blob naming.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    /// Leading extent for graph use: all but the last dim collapse into rows.
    pub fn rows(&self) -> usize {
        self.dims[..self.dims.len() - 1].iter().product::<usize>().max(1)
    }

    pub fn cols(&self) -> usize {
        *self.dims.last().unwrap_or(&1)
    }
}

/// Ordered collection of named parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, dims: Vec<usize>, data: Vec<f64>) -> Result<()> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::InvalidArgument(format!(
                "param {name}: dims {dims:?} imply {n} values, got {}",
                data.len()
            )));
        }
        if self.entries.insert(name.to_string(), Param { dims, data }).is_some() {
            return Err(Error::Internal(format!("param {name} registered twice")));
        }
        Ok(())
    }

    pub fn add_zeros(&mut self, name: &str, dims: Vec<usize>) -> Result<()> {
        let n: usize = dims.iter().product();
        self.insert(name, dims, vec![0.0; n])
    }

    /// Gaussian init with the given standard deviation.
    pub fn add_normal(&mut self, name: &str, dims: Vec<usize>, std: f64, rng: &mut Rng) -> Result<()> {
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        self.insert(name, dims, data)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Internal(format!("unknown param {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::Internal(format!("unknown param {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    /// Iterate in name order (the fixed reduction/update order everywhere).
    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.values().map(|p| p.data.len()).sum()
    }

    /// Zero every parameter whose name starts with `prefix`.
    pub fn zero_matching(&mut self, prefix: &str) -> usize {
        let mut hit = 0;
        for (name, p) in self.entries.iter_mut() {
            if name.starts_with(prefix) {
                p.data.iter_mut().for_each(|v| *v = 0.0);
                hit += 1;
            }
        }
        hit
    }

    pub fn to_tensor(&self, name: &str) -> Result<Tensor> {
        let p = self.get(name)?;
        Tensor::new(p.dims.clone(), p.data.clone())
    }
}
