//! Named parameter storage, initializers, and per-forward binding into a graph.

use std::cell::RefCell;
use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};
use crate::volume::CheckpointEntry;

/// Ordered set of named tensors. Insertion order is the canonical order used by
/// checkpoints and optimizers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(Error::Config(format!("parameter {name} defined twice")));
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.lookup.get(name).map(|&i| &self.tensors[i])
    }

    /// Replaces a tensor with one of the same shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let i = *self
            .lookup
            .get(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if self.tensors[i].shape() != value.shape() {
            return Err(Error::Dims(format!(
                "parameter {name} has shape {:?}, got {:?}",
                self.tensors[i].shape(),
                value.shape()
            )));
        }
        self.tensors[i] = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn to_entries(&self) -> Vec<CheckpointEntry> {
        self.iter()
            .map(|(name, t)| CheckpointEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                data: t.data().iter().map(|&v| v as f32).collect(),
            })
            .collect()
    }

    pub fn from_entries(entries: Vec<CheckpointEntry>) -> Result<Self> {
        let mut store = ParamStore::new();
        for e in entries {
            let t = Tensor::new(&e.shape, e.data.into_iter().map(|v| v as Real).collect())?;
            store.insert(e.name, t)?;
        }
        Ok(store)
    }

    /// Overwrites every parameter of `self` from `other`, requiring identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            let missing: Vec<_> = self.names.iter().filter(|n| other.get(n).is_none()).take(3).collect();
            return Err(Error::Config(format!(
                "parameter sets differ ({} vs {} entries; missing e.g. {missing:?})",
                self.len(),
                other.len()
            )));
        }
        for (name, t) in other.iter() {
            self.set(name, t.clone())?;
        }
        Ok(())
    }
}

/// Truncated normal (resampled beyond two standard deviations).
pub fn trunc_normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = normal.sample(rng);
            if v.abs() <= 2.0 * std {
                break v as Real;
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape with positive extents")
}

/// Uniform in `±1/√fan_in`.
pub fn fan_in_uniform(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound) as Real).collect();
    Tensor::new(shape, data).expect("shape with positive extents")
}

/// Binds parameters of a store into one graph on first use.
pub struct Scope<'a> {
    graph: &'a Graph,
    store: &'a ParamStore,
    trainable: bool,
    bound: RefCell<HashMap<String, Var>>,
}

impl<'a> Scope<'a> {
    /// `trainable` parameters become graph variables; otherwise constants.
    pub fn new(graph: &'a Graph, store: &'a ParamStore, trainable: bool) -> Self {
        Scope {
            graph,
            store,
            trainable,
            bound: RefCell::new(HashMap::new()),
        }
    }

    pub fn graph(&self) -> &'a Graph {
        self.graph
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn param(&self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.borrow().get(name) {
            return Ok(v);
        }
        let t = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?
            .clone();
        let v = if self.trainable {
            self.graph.variable(t)
        } else {
            self.graph.constant(t)
        };
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(v)
    }

    /// Uses `v` for parameter `name` instead of the stored tensor.
    pub fn bind(&self, name: &str, v: Var) -> Result<()> {
        let want = self
            .store
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?
            .shape()
            .to_vec();
        if self.graph.shape(v) != want {
            return Err(Error::Config(format!(
                "parameter {name} has shape {want:?}, bound value {:?}",
                self.graph.shape(v)
            )));
        }
        self.bound.borrow_mut().insert(name.to_string(), v);
        Ok(())
    }

    /// Whether a parameter exists in the store (bound or not).
    pub fn has(&self, name: &str) -> bool {
        self.store.get(name).is_some()
    }

    /// Gradients in store order; parameters that were never bound or received no
    /// gradient get zeros.
    pub fn grads(&self) -> Vec<Tensor> {
        let bound = self.bound.borrow();
        self.store
            .iter()
            .map(|(name, t)| {
                bound
                    .get(name)
                    .and_then(|&v| self.graph.grad(v))
                    .unwrap_or_else(|| Tensor::zeros(t.shape()))
            })
            .collect()
    }
}
