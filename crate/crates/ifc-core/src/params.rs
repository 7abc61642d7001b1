//! Named parameter storage and the bridge between persistent parameters and
//! the per-forward tape.
//!
//! Parameters live outside any graph as plain buffers. Each forward pass
//! leases them onto a fresh [`Graph`] as differentiable leaves through a
//! [`Forward`] context; after backward, the accumulated leaf gradients are
//! read back by name. Initial values are a pure function of `(seed, name)`,
//! so two models built with the same seed agree on every shared parameter
//! regardless of creation order.

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};

#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// How a parameter is initialized when first created.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    Glorot { fan_in: usize, fan_out: usize },
    /// Uniform(-a, a).
    Uniform(f64),
}

fn fnv1a(seed: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325 ^ seed.wrapping_mul(0x100000001b3);
    for b in name.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    seed: u64,
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new(seed: u64) -> Self {
        ParamStore {
            seed,
            entries: BTreeMap::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Create the parameter if absent; existing entries are kept as-is.
    pub fn ensure(&mut self, name: &str, shape: &[usize], init: Init) -> &Param {
        if !self.entries.contains_key(name) {
            let n: usize = shape.iter().product();
            let data = match init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Glorot { fan_in, fan_out } => {
                    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, name));
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
                Init::Uniform(a) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, name));
                    (0..n).map(|_| rng.random_range(-a..a)).collect()
                }
            };
            self.entries.insert(
                name.to_string(),
                Param {
                    shape: shape.to_vec(),
                    data,
                },
            );
        }
        &self.entries[name]
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.entries.get_mut(name)
    }

    pub fn insert(&mut self, name: String, param: Param) {
        self.entries.insert(name, param);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.entries.iter_mut()
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
}

/// One forward pass: a fresh graph plus cached parameter leases.
///
/// Leasing the same name twice returns the same leaf node, so gradients from
/// every use site accumulate into one buffer.
pub struct Forward<'p> {
    graph: Graph,
    params: &'p ParamStore,
    train: bool,
    dropout: f64,
    leased: RefCell<BTreeMap<String, Tensor>>,
}

impl<'p> Forward<'p> {
    /// Training-mode pass: gradients recorded, dropout active.
    pub fn train(params: &'p ParamStore, seed: u64, dropout: f64) -> Self {
        Forward {
            graph: Graph::with_seed(seed),
            params,
            train: true,
            dropout,
            leased: RefCell::new(BTreeMap::new()),
        }
    }

    /// Inference-mode pass: no tape closures, dropout off.
    pub fn eval(params: &'p ParamStore) -> Self {
        Forward {
            graph: Graph::eval(),
            params,
            train: false,
            dropout: 0.0,
            leased: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    /// Dropout rate for this pass (0 in eval mode).
    pub fn dropout_rate(&self) -> f64 {
        self.dropout
    }

    /// Lease a parameter as a differentiable leaf on this pass's graph.
    pub fn p(&self, name: &str) -> Result<Tensor> {
        if let Some(t) = self.leased.borrow().get(name) {
            return Ok(t.clone());
        }
        let param = self
            .params
            .get(name)
            .ok_or_else(|| Error::contract("forward", format!("unknown parameter `{}`", name)))?;
        let t = if self.train {
            self.graph.param(&param.shape, param.data.clone())?
        } else {
            self.graph.tensor(&param.shape, param.data.clone())?
        };
        self.leased.borrow_mut().insert(name.to_string(), t.clone());
        Ok(t)
    }

    /// Gradients of every leased parameter after a backward pass.
    pub fn grads(&self) -> BTreeMap<String, Vec<f64>> {
        let mut out = BTreeMap::new();
        for (name, t) in self.leased.borrow().iter() {
            if let Some(g) = t.grad() {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}
