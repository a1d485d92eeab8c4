//! Named parameter storage and the per-step training session.
//!
//! Parameters live outside the tape; a [`Session`] wraps a fresh tape for
//! one forward/backward pass, binding store parameters to leaf tensors on
//! first use and collecting their gradients after `backward`.

use indexmap::IndexMap;
use rand::Rng;

use crate::tape::{Tape, TensorId};
use crate::{NdError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Insertion-ordered map of named parameters. Iteration order is part of
/// the determinism contract (serialization and optimizer state follow it).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: IndexMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(NdError::Shape {
                op: "param_insert",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        if self
            .params
            .insert(name.to_string(), Param { shape: shape.to_vec(), data })
            .is_some()
        {
            return Err(NdError::Contract(format!("duplicate parameter '{name}'")));
        }
        Ok(())
    }

    /// Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, fan_in = last dim.
    pub fn init_uniform<R: Rng>(&mut self, name: &str, shape: &[usize], rng: &mut R) -> Result<()> {
        let fan_in = *shape.last().unwrap_or(&1) as f64;
        let bound = 1.0 / fan_in.sqrt();
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        self.insert(name, shape, data)
    }

    pub fn init_zeros(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let n = shape.iter().product();
        self.insert(name, shape, vec![0.0; n])
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| NdError::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| NdError::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// One forward/backward pass over a fresh tape against a parameter store.
pub struct Session<'s> {
    pub tape: Tape,
    store: &'s ParamStore,
    bound: IndexMap<String, TensorId>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: IndexMap::new(),
        }
    }

    /// Bind a store parameter as a differentiable leaf (cached per name).
    pub fn param(&mut self, name: &str) -> Result<TensorId> {
        if let Some(&id) = self.bound.get(name) {
            return Ok(id);
        }
        let p = self.store.get(name)?;
        let id = self.tape.leaf(&p.shape, p.data.clone(), true)?;
        self.bound.insert(name.to_string(), id);
        Ok(id)
    }

    /// Insert a non-differentiable input.
    pub fn input(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId> {
        self.tape.leaf(shape, data, false)
    }

    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients of every bound parameter, in binding order.
    pub fn grads(&self) -> Vec<(String, Vec<f64>)> {
        self.bound
            .iter()
            .map(|(name, &id)| (name.clone(), self.tape.grad(id)))
            .collect()
    }
}
