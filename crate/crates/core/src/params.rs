//! Named parameter storage shared by every model block.
//!
//! Parameters live in single precision. [`ParamStore::bind`] copies them onto a
//! tape of any [`Real`] type, which is how the gradient suite runs the same
//! model code in double precision.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor<f32>)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: &str, value: Tensor<f32>) {
        match self.index.get(name) {
            Some(&i) => self.entries[i].1 = value,
            None => {
                self.index.insert(name.to_string(), self.entries.len());
                self.entries.push((name.to_string(), value));
            }
        }
    }

    /// Uniform in ±fan_in^(-1/2).
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(shape, data).expect("shape"));
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) {
        self.insert(name, Tensor::zeros(shape));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<f32>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].1),
            None => Err(Error::Config(format!("missing parameter {name}"))),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn entries(&self) -> &[(String, Tensor<f32>)] {
        &self.entries
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<f32>> {
        self.entries.iter_mut().map(|(_, t)| t).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn from_entries(entries: Vec<(String, Tensor<f32>)>) -> Result<Self> {
        let mut s = Self::new();
        for (n, t) in entries {
            if s.index.contains_key(&n) {
                return Err(Error::Format(format!("duplicate parameter {n}")));
            }
            s.insert(&n, t);
        }
        Ok(s)
    }

    /// Puts every parameter on `tape` as a tracked leaf.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self.entries.iter().map(|(_, t)| tape.param(t.cast())).collect();
        Bound {
            index: self.index.clone(),
            vars,
        }
    }

    /// Name of the first parameter holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.entries.iter().find(|(_, t)| !t.all_finite()).map(|(n, _)| n.as_str())
    }
}

/// Tape handles for a bound [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    index: HashMap<String, usize>,
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    /// Points `name` at another tape value, e.g. a leaf under gradient check.
    pub fn replace(&mut self, name: &str, var: Var) -> Result<()> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))?;
        self.vars[i] = var;
        Ok(())
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Single-precision gradients in store order (zeros where nothing flowed).
    pub fn gradients<T: Real>(&self, grads: &Gradients<T>) -> Vec<Tensor<f32>> {
        self.vars.iter().map(|&v| grads.get_or_zeros(v).cast()).collect()
    }
}
