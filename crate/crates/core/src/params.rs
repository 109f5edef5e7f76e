//! Named parameters and their binding onto a [`Tape`].

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    /// Frozen buffers (fixed centers, text embeddings) are stored and
    /// checkpointed like parameters but never receive gradients.
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name:?}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            value,
            trainable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name:?}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    /// SHA-256 over names, shapes, and the exact bit patterns of all values.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for p in &self.params {
            hasher.update(p.name.as_bytes());
            for &d in p.value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    /// Registers every parameter on the tape: trainable ones as differentiable
    /// leaves, frozen ones as constants.
    pub fn bind(&self, tape: &mut Tape) -> Binding {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if p.trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Binding {
            vars,
            index: self.index.clone(),
        }
    }
}

/// Parameter name to tape variable mapping for one forward pass.
#[derive(Clone, Debug)]
pub struct Binding {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::Contract(format!("parameter {name:?} not bound")))
    }

    /// Gradients in store order; `None` for frozen parameters.
    pub fn gradients(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| tape.grad(v).cloned()).collect()
    }
}

/// Normal(0, std) samples redrawn until they fall within two standard deviations.
pub fn truncated_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    while data.len() < numel {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            data.push(z * std);
        }
    }
    Tensor::new(shape, data).expect("numel matches")
}
