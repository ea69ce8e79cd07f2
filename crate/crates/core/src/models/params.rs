//! Named parameter storage and per-graph binding.

use mddkit_tensor::{Graph, Tensor, Var};
use rand::Rng;

use crate::error::{shape, Error, Result};

/// Ordered list of named tensors. Layers refer to entries by index.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Params {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Graph handles for one [`Params`] store.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, idx: usize) -> Var {
        self.vars[idx]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform<R: Rng>(&mut self, name: String, shape: &[usize], fan_in: usize, rng: &mut R) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
        self.push(name, Tensor::new(shape.to_vec(), data).expect("init shape"))
    }

    pub fn add_const(&mut self, name: String, shape: &[usize], value: f64) -> usize {
        self.push(name, Tensor::full(shape, value))
    }

    fn push(&mut self, name: String, t: Tensor) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
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

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Records every tensor on `g`: as gradient-tracked leaves when
    /// `trainable`, as constants otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.leaf(t.clone().with_grad())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn named(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Overwrites values from `(name, tensor)` pairs; every parameter must be
    /// present with a matching shape.
    pub fn load_from<'a>(&mut self, mut lookup: impl FnMut(&str) -> Option<&'a Tensor>) -> Result<()> {
        for (name, slot) in self.names.iter().zip(self.tensors.iter_mut()) {
            let t = lookup(name).ok_or_else(|| Error::Missing(format!("parameter {name}")))?;
            if t.shape() != slot.shape() {
                return Err(shape(format!(
                    "parameter {name}: stored {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        }
        Ok(())
    }
}
