//! Named parameter storage and binding onto a tape.

use std::ops::Index;

use rand::Rng;

use crate::error::{shape_err, Result, SimtError};
use crate::tape::{Tape, Var};
use crate::tensor::{numel, Tensor};

/// Half-width of the uniform initialization range used for every parameter.
pub const INIT_RANGE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

/// Tape variables for every parameter of one store, in store order.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Index<ParamId> for Binding {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.names.contains(&name) {
            return Err(SimtError::Config(format!("duplicate parameter name {name}")));
        }
        self.names.push(name);
        self.tensors.push(tensor.with_grad(true));
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Adds a parameter drawn from uniform(-0.08, 0.08).
    pub fn uniform(&mut self, name: impl Into<String>, shape: Vec<usize>, rng: &mut impl Rng) -> Result<ParamId> {
        let data = (0..numel(&shape)).map(|_| rng.gen_range(-INIT_RANGE..INIT_RANGE)).collect();
        self.insert(name, Tensor::new(shape, data)?)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> Result<ParamId> {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn set_trainable(&mut self, flag: bool) {
        self.tensors.iter_mut().for_each(|t| t.set_requires_grad(flag));
    }

    /// Binds every parameter as a leaf; `trainable = false` makes them constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Binding {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                tape.shared(t.shape().to_vec(), t.shared_data(), trainable && t.requires_grad())
                    .expect("parameter shape is validated on insert")
            })
            .collect();
        Binding { vars }
    }

    /// Adds the gradients held by `tape` for this binding into the parameters.
    pub fn accumulate(&mut self, tape: &Tape, binding: &Binding) -> Result<()> {
        if binding.vars.len() != self.tensors.len() {
            return Err(SimtError::Contract("binding does not belong to this store".into()));
        }
        for (t, v) in self.tensors.iter_mut().zip(&binding.vars) {
            if let Some(g) = tape.grad(*v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    pub fn grad_norm(&self) -> f64 {
        self.tensors
            .iter()
            .filter_map(|t| t.grad())
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all gradients so their global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for g in self.tensors.iter_mut().filter_map(Tensor::grad_mut) {
                g.iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }

    /// Overwrites values from another store, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(SimtError::Config(format!(
                "checkpoint has {} parameters, model expects {}",
                other.len(),
                self.len()
            )));
        }
        for (name, t) in self.names.iter().zip(self.tensors.iter_mut()) {
            let src = other
                .id(name)
                .map(|id| other.get(id))
                .ok_or_else(|| SimtError::Config(format!("checkpoint lacks parameter {name}")))?;
            if src.shape() != t.shape() {
                return Err(shape_err("load_from", format!("{name}: {:?} vs {:?}", src.shape(), t.shape())));
            }
            t.data_mut().copy_from_slice(src.data());
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        for (name, t) in self.iter() {
            t.validate()
                .map_err(|e| SimtError::NonFinite(format!("parameter {name}: {e}")))?;
        }
        Ok(())
    }

    /// True when every value is bit-identical to `other`.
    pub fn bit_identical(&self, other: &ParamStore) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_init_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let id = s.uniform("w", vec![10, 10], &mut rng).unwrap();
        assert!(s.get(id).data().iter().all(|x| x.abs() < INIT_RANGE));
        assert!(s.uniform("w", vec![1], &mut rng).is_err());
    }

    #[test]
    fn clipping_bounds_global_norm() {
        let mut s = ParamStore::new();
        let a = s.zeros("a", vec![2]).unwrap();
        s.get_mut(a).accumulate_grad(&[3.0, 4.0]).unwrap();
        assert_eq!(s.clip_grad_norm(1.0), 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }
}
