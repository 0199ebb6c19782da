//! Dense row-major `f64` tensors used as model parameters.

use std::sync::Arc;

use crate::error::{shape_err, Result, SimtError};

#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(shape_err(
                "tensor",
                format!("shape {:?} needs {} values, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data: Arc::new(data),
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = numel(&shape);
        Tensor {
            shape,
            data: Arc::new(vec![0.0; n]),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Shared handle to the value buffer; cloning it is O(1).
    pub fn shared_data(&self) -> Arc<Vec<f64>> {
        Arc::clone(&self.data)
    }

    /// Mutable access. Copies the buffer if a tape still holds a reference.
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        Arc::make_mut(&mut self.data)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut Vec<f64>> {
        self.grad.as_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|x| *x = 0.0);
        }
    }

    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(shape_err(
                "accumulate_grad",
                format!("gradient length {} vs tensor length {}", g.len(), self.data.len()),
            ));
        }
        match self.grad.as_mut() {
            Some(buf) => buf.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    /// Checks the shape/data/grad invariants and rejects NaN or Inf anywhere.
    pub fn validate(&self) -> Result<()> {
        if numel(&self.shape) != self.data.len() {
            return Err(shape_err("validate", "data length does not match shape"));
        }
        if let Some(i) = self.data.iter().position(|x| !x.is_finite()) {
            return Err(SimtError::NonFinite(format!("data[{i}] = {}", self.data[i])));
        }
        if let Some(g) = &self.grad {
            if g.len() != self.data.len() {
                return Err(shape_err("validate", "gradient length does not match shape"));
            }
            if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                return Err(SimtError::NonFinite(format!("grad[{i}] = {}", g[i])));
            }
        }
        Ok(())
    }
}
