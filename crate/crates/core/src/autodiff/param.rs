//! Trainable parameters and their optimizer state.

use super::graph::Graph;
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A named trainable tensor with its gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<F = f32> {
    pub name: String,
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    pub m: Tensor<F>,
    pub v: Tensor<F>,
}

impl<F: Real> Parameter<F> {
    pub fn new(name: impl Into<String>, value: Tensor<F>) -> Self {
        let shape = value.shape().to_vec();
        Parameter {
            name: name.into(),
            value,
            grad: Tensor::zeros(shape.clone()),
            m: Tensor::zeros(shape.clone()),
            v: Tensor::zeros(shape),
        }
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Ordered collection of parameters; a parameter's slot is its index.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F = f32> {
    params: Vec<Parameter<F>>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor<F>) -> usize {
        self.params.push(Parameter::new(name, value));
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, slot: usize) -> &Parameter<F> {
        &self.params[slot]
    }

    pub fn get_mut(&mut self, slot: usize) -> &mut Parameter<F> {
        &mut self.params[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<F>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<F>> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Total scalar count.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    /// Add the graph's parameter gradients into the stored gradients.
    pub fn accumulate(&mut self, graph: &Graph<F>) -> Result<()> {
        for (slot, g) in graph.param_grads() {
            let p = self
                .params
                .get_mut(slot)
                .ok_or_else(|| Error::invalid(format!("graph references parameter slot {slot}")))?;
            if p.grad.shape() != g.shape() {
                return Err(Error::shape("accumulate", format!("{}: {:?} vs {:?}", p.name, p.grad.shape(), g.shape())));
            }
            p.grad.add_assign(g);
        }
        Ok(())
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.cast(),
                    m: p.m.cast(),
                    v: p.v.cast(),
                })
                .collect(),
        }
    }
}
