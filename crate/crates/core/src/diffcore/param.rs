use std::collections::HashSet;

use crate::error::{Error, Result};

use super::Tensor;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Owns every learnable tensor of a model, addressed by [`ParamId`].
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Contract(format!("duplicate parameter name `{name}`")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Adds a detached gradient buffer (one entry per parameter) into the grads.
    pub fn accumulate(&mut self, grads: &GradBuffer) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                for (dst, src) in p.grad.data_mut().iter_mut().zip(g) {
                    *dst += src;
                }
            }
        }
    }

    pub(crate) fn check_unique_names(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for p in &self.params {
            if !seen.insert(p.name.as_str()) {
                return Err(Error::Contract(format!("duplicate parameter name `{}`", p.name)));
            }
        }
        Ok(())
    }
}

/// Parameter gradients detached from any store, one slot per parameter.
///
/// Slots stay `None` for parameters the graph never touched.
#[derive(Clone, Debug, Default)]
pub struct GradBuffer {
    pub(crate) grads: Vec<Option<Vec<f64>>>,
}

impl GradBuffer {
    pub fn new(num_params: usize) -> Self {
        Self { grads: vec![None; num_params] }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn add(&mut self, id: ParamId, values: &[f64]) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(g) => g.iter_mut().zip(values).for_each(|(d, s)| *d += s),
            slot @ None => *slot = Some(values.to_vec()),
        }
    }

    /// Element-wise sum, in argument order.
    pub fn merge(&mut self, other: &GradBuffer) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.add(ParamId(i), g);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
    }
}
