//! Named parameter storage.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::tape::ParamGrad;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Matrix<T>,
    /// Whether L2 regularization applies.
    pub decay: bool,
}

/// Every learnable matrix of a model, addressed by [`ParamId`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>, decay: bool) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn total_len(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    decay: p.decay,
                })
                .collect(),
        }
    }

    /// Zero-initialized buffers shaped like every parameter.
    pub fn zeros_like(&self) -> Vec<Matrix<T>> {
        self.params
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect()
    }
}

/// Sums per-example gradients in a fixed order.
#[derive(Debug, Clone)]
pub struct GradAccumulator<T> {
    sums: Vec<Matrix<T>>,
}

impl<T: Scalar> GradAccumulator<T> {
    pub fn new(params: &ParamSet<T>) -> Self {
        Self {
            sums: params.zeros_like(),
        }
    }

    pub fn add(&mut self, grads: &[ParamGrad<T>]) -> Result<()> {
        if grads.len() != self.sums.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.sums.len()
            )));
        }
        for (sum, g) in self.sums.iter_mut().zip(grads) {
            g.add_into(sum);
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        self.sums.iter_mut().for_each(|m| m.scale_assign(k));
    }

    pub fn reset(&mut self) {
        for m in &mut self.sums {
            m.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn grads(&self) -> &[Matrix<T>] {
        &self.sums
    }
}
