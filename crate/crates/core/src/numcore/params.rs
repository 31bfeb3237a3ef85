//! Named learnable parameters and their binding onto a tape.

use serde::{Deserialize, Serialize};

use super::matrix::{Matrix, Real};
use super::tape::{Gradients, Tape, Var};
use super::NumError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Param<T> {
    name: String,
    value: Matrix<T>,
}

/// Ordered collection of named parameter matrices. Order is insertion
/// order and is part of the determinism contract: optimizers and gradient
/// reductions walk parameters in this order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParamSet<T = f64> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        self.params.push(Param { name: name.into(), value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.data().len()).sum()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.params[id.0].value
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Registers every parameter as a differentiable leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings { vars: self.params.iter().map(|p| tape.leaf(p.value.clone())).collect() }
    }

    /// Registers every parameter as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bindings {
        Bindings { vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect() }
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet { params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect() }
    }

    /// Zero-filled matrices with the same shapes, one per parameter.
    pub fn zeros_like(&self) -> Vec<Matrix<T>> {
        self.params.iter().map(|p| Matrix::zeros(p.value.rows(), p.value.cols())).collect()
    }

    /// Checks that `other` has the same names and shapes in the same order.
    pub fn check_compatible(&self, other: &ParamSet<T>) -> Result<(), NumError> {
        if self.params.len() != other.params.len() {
            return Err(NumError::Parameter(format!("parameter count differs: {} vs {}", self.params.len(), other.params.len())));
        }
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(NumError::Parameter(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Tape variables for every parameter of a [`ParamSet`], in set order.
#[derive(Debug, Clone)]
pub struct Bindings {
    vars: Vec<Var>,
}

impl Bindings {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    /// Per-parameter gradients; parameters the output does not depend on get
    /// zeros.
    pub fn gradients<T: Real>(&self, tape: &Tape<T>, grads: &Gradients<T>) -> Vec<Matrix<T>> {
        self.vars
            .iter()
            .map(|&v| match grads.get(v) {
                Some(g) => g.clone(),
                None => {
                    let (r, c) = tape.shape(v);
                    Matrix::zeros(r, c)
                }
            })
            .collect()
    }
}
