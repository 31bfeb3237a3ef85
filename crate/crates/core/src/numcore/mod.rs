//! Dense matrix arithmetic, a reverse-mode tape over it, named parameter
//! storage and finite-difference gradient checking.

mod dd;
mod gradcheck;
mod matrix;
mod params;
mod tape;

pub use dd::Dd;
pub use gradcheck::{gradcheck, gradcheck_extended, GradcheckOptions, GradcheckReport, Objective, ParamCheck};
pub use matrix::{Axis, Matrix, Real};
pub use params::{Bindings, ParamId, ParamSet};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension mismatch in {op}: {}x{} vs {}x{}", left.0, left.1, right.0, right.1)]
    Dimension { op: &'static str, left: (usize, usize), right: (usize, usize) },
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

impl NumError {
    pub(crate) fn dimension(op: &'static str, left: (usize, usize), right: (usize, usize)) -> Self {
        NumError::Dimension { op, left, right }
    }
}
