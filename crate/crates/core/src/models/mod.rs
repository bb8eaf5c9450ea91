//! The two toy architectures.
//!
//! [`TheoryNet`] is the single-hidden-layer ReLU network with an elementwise
//! gate on its trainable increment; [`ModularNet`] is an `L`-layer
//! single-head attention block whose six linear maps per layer each carry a
//! frozen base weight and an adapter slot. Both expose their trainable
//! parameters and gate sensitivities through [`GatedModel`], which is all the
//! bi-level optimizer needs.

mod modular;
mod theory_net;

pub use modular::{modular_forward, AdapterSlot, ModularNet, ModularShape, ModuleRecord};
pub use theory_net::check_unit_columns;
pub use theory_net::{theory_forward, theory_grad, theory_loss, GroupedTheoryNet, TheoryNet};

use crate::error::Result;
use crate::numerics::{Matrix, SeededRng};

/// Loss and (optionally) its gradients at the current parameters.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    /// `∂loss/∂gates`, same shape as the gate matrix.
    pub gate_grad: Option<Matrix>,
    /// `∂loss/∂params` in [`GatedModel::params`] order.
    pub param_grad: Option<Vec<f64>>,
}

/// A model whose adaptable modules are scaled by an `L×N` gate matrix.
pub trait GatedModel {
    /// `(L, N)`.
    fn gate_shape(&self) -> (usize, usize);

    fn param_count(&self) -> usize;

    /// Trainable parameters, flattened in a fixed order.
    fn params(&self) -> Vec<f64>;

    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    /// Training loss on `(x, y)` under `gates`. Gradients are filled when `with_grads`;
    /// `dropout` enables stochastic adapter dropout.
    fn evaluate(
        &self,
        gates: &Matrix,
        x: &Matrix,
        y: &Matrix,
        with_grads: bool,
        dropout: Option<&mut SeededRng>,
    ) -> Result<Evaluation>;

    fn loss(&self, gates: &Matrix, x: &Matrix, y: &Matrix) -> Result<f64> {
        Ok(self.evaluate(gates, x, y, false, None)?.loss)
    }
}
