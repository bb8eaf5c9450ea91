//! First-order parameter updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `params ← params − eta·grad`. A non-finite gradient is reported as a
/// divergence at step 0; callers that track steps check before calling.
pub fn gd_step(params: &mut [f64], grad: &[f64], eta: f64) -> Result<()> {
    if params.len() != grad.len() {
        return Err(Error::Dimension(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            grad.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Divergence {
            step: 0,
            detail: "non-finite gradient".into(),
        });
    }
    for (p, g) in params.iter_mut().zip(grad) {
        *p -= eta * g;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Gd,
    /// Heavy ball: `v ← beta·v + grad`, `params ← params − eta·v`.
    Momentum { beta: f64 },
}

/// Update rule plus its state for one parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    velocity: Vec<f64>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Result<Self> {
        if let OptimizerKind::Momentum { beta } = kind {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("momentum {beta} must lie in [0, 1)")));
            }
        }
        Ok(Self {
            kind,
            velocity: Vec::new(),
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], eta: f64) -> Result<()> {
        match self.kind {
            OptimizerKind::Gd => gd_step(params, grad, eta),
            OptimizerKind::Momentum { beta } => {
                if self.velocity.len() != grad.len() {
                    self.velocity = vec![0.0; grad.len()];
                }
                for (v, g) in self.velocity.iter_mut().zip(grad) {
                    *v = beta * *v + g;
                }
                gd_step(params, &self.velocity, eta)
            }
        }
    }
}
