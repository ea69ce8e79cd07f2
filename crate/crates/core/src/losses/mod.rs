//! Training objectives.

pub mod consistency;
pub mod ctc;
pub mod guided;
pub mod heads;
pub mod lm;

use mddkit_tensor::{Graph, Var};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub use consistency::{am_loss, am_loss_node, cr_loss, cr_loss_node, AmTerms, ViewNodes};
pub use ctc::{ctc_loss, ctc_loss_node, min_frames};
pub use guided::{guided_attention_loss, guided_attention_node, guided_weights, DEFAULT_BANDWIDTH};
pub use heads::{error_head_losses, error_head_losses_node};
pub use lm::{lm_loss, lm_loss_node};

/// Loss mixing weights and the decoding interpolation weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub eta: f64,
    pub omega1: f64,
    pub omega2: f64,
    pub omega3: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            eta: 1.0,
            omega1: 0.3,
            omega2: 1.0,
            omega3: 10.0,
            lambda: 0.9,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            return Err(invalid(format!("eta must be non-negative, got {}", self.eta)));
        }
        for (name, v) in [("omega1", self.omega1), ("lambda", self.lambda)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        for (name, v) in [("omega2", self.omega2), ("omega3", self.omega3)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(format!("{name} must be non-negative, got {v}")));
            }
        }
        if self.omega1 != 0.3 {
            log::warn!(
                "omega1 = {} (the two published settings are 0.3 and 0.5)",
                self.omega1
            );
        }
        Ok(())
    }
}

/// Component values of the multi-task objective.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub am: f64,
    pub lm: f64,
    pub pos: f64,
    pub typ: f64,
    pub ga: f64,
}

/// `w1*AM + (1-w1)*LM + w2*(pos + type) + w3*ga`.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> f64 {
    w.omega1 * c.am + (1.0 - w.omega1) * c.lm + w.omega2 * (c.pos + c.typ) + w.omega3 * c.ga
}

/// Graph counterpart of [`LossComponents`].
#[derive(Debug, Clone, Copy)]
pub struct ComponentNodes {
    pub am: Var,
    pub lm: Var,
    pub pos: Var,
    pub typ: Var,
    pub ga: Var,
}

pub fn total_loss_node(g: &mut Graph, c: &ComponentNodes, w: &LossWeights) -> Result<Var> {
    let am = g.scale(c.am, w.omega1);
    let lm = g.scale(c.lm, 1.0 - w.omega1);
    let heads = g.add(c.pos, c.typ)?;
    let heads = g.scale(heads, w.omega2);
    let ga = g.scale(c.ga, w.omega3);
    let mut total = g.add(am, lm)?;
    total = g.add(total, heads)?;
    Ok(g.add(total, ga)?)
}
