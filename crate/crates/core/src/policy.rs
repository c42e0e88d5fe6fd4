//! Control update from value-function gradients.
//!
//! Each node is handled independently: the marginal value of consumption is
//! taken at the previous controls, the first-order conditions give new
//! controls, and a relaxation step blends them with the previous ones.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gradients_at, ScalarField, ValueGradients};
use crate::model::{consumption, ControlVector, ModelParams, StateVector};

/// Below this magnitude a first-order-condition denominator counts as zero.
pub const DEGENERATE_EPS: f64 = 1e-12;

/// Share of degenerate nodes above which a policy update fails.
pub const MAX_DEGENERATE_SHARE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FocConvention {
    /// Denominators `v_k - (1 - s_l) v_s` and `v_k - s_l v_s`, marginal
    /// consumption value used as is.
    PaperPrinted,
    /// Denominators `v_k + (1 - s_l) v_s` and `v_k - s_l v_s`, marginal
    /// consumption value scaled by `K`. Consistent with the laws of motion.
    #[default]
    ChainRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum Cobweb {
    #[default]
    Off,
    On { max_inner_iters: usize, inner_tol: f64 },
}

/// Admissible investment rates, identical for both controls.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlBox {
    pub i_min: f64,
    pub i_max: f64,
}

impl ControlBox {
    pub fn clamp(&self, c: ControlVector) -> ControlVector {
        ControlVector::new(c.i_l.clamp(self.i_min, self.i_max), c.i_h.clamp(self.i_min, self.i_max))
    }

    pub fn contains(&self, c: &ControlVector) -> bool {
        let r = self.i_min..=self.i_max;
        r.contains(&c.i_l) && r.contains(&c.i_h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyUpdateConfig {
    /// Relaxation weight on the new first-order-condition controls.
    pub chi: f64,
    pub foc_convention: FocConvention,
    pub cobweb: Cobweb,
    /// Lower bound on both investment rates.
    pub i_min: f64,
    /// Consumption floor as a share of output; sets the upper control bound.
    pub c_floor: f64,
}

impl Default for PolicyUpdateConfig {
    fn default() -> Self {
        PolicyUpdateConfig {
            chi: 0.1,
            foc_convention: FocConvention::ChainRule,
            cobweb: Cobweb::Off,
            i_min: 0.0,
            c_floor: 0.01,
        }
    }
}

impl PolicyUpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.chi > 0.0 && self.chi <= 1.0) {
            return Err(Error::InvalidConfig("chi must lie in (0, 1]"));
        }
        if !(self.c_floor > 0.0 && self.c_floor < 1.0) {
            return Err(Error::InvalidConfig("c_floor must lie in (0, 1)"));
        }
        if !(self.i_min.is_finite() && self.i_min >= 0.0) {
            return Err(Error::InvalidConfig("i_min must be a non-negative number"));
        }
        if let Cobweb::On { inner_tol, .. } = self.cobweb {
            if !(inner_tol > 0.0) {
                return Err(Error::InvalidConfig("cobweb inner_tol must be positive"));
            }
        }
        Ok(())
    }

    /// `[i_min, (1 - c_floor) alpha]`: with both rates inside, consumption is
    /// at least `c_floor * alpha * K`.
    pub fn control_box(&self, p: &ModelParams) -> ControlBox {
        ControlBox { i_min: self.i_min, i_max: (1.0 - self.c_floor) * p.alpha }
    }
}

/// `rho / C` at the previous controls.
pub fn marginal_consumption(p: &ModelParams, s: &StateVector, c_prev: &ControlVector) -> Result<f64> {
    Ok(p.rho / consumption(p, s, c_prev)?)
}

/// Closed-form first-order-condition controls, clamped to the control box.
pub fn foc_controls(
    p: &ModelParams,
    s: &StateVector,
    grads: &ValueGradients,
    mc: f64,
    cfg: &PolicyUpdateConfig,
) -> Result<ControlVector> {
    let sl = s.s_l;
    let (den_l, den_h, mc) = match cfg.foc_convention {
        FocConvention::ChainRule => (
            grads.dv_dk + (1.0 - sl) * grads.dv_dsl,
            grads.dv_dk - sl * grads.dv_dsl,
            mc * s.capital(),
        ),
        FocConvention::PaperPrinted => (
            grads.dv_dk - (1.0 - sl) * grads.dv_dsl,
            grads.dv_dk - sl * grads.dv_dsl,
            mc,
        ),
    };
    for den in [den_l, den_h] {
        if !(den.abs() >= DEGENERATE_EPS) {
            return Err(Error::DegenerateDenominator { denominator: den });
        }
    }
    let raw = ControlVector::new(
        (1.0 - mc / den_l) / (2.0 * p.kappa_l),
        (1.0 - mc / den_h) / (2.0 * p.kappa_h),
    );
    Ok(cfg.control_box(p).clamp(raw))
}

/// `chi * c_new + (1 - chi) * c_prev`, componentwise.
pub fn relaxed_update(c_new: &ControlVector, c_prev: &ControlVector, chi: f64) -> ControlVector {
    let blend = |new: f64, old: f64| chi * new + (1.0 - chi) * old;
    ControlVector::new(blend(c_new.i_l, c_prev.i_l), blend(c_new.i_h, c_prev.i_h))
}

/// Result of the Cobweb inner loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CobwebOutcome {
    pub controls: ControlVector,
    pub iterations: usize,
    pub converged: bool,
    pub last_change: f64,
}

impl CobwebOutcome {
    /// Converts a budget exhaustion into [`Error::NoInnerConvergence`].
    pub fn require_converged(self) -> Result<ControlVector> {
        if self.converged {
            Ok(self.controls)
        } else {
            Err(Error::NoInnerConvergence { iterations: self.iterations, last_change: self.last_change })
        }
    }
}

/// Fixed-point iteration alternating the marginal value of consumption and
/// the first-order conditions, starting from `start`. Exhausting the budget
/// is not an error: the last iterate is returned with `converged == false`.
pub fn cobweb_controls(
    p: &ModelParams,
    s: &StateVector,
    grads: &ValueGradients,
    start: &ControlVector,
    cfg: &PolicyUpdateConfig,
) -> Result<CobwebOutcome> {
    let (max_iters, tol) = match cfg.cobweb {
        Cobweb::On { max_inner_iters, inner_tol } => (max_inner_iters, inner_tol),
        Cobweb::Off => return Err(Error::InvalidConfig("cobweb is switched off")),
    };
    let mut current = *start;
    let mut last_change = f64::INFINITY;
    for it in 1..=max_iters {
        let mc = marginal_consumption(p, s, &current)?;
        let next = foc_controls(p, s, grads, mc, cfg)?;
        last_change = f64::max((next.i_l - current.i_l).abs(), (next.i_h - current.i_h).abs());
        current = next;
        if last_change < tol {
            return Ok(CobwebOutcome { controls: current, iterations: it, converged: true, last_change });
        }
    }
    Ok(CobwebOutcome { controls: current, iterations: max_iters, converged: false, last_change })
}

/// Controls for one node: first-order conditions (direct or Cobweb) then relaxation.
pub fn update_node(
    p: &ModelParams,
    s: &StateVector,
    grads: &ValueGradients,
    prev: &ControlVector,
    cfg: &PolicyUpdateConfig,
) -> Result<(ControlVector, bool)> {
    let (target, inner_ok) = match cfg.cobweb {
        Cobweb::Off => {
            let mc = marginal_consumption(p, s, prev)?;
            (foc_controls(p, s, grads, mc, cfg)?, true)
        }
        Cobweb::On { .. } => {
            let out = cobweb_controls(p, s, grads, prev, cfg)?;
            (out.controls, out.converged)
        }
    };
    Ok((relaxed_update(&target, prev, cfg.chi), inner_ok))
}

/// New control fields plus per-node diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyUpdate {
    pub i_l: ScalarField,
    pub i_h: ScalarField,
    /// Nodes whose denominators vanished and kept their previous controls.
    pub degenerate: Vec<bool>,
    pub degenerate_count: usize,
    /// Nodes where the Cobweb loop ran out of iterations.
    pub inner_unconverged: usize,
}

/// Applies the node update everywhere without the degenerate-share check.
pub fn update_policy_field_diagnostics(
    p: &ModelParams,
    value: &ScalarField,
    prev_i_l: &ScalarField,
    prev_i_h: &ScalarField,
    cfg: &PolicyUpdateConfig,
) -> Result<PolicyUpdate> {
    cfg.validate()?;
    let grid = *value.grid();
    if prev_i_l.grid() != &grid || prev_i_h.grid() != &grid {
        return Err(Error::GridMismatch);
    }
    let n = grid.len();
    let mut i_l = Vec::with_capacity(n);
    let mut i_h = Vec::with_capacity(n);
    let mut degenerate = alloc::vec![false; n];
    let mut degenerate_count = 0;
    let mut inner_unconverged = 0;
    for node in 0..n {
        let s = grid.state(node);
        let prev = ControlVector::new(prev_i_l.get(node), prev_i_h.get(node));
        let grads = gradients_at(value, node);
        let next = match update_node(p, &s, &grads, &prev, cfg) {
            Ok((c, inner_ok)) => {
                inner_unconverged += usize::from(!inner_ok);
                c
            }
            Err(Error::DegenerateDenominator { .. }) => {
                degenerate[node] = true;
                degenerate_count += 1;
                prev
            }
            Err(e) => return Err(e),
        };
        i_l.push(next.i_l);
        i_h.push(next.i_h);
    }
    Ok(PolicyUpdate {
        i_l: ScalarField::new(grid, i_l)?,
        i_h: ScalarField::new(grid, i_h)?,
        degenerate,
        degenerate_count,
        inner_unconverged,
    })
}

/// Node-wise policy update; fails when more than 1% of nodes are degenerate.
pub fn update_policy_field(
    p: &ModelParams,
    value: &ScalarField,
    prev_i_l: &ScalarField,
    prev_i_h: &ScalarField,
    cfg: &PolicyUpdateConfig,
) -> Result<PolicyUpdate> {
    let update = update_policy_field_diagnostics(p, value, prev_i_l, prev_i_h, cfg)?;
    let total = value.grid().len();
    if update.degenerate_count as f64 > MAX_DEGENERATE_SHARE * total as f64 {
        return Err(Error::TooManyDegenerateNodes { degenerate: update.degenerate_count, total });
    }
    Ok(update)
}
