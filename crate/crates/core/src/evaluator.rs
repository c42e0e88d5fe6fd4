//! Error metrics of a candidate solution against a reference.
//!
//! Each of `v`, `i_l`, `i_h` gets a mean absolute error over the reference
//! nodes; the headline number is the cube root of their product, with each
//! component floored so that one exact field does not zero the product.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{resample, ScalarField};
use crate::model::StateVector;
use crate::solver::SolutionGrid;

pub const DEFAULT_EPSILON_FLOOR: f64 = 1e-12;

/// Location of the largest absolute error of one field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MaxError {
    pub node: usize,
    pub state: (f64, f64, f64),
    pub abs_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub l_v: f64,
    pub l_il: f64,
    pub l_ih: f64,
    pub l_final: f64,
    pub max_v: MaxError,
    pub max_il: MaxError,
    pub max_ih: MaxError,
    pub cardinality: usize,
    pub epsilon_floor: f64,
    /// Whether the candidate was interpolated onto the reference grid.
    pub resampled: bool,
}

/// Mean absolute nodewise difference.
pub fn mae(reference: &ScalarField, candidate: &ScalarField) -> Result<f64> {
    if reference.grid() != candidate.grid() {
        return Err(Error::GridMismatch);
    }
    let n = reference.values().len();
    let sum: f64 = reference.values().iter().zip(candidate.values()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / n as f64)
}

fn max_error(reference: &ScalarField, candidate: &ScalarField) -> MaxError {
    let (node, abs_error) = reference
        .values()
        .iter()
        .zip(candidate.values())
        .map(|(a, b)| (a - b).abs())
        .enumerate()
        .fold((0, -1.0), |best, (i, e)| if e > best.1 { (i, e) } else { best });
    let StateVector { k, s_l, gamma, .. } = reference.grid().state(node);
    MaxError { node, state: (k, s_l, gamma), abs_error }
}

/// Cube root of the product of the three components, each floored at `floor`.
pub fn geometric_mean_error(l_v: f64, l_il: f64, l_ih: f64, floor: f64) -> f64 {
    libm::cbrt(l_v.max(floor) * l_il.max(floor) * l_ih.max(floor))
}

/// Scores `candidate` on the reference nodes; grids must match exactly.
pub fn evaluate(reference: &SolutionGrid, candidate: &SolutionGrid, epsilon_floor: f64) -> Result<EvaluationReport> {
    if reference.grid != candidate.grid {
        return Err(Error::GridMismatch);
    }
    report(reference, &candidate.v, &candidate.i_l, &candidate.i_h, epsilon_floor, false)
}

/// Interpolates `candidate` onto the reference grid first, then scores it.
pub fn evaluate_resampled(
    reference: &SolutionGrid,
    candidate: &SolutionGrid,
    epsilon_floor: f64,
) -> Result<EvaluationReport> {
    if reference.grid == candidate.grid {
        return evaluate(reference, candidate, epsilon_floor);
    }
    let g = reference.grid;
    report(
        reference,
        &resample(&candidate.v, &g),
        &resample(&candidate.i_l, &g),
        &resample(&candidate.i_h, &g),
        epsilon_floor,
        true,
    )
}

fn report(
    reference: &SolutionGrid,
    v: &ScalarField,
    i_l: &ScalarField,
    i_h: &ScalarField,
    floor: f64,
    resampled: bool,
) -> Result<EvaluationReport> {
    if !(floor > 0.0) {
        return Err(Error::InvalidConfig("epsilon_floor must be positive"));
    }
    let l_v = mae(&reference.v, v)?;
    let l_il = mae(&reference.i_l, i_l)?;
    let l_ih = mae(&reference.i_h, i_h)?;
    Ok(EvaluationReport {
        l_v,
        l_il,
        l_ih,
        l_final: geometric_mean_error(l_v, l_il, l_ih, floor),
        max_v: max_error(&reference.v, v),
        max_il: max_error(&reference.i_l, i_l),
        max_ih: max_error(&reference.i_h, i_h),
        cardinality: reference.grid.len(),
        epsilon_floor: floor,
        resampled,
    })
}
