use alloc::boxed::Box;
use core::fmt;

use crate::solver::SolutionGrid;

/// Errors raised by the solver pipeline.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A configuration or parameter value violates its invariant.
    InvalidConfig(&'static str),
    /// Consumption under the supplied controls is not strictly positive.
    NonPositiveConsumption { consumption: f64 },
    /// Consumption went non-positive while assembling the HJB system at a node.
    NonPositiveConsumptionAt { node: usize, consumption: f64 },
    /// A state lies outside the grid and clamping was not requested.
    OutOfBounds,
    /// The first-order-condition denominator vanished.
    DegenerateDenominator { denominator: f64 },
    /// The Cobweb fixed-point loop exhausted its budget.
    NoInnerConvergence { iterations: usize, last_change: f64 },
    /// More than the tolerated share of nodes had degenerate denominators.
    TooManyDegenerateNodes { degenerate: usize, total: usize },
    /// The linear solver did not reach its residual tolerance.
    LinearSolveFailure { iterations: usize, relative_residual: f64 },
    /// The outer loop hit its iteration cap; carries the best-so-far solution.
    MaxItersExceeded(Box<SolutionGrid>),
    /// Two fields or solutions are not defined on the same grid.
    GridMismatch,
    /// A field does not have one value per grid node.
    LengthMismatch { expected: usize, found: usize },
    /// Scenario parameters are invalid or do not match the scenario policy.
    ScenarioOverrideInvalid(&'static str),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidConfig(what) => write!(f, "invalid configuration: {what}"),
            Error::NonPositiveConsumption { consumption } => {
                write!(f, "non-positive consumption ({consumption:e})")
            }
            Error::NonPositiveConsumptionAt { node, consumption } => {
                write!(f, "non-positive consumption ({consumption:e}) at node {node}")
            }
            Error::OutOfBounds => f.write_str("state outside grid bounds"),
            Error::DegenerateDenominator { denominator } => {
                write!(f, "degenerate first-order-condition denominator ({denominator:e})")
            }
            Error::NoInnerConvergence { iterations, last_change } => write!(
                f,
                "cobweb loop did not converge after {iterations} iterations (last change {last_change:e})"
            ),
            Error::TooManyDegenerateNodes { degenerate, total } => {
                write!(f, "{degenerate} of {total} nodes have degenerate policy denominators")
            }
            Error::LinearSolveFailure { iterations, relative_residual } => write!(
                f,
                "linear solve failed after {iterations} iterations (relative residual {relative_residual:e})"
            ),
            Error::MaxItersExceeded(sol) => write!(
                f,
                "outer loop did not converge in {} iterations (last change {:e})",
                sol.meta.iterations, sol.meta.final_change
            ),
            Error::GridMismatch => f.write_str("grids do not match"),
            Error::LengthMismatch { expected, found } => {
                write!(f, "field has {found} values, grid has {expected} nodes")
            }
            Error::ScenarioOverrideInvalid(what) => write!(f, "invalid scenario: {what}"),
        }
    }
}

pub type Result<T> = core::result::Result<T, Error>;
