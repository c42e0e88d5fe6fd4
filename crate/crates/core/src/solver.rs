//! Outer policy-iteration loop.
//!
//! Each iteration updates the controls from the current value field, then
//! takes one implicit step for the value field under those controls. The
//! loop stops once the sup-norm change of the value field drops below
//! `outer_tol`.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{gradients_at_with, Grid3, ScalarField};
use crate::linear_solver::{
    assemble_coefficients, build_system, solve_system, Advection, ImplicitSchemeConfig, LinearMethod,
    LinearSolution, PreconditionerKind, SparseSystem,
};
use crate::model::{hamiltonian_rhs, ControlVector, ModelParams};
use crate::policy::{update_policy_field, Cobweb, FocConvention, PolicyUpdateConfig};

/// Full configuration of one finite-difference solve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub params: ModelParams,
    pub grid: Grid3,
    pub policy: PolicyUpdateConfig,
    pub implicit: ImplicitSchemeConfig,
    /// Sup-norm tolerance on the value change between iterations.
    pub outer_tol: f64,
    pub max_outer_iters: usize,
    /// Iterations between checkpoints; 0 disables checkpointing.
    pub checkpoint_every: usize,
    /// How many times the pseudo time step may be halved after a failed linear solve.
    pub max_step_halvings: usize,
}

impl SolverConfig {
    pub fn new(params: ModelParams, grid: Grid3) -> Self {
        SolverConfig {
            params,
            grid,
            policy: PolicyUpdateConfig::default(),
            implicit: ImplicitSchemeConfig::default(),
            outer_tol: 1e-8,
            max_outer_iters: 5000,
            checkpoint_every: 100,
            max_step_halvings: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        self.grid.validate()?;
        self.policy.validate()?;
        self.implicit.validate()?;
        if !(self.outer_tol > 0.0) {
            return Err(Error::InvalidConfig("outer_tol must be positive"));
        }
        if self.max_outer_iters == 0 {
            return Err(Error::InvalidConfig("max_outer_iters must be at least 1"));
        }
        Ok(())
    }

    /// Fingerprint of everything that influences the numerical result.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(b"solver-config/v1");
        let mut put = |x: f64| h.update(x.to_le_bytes());
        for x in self.params.to_array() {
            put(x);
        }
        for axis in [self.grid.k, self.grid.s_l, self.grid.gamma] {
            put(axis.min);
            put(axis.max);
            put(axis.points as f64);
        }
        put(self.policy.chi);
        put(match self.policy.foc_convention {
            FocConvention::PaperPrinted => 0.0,
            FocConvention::ChainRule => 1.0,
        });
        match self.policy.cobweb {
            Cobweb::Off => put(0.0),
            Cobweb::On { max_inner_iters, inner_tol } => {
                put(1.0);
                put(max_inner_iters as f64);
                put(inner_tol);
            }
        }
        put(self.policy.i_min);
        put(self.policy.c_floor);
        put(self.implicit.epsilon_t);
        put(self.implicit.linear_tol);
        put(self.implicit.max_linear_iters as f64);
        put(match self.implicit.method {
            LinearMethod::KrylovBicgstab => 0.0,
            LinearMethod::Direct => 1.0,
        });
        put(match self.implicit.preconditioner {
            PreconditionerKind::Jacobi => 0.0,
            PreconditionerKind::Ilu0 => 1.0,
        });
        put(match self.implicit.advection {
            Advection::Central => 0.0,
            Advection::Upwind => 1.0,
        });
        put(match self.implicit.boundary {
            crate::grid::BoundaryStencil::ThreePoint => 0.0,
            crate::grid::BoundaryStencil::FourPoint => 1.0,
        });
        put(self.outer_tol);
        put(self.max_outer_iters as f64);
        put(self.max_step_halvings as f64);
        let digest = h.finalize();
        let mut first = [0u8; 8];
        first.copy_from_slice(&digest[..8]);
        u64::from_le_bytes(first)
    }
}

/// Where the initial value field came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialGuess {
    /// `log(alpha K) / rho - (eta0 / rho) gamma`.
    ClosedForm,
    Supplied,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolutionMeta {
    pub params: ModelParams,
    pub calibration_hash: u64,
    pub config_hash: u64,
    pub iterations: usize,
    /// Sup-norm value change of the last iteration.
    pub final_change: f64,
    pub converged: bool,
    pub initial_guess: InitialGuess,
    /// Filled in by callers that can measure time.
    pub wall_time_secs: f64,
}

/// Value function and controls on a common grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionGrid {
    pub grid: Grid3,
    pub v: ScalarField,
    pub i_l: ScalarField,
    pub i_h: ScalarField,
    pub meta: SolutionMeta,
}

impl SolutionGrid {
    pub fn new(v: ScalarField, i_l: ScalarField, i_h: ScalarField, meta: SolutionMeta) -> Result<Self> {
        let grid = *v.grid();
        if i_l.grid() != &grid || i_h.grid() != &grid {
            return Err(Error::GridMismatch);
        }
        Ok(SolutionGrid { grid, v, i_l, i_h, meta })
    }

    pub fn controls_at(&self, node: usize) -> ControlVector {
        ControlVector::new(self.i_l.get(node), self.i_h.get(node))
    }
}

/// Closed-form starting value: log utility of output, less a linear damage penalty.
pub fn default_initial_guess(p: &ModelParams, grid: &Grid3) -> ScalarField {
    let penalty = p.eta0 / p.rho;
    ScalarField::from_fn(*grid, |s| libm::log(p.alpha * s.capital()) / p.rho - penalty * s.gamma)
}

/// Replacement investment `i_j = delta_j`, clamped into the control box.
pub fn default_initial_controls(cfg: &SolverConfig) -> (ScalarField, ScalarField) {
    let c = cfg
        .policy
        .control_box(&cfg.params)
        .clamp(ControlVector::new(cfg.params.delta_l, cfg.params.delta_h));
    (ScalarField::constant(cfg.grid, c.i_l), ScalarField::constant(cfg.grid, c.i_h))
}

/// Starting point of a solve.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Start {
    pub v0: Option<ScalarField>,
    pub controls: Option<(ScalarField, ScalarField)>,
}

impl Start {
    pub fn from_value(v0: ScalarField) -> Self {
        Start { v0: Some(v0), controls: None }
    }

    /// Resumes from an earlier (possibly partial) solution.
    pub fn from_solution(sol: &SolutionGrid) -> Self {
        Start { v0: Some(sol.v.clone()), controls: Some((sol.i_l.clone(), sol.i_h.clone())) }
    }
}

/// Progress of one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationReport {
    pub iteration: usize,
    pub sup_change: f64,
    pub linear_iterations: usize,
    pub linear_relative_residual: f64,
    pub epsilon_t: f64,
    pub degenerate_nodes: usize,
}

/// Hooks into the outer loop (progress lines, checkpoints, residual audits).
pub trait SolveObserver {
    fn on_iteration(&mut self, _report: &IterationReport, _current: &dyn Fn() -> SolutionGrid) {}

    /// Called after every accepted linear solve with the system that was solved.
    fn on_linear_solve(&mut self, _system: &SparseSystem, _solution: &LinearSolution) {}
}

impl SolveObserver for () {}

/// Solves from the closed-form initial guess, or from `v0` when given.
pub fn solve(cfg: &SolverConfig, v0: Option<ScalarField>) -> Result<SolutionGrid> {
    solve_with(cfg, Start { v0, controls: None }, &mut ())
}

pub fn solve_with(cfg: &SolverConfig, start: Start, observer: &mut dyn SolveObserver) -> Result<SolutionGrid> {
    cfg.validate()?;
    let p = cfg.params;
    let grid = cfg.grid;
    let initial_guess = if start.v0.is_some() { InitialGuess::Supplied } else { InitialGuess::ClosedForm };
    let mut v = start.v0.unwrap_or_else(|| default_initial_guess(&p, &grid));
    let (mut i_l, mut i_h) = start.controls.unwrap_or_else(|| default_initial_controls(cfg));
    if v.grid() != &grid || i_l.grid() != &grid || i_h.grid() != &grid {
        return Err(Error::GridMismatch);
    }
    let meta = |iterations, final_change, converged| SolutionMeta {
        params: p,
        calibration_hash: p.fingerprint(),
        config_hash: cfg.fingerprint(),
        iterations,
        final_change,
        converged,
        initial_guess,
        wall_time_secs: 0.0,
    };

    let mut implicit = cfg.implicit;
    let mut halvings = 0;
    let mut change = f64::INFINITY;
    for iteration in 1..=cfg.max_outer_iters {
        let update = update_policy_field(&p, &v, &i_l, &i_h, &cfg.policy)?;
        i_l = update.i_l;
        i_h = update.i_h;
        let coeffs = assemble_coefficients(&p, &grid, &i_l, &i_h)?;

        let (system, solution) = loop {
            let system = build_system(&coeffs, &v, p.rho, &implicit)?.correction_system(v.values());
            match solve_system(&system, &implicit) {
                Ok(sol) => break (system, sol),
                Err(Error::LinearSolveFailure { .. }) if halvings < cfg.max_step_halvings => {
                    halvings += 1;
                    implicit.epsilon_t *= 0.5;
                }
                Err(e) => return Err(e),
            }
        };
        observer.on_linear_solve(&system, &solution);

        change = solution.x.iter().fold(0.0, |m: f64, d| m.max(d.abs()));
        let next: alloc::vec::Vec<f64> = v.values().iter().zip(&solution.x).map(|(a, d)| a + d).collect();
        v = ScalarField::new(grid, next)?;

        let report = IterationReport {
            iteration,
            sup_change: change,
            linear_iterations: solution.iterations,
            linear_relative_residual: solution.relative_residual,
            epsilon_t: implicit.epsilon_t,
            degenerate_nodes: update.degenerate_count,
        };
        let converged = change < cfg.outer_tol;
        observer.on_iteration(&report, &|| {
            SolutionGrid::new(v.clone(), i_l.clone(), i_h.clone(), meta(iteration, change, converged))
                .expect("fields share the solver grid")
        });
        if converged {
            return SolutionGrid::new(v, i_l, i_h, meta(iteration, change, true));
        }
    }
    let best = SolutionGrid::new(v, i_l, i_h, meta(cfg.max_outer_iters, change, false))?;
    Err(Error::MaxItersExceeded(alloc::boxed::Box::new(best)))
}

/// `hamiltonian_rhs - rho v` at every node, using the grid stencils and the
/// stored controls.
pub fn hjb_residual(p: &ModelParams, sol: &SolutionGrid, implicit: &ImplicitSchemeConfig) -> Result<ScalarField> {
    let grid = sol.grid;
    let mut out = alloc::vec::Vec::with_capacity(grid.len());
    for node in 0..grid.len() {
        let s = grid.state(node);
        let g = gradients_at_with(&sol.v, node, implicit.boundary);
        let rhs = hamiltonian_rhs(p, &s, &sol.controls_at(node), &g)?;
        out.push(rhs - p.rho * sol.v.get(node));
    }
    ScalarField::new(grid, out)
}

/// Sup-norm of the HJB residual over interior nodes.
pub fn interior_residual_sup(p: &ModelParams, sol: &SolutionGrid, implicit: &ImplicitSchemeConfig) -> Result<f64> {
    let r = hjb_residual(p, sol, implicit)?;
    Ok((0..sol.grid.len())
        .filter(|&n| sol.grid.is_interior(n))
        .fold(0.0, |m: f64, n| m.max(r.get(n).abs())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn initial_guess_examples() {
        let p = ModelParams { alpha: 0.115, rho: 0.03, ..ModelParams::DEFAULT };
        let g = Grid3::new(
            crate::grid::AxisSpec::new(0.0, 3.0, 4),
            crate::grid::AxisSpec::new(0.1, 0.9, 4),
            crate::grid::AxisSpec::new(0.0, 3.0, 4),
        )
        .unwrap();
        let v = default_initial_guess(&p, &g);
        assert!((v.get(g.flatten(0, 2, 0)) - libm::log(0.115) / 0.03).abs() < 1e-12);
        for j in 0..4 {
            for l in 0..4 {
                for i in 1..4 {
                    assert!(v.get(g.flatten(i, j, l)) > v.get(g.flatten(i - 1, j, l)));
                    assert!(v.get(g.flatten(l, j, i)) < v.get(g.flatten(l, j, i - 1)));
                }
            }
        }
    }

    #[test]
    fn config_validation_and_fingerprint() {
        let g = Grid3::default_bounds(5).unwrap();
        let cfg = SolverConfig::new(ModelParams::DEFAULT, g);
        assert!(cfg.validate().is_ok());
        assert!(SolverConfig { outer_tol: 0.0, ..cfg }.validate().is_err());
        assert!(SolverConfig { max_outer_iters: 0, ..cfg }.validate().is_err());
        assert_eq!(cfg.fingerprint(), SolverConfig::new(ModelParams::DEFAULT, g).fingerprint());
        let mut other = cfg;
        other.policy.chi = 0.2;
        assert_ne!(cfg.fingerprint(), other.fingerprint());
    }

    #[test]
    fn single_iteration_budget_reports_best_so_far() {
        let g = Grid3::default_bounds(5).unwrap();
        let cfg = SolverConfig { max_outer_iters: 1, ..SolverConfig::new(ModelParams::DEFAULT, g) };
        match solve(&cfg, None) {
            Err(Error::MaxItersExceeded(best)) => {
                assert!(!best.meta.converged);
                assert_eq!(best.meta.iterations, 1);
                assert!(best.v.is_finite());
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn mismatched_start_is_rejected() {
        let cfg = SolverConfig::new(ModelParams::DEFAULT, Grid3::default_bounds(5).unwrap());
        let v0 = ScalarField::constant(Grid3::default_bounds(6).unwrap(), 1.0);
        assert_eq!(solve(&cfg, Some(v0)), Err(Error::GridMismatch));
    }
}
