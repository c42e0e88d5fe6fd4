//! Implicit (false-transient) step for the value function.
//!
//! For fixed controls the HJB equation is linear in `v`:
//!
//! ```text
//! rho v = B . grad v + C . diag(hess v) + D
//! ```
//!
//! One implicit step with pseudo time step `eps` solves
//!
//! ```text
//! (1/eps + rho) v_new - L v_new = D + v_old / eps
//! ```
//!
//! where `L` is the advection-diffusion operator built from the grid stencils.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{
    first_derivative_weights, offset_index, second_derivative_weights, Axis, BoundaryStencil, Grid3,
    ScalarField, StencilWeights,
};
use crate::model::{diffusion_magnitudes, drifts, utility_flow, ControlVector, ModelParams};

/// Per-node coefficients of the linearised HJB equation.
#[derive(Debug, Clone, PartialEq)]
pub struct HjbCoefficients {
    pub grid: Grid3,
    pub b_k: Vec<f64>,
    pub b_sl: Vec<f64>,
    pub b_gamma: Vec<f64>,
    pub c_k: Vec<f64>,
    pub c_sl: Vec<f64>,
    pub c_gamma: Vec<f64>,
    pub d: Vec<f64>,
}

impl HjbCoefficients {
    pub fn zeros(grid: Grid3) -> Self {
        let z = alloc::vec![0.0; grid.len()];
        HjbCoefficients {
            grid,
            b_k: z.clone(),
            b_sl: z.clone(),
            b_gamma: z.clone(),
            c_k: z.clone(),
            c_sl: z.clone(),
            c_gamma: z.clone(),
            d: z,
        }
    }

    fn first_order(&self, axis: Axis) -> &[f64] {
        match axis {
            Axis::K => &self.b_k,
            Axis::Sl => &self.b_sl,
            Axis::Gamma => &self.b_gamma,
        }
    }

    fn second_order(&self, axis: Axis) -> &[f64] {
        match axis {
            Axis::K => &self.c_k,
            Axis::Sl => &self.c_sl,
            Axis::Gamma => &self.c_gamma,
        }
    }
}

/// Drift, half-variance and utility coefficients at every node.
pub fn assemble_coefficients(
    p: &ModelParams,
    grid: &Grid3,
    i_l: &ScalarField,
    i_h: &ScalarField,
) -> Result<HjbCoefficients> {
    if i_l.grid() != grid || i_h.grid() != grid {
        return Err(Error::GridMismatch);
    }
    let mut out = HjbCoefficients::zeros(*grid);
    for node in 0..grid.len() {
        let s = grid.state(node);
        let c = ControlVector::new(i_l.get(node), i_h.get(node));
        let d = drifts(p, &s, &c);
        let var = diffusion_magnitudes(p, &s);
        out.b_k[node] = d.dk_star;
        out.b_sl[node] = d.ds_l_star;
        out.b_gamma[node] = d.dgamma_star;
        out.c_k[node] = 0.5 * var.var_k;
        out.c_sl[node] = 0.5 * var.var_sl;
        out.c_gamma[node] = 0.5 * var.var_gamma;
        out.d[node] = utility_flow(p, &s, &c).map_err(|e| match e {
            Error::NonPositiveConsumption { consumption } => {
                Error::NonPositiveConsumptionAt { node, consumption }
            }
            other => other,
        })?;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LinearMethod {
    /// Preconditioned BiCGSTAB.
    #[default]
    KrylovBicgstab,
    /// Banded LU with partial pivoting; only practical on small grids.
    Direct,
}

/// Preconditioner applied on the right inside BiCGSTAB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PreconditionerKind {
    Jacobi,
    /// Incomplete LU with the sparsity pattern of the matrix.
    #[default]
    Ilu0,
}

/// Discretisation of the first-order terms inside the operator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Advection {
    /// Same central/one-sided stencils as the gradient computation.
    #[default]
    Central,
    /// One-sided differences in the direction of the drift.
    Upwind,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImplicitSchemeConfig {
    /// Pseudo time step of the false transient (years).
    pub epsilon_t: f64,
    /// Relative residual target `||A x - b|| / ||b||`.
    pub linear_tol: f64,
    pub max_linear_iters: usize,
    pub method: LinearMethod,
    pub preconditioner: PreconditionerKind,
    pub advection: Advection,
    pub boundary: BoundaryStencil,
}

impl Default for ImplicitSchemeConfig {
    fn default() -> Self {
        ImplicitSchemeConfig {
            epsilon_t: 1.0,
            linear_tol: 1e-10,
            max_linear_iters: 2000,
            method: LinearMethod::KrylovBicgstab,
            preconditioner: PreconditionerKind::Ilu0,
            advection: Advection::Central,
            boundary: BoundaryStencil::ThreePoint,
        }
    }
}

impl ImplicitSchemeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_t > 0.0) {
            return Err(Error::InvalidConfig("epsilon_t must be positive"));
        }
        if !(self.linear_tol > 0.0) {
            return Err(Error::InvalidConfig("linear_tol must be positive"));
        }
        if self.max_linear_iters == 0 {
            return Err(Error::InvalidConfig("max_linear_iters must be at least 1"));
        }
        Ok(())
    }
}

/// Square sparse system in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSystem {
    n: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl SparseSystem {
    /// Builds from `(row, col, value)` entries; duplicates are summed.
    pub fn from_triplets(n: usize, triplets: &[(usize, usize, f64)], rhs: Vec<f64>) -> Result<Self> {
        if rhs.len() != n {
            return Err(Error::LengthMismatch { expected: n, found: rhs.len() });
        }
        let mut rows: Vec<Vec<(usize, f64)>> = alloc::vec![Vec::new(); n];
        for &(r, c, v) in triplets {
            if r >= n || c >= n {
                return Err(Error::InvalidConfig("triplet index out of range"));
            }
            rows[r].push((c, v));
        }
        let mut b = CsrBuilder::with_capacity(n, triplets.len());
        for row in &mut rows {
            b.push_row(row);
        }
        Ok(b.finish(rhs))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `(column, value)` pairs of one row, columns ascending.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.cols[span.clone()].iter().copied().zip(self.vals[span].iter().copied())
    }

    pub fn max_row_len(&self) -> usize {
        self.row_ptr.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.n)
            .map(|r| self.row(r).find(|&(c, _)| c == r).map_or(0.0, |(_, v)| v))
            .collect()
    }

    pub fn mul_vec_into(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let span = self.row_ptr[r]..self.row_ptr[r + 1];
            *o = self.cols[span.clone()].iter().zip(&self.vals[span]).map(|(&c, &v)| v * x[c]).sum();
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = alloc::vec![0.0; self.n];
        self.mul_vec_into(x, &mut out);
        out
    }

    /// `||A x - b||_2 / ||b||_2`, or the absolute residual when `b = 0`.
    pub fn relative_residual(&self, x: &[f64]) -> f64 {
        let ax = self.mul_vec(x);
        let r = norm(ax.iter().zip(&self.rhs).map(|(a, b)| a - b));
        let b = norm(self.rhs.iter().copied());
        if b > 0.0 {
            r / b
        } else {
            r
        }
    }

    /// Same matrix with right-hand side `b - A x0`: its solution is the
    /// correction to add to `x0`.
    pub fn correction_system(&self, x0: &[f64]) -> SparseSystem {
        let ax = self.mul_vec(x0);
        SparseSystem {
            n: self.n,
            row_ptr: self.row_ptr.clone(),
            cols: self.cols.clone(),
            vals: self.vals.clone(),
            rhs: self.rhs.iter().zip(&ax).map(|(b, a)| b - a).collect(),
        }
    }

    fn bandwidths(&self) -> (usize, usize) {
        let mut lower = 0;
        let mut upper = 0;
        for r in 0..self.n {
            for (c, _) in self.row(r) {
                if c < r {
                    lower = lower.max(r - c);
                } else {
                    upper = upper.max(c - r);
                }
            }
        }
        (lower, upper)
    }
}

struct CsrBuilder {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrBuilder {
    fn with_capacity(n: usize, nnz: usize) -> Self {
        let mut row_ptr = Vec::with_capacity(n + 1);
        row_ptr.push(0);
        CsrBuilder { row_ptr, cols: Vec::with_capacity(nnz), vals: Vec::with_capacity(nnz) }
    }

    /// Sorts, merges duplicate columns and drops entries that cancel to zero.
    fn push_row(&mut self, entries: &mut [(usize, f64)]) {
        entries.sort_by_key(|e| e.0);
        let mut i = 0;
        while i < entries.len() {
            let col = entries[i].0;
            let mut v = 0.0;
            while i < entries.len() && entries[i].0 == col {
                v += entries[i].1;
                i += 1;
            }
            if v != 0.0 {
                self.cols.push(col);
                self.vals.push(v);
            }
        }
        self.row_ptr.push(self.cols.len());
    }

    fn finish(self, rhs: Vec<f64>) -> SparseSystem {
        SparseSystem { n: rhs.len(), row_ptr: self.row_ptr, cols: self.cols, vals: self.vals, rhs }
    }
}

fn upwind_weights(n: usize, i: usize, h: f64, drift: f64) -> StencilWeights {
    // Forward difference for positive drift, backward for negative; the
    // boundary one-sided stencils are used where the preferred side is missing.
    let forward = first_derivative_weights(n, 0, h);
    let backward = first_derivative_weights(n, n - 1, h);
    match (drift >= 0.0, i == 0, i + 1 == n) {
        (_, true, _) => forward,
        (_, _, true) => backward,
        (true, _, _) => forward,
        (false, _, _) => backward,
    }
}

/// Rows `(1/eps + rho) v - [B . grad + C . hess] v = D + v_old / eps`.
pub fn build_system(
    coeffs: &HjbCoefficients,
    v_old: &ScalarField,
    rho: f64,
    cfg: &ImplicitSchemeConfig,
) -> Result<SparseSystem> {
    cfg.validate()?;
    let grid = coeffs.grid;
    if v_old.grid() != &grid {
        return Err(Error::GridMismatch);
    }
    let n = grid.len();
    let inv_eps = 1.0 / cfg.epsilon_t;
    let mut builder = CsrBuilder::with_capacity(n, 7 * n);
    let mut rhs = Vec::with_capacity(n);
    let mut entries: Vec<(usize, f64)> = Vec::with_capacity(16);
    for node in 0..n {
        entries.clear();
        entries.push((node, inv_eps + rho));
        for axis in Axis::ALL {
            let spec = grid.axis(axis);
            let pos = grid.axis_position(axis, node);
            let stride = grid.stride(axis);
            let h = spec.spacing();
            let b = coeffs.first_order(axis)[node];
            let c = coeffs.second_order(axis)[node];
            if b != 0.0 {
                let w = match cfg.advection {
                    Advection::Central => first_derivative_weights(spec.points, pos, h),
                    Advection::Upwind => upwind_weights(spec.points, pos, h, b),
                };
                for &(off, wt) in w.terms() {
                    entries.push((offset_index(node, off, stride), -b * wt));
                }
            }
            if c != 0.0 {
                let w = second_derivative_weights(spec.points, pos, h, cfg.boundary);
                for &(off, wt) in w.terms() {
                    entries.push((offset_index(node, off, stride), -c * wt));
                }
            }
        }
        builder.push_row(&mut entries);
        rhs.push(coeffs.d[node] + inv_eps * v_old.get(node));
    }
    Ok(builder.finish(rhs))
}

/// Solution vector with solver statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// True relative residual, recomputed from a fresh product after the solve.
    pub relative_residual: f64,
}

/// Solves from a zero initial guess.
pub fn solve_system(sys: &SparseSystem, cfg: &ImplicitSchemeConfig) -> Result<LinearSolution> {
    cfg.validate()?;
    let x = match cfg.method {
        LinearMethod::KrylovBicgstab => {
            let pre = Preconditioner::new(sys, cfg.preconditioner)?;
            bicgstab(sys, &pre, cfg.linear_tol, cfg.max_linear_iters)?
        }
        LinearMethod::Direct => (banded_lu_solve(sys)?, 1),
    };
    let relative_residual = sys.relative_residual(&x.0);
    if !(relative_residual < cfg.linear_tol) {
        return Err(Error::LinearSolveFailure { iterations: x.1, relative_residual });
    }
    Ok(LinearSolution { x: x.0, iterations: x.1, relative_residual })
}

enum Preconditioner {
    Jacobi(Vec<f64>),
    Ilu0 { row_ptr: Vec<usize>, cols: Vec<usize>, lu: Vec<f64>, diag: Vec<usize> },
}

impl Preconditioner {
    fn new(sys: &SparseSystem, kind: PreconditionerKind) -> Result<Self> {
        match kind {
            PreconditionerKind::Jacobi => {
                let d = sys.diagonal();
                if d.iter().any(|&x| x == 0.0 || !x.is_finite()) {
                    return Err(Error::LinearSolveFailure { iterations: 0, relative_residual: f64::INFINITY });
                }
                Ok(Preconditioner::Jacobi(d.iter().map(|x| 1.0 / x).collect()))
            }
            PreconditionerKind::Ilu0 => ilu0(sys),
        }
    }

    fn apply(&self, input: &[f64], out: &mut [f64]) {
        match self {
            Preconditioner::Jacobi(inv) => {
                for ((o, x), d) in out.iter_mut().zip(input).zip(inv) {
                    *o = d * x;
                }
            }
            Preconditioner::Ilu0 { row_ptr, cols, lu, diag } => {
                let n = input.len();
                // L y = input, unit lower triangle.
                for r in 0..n {
                    let mut acc = input[r];
                    for j in row_ptr[r]..diag[r] {
                        acc -= lu[j] * out[cols[j]];
                    }
                    out[r] = acc;
                }
                // U out = y.
                for r in (0..n).rev() {
                    let mut acc = out[r];
                    for j in diag[r] + 1..row_ptr[r + 1] {
                        acc -= lu[j] * out[cols[j]];
                    }
                    out[r] = acc / lu[diag[r]];
                }
            }
        }
    }
}

fn ilu0(sys: &SparseSystem) -> Result<Preconditioner> {
    let n = sys.n;
    let row_ptr = sys.row_ptr.clone();
    let cols = sys.cols.clone();
    let mut lu = sys.vals.clone();
    let singular = || Error::LinearSolveFailure { iterations: 0, relative_residual: f64::INFINITY };
    let mut diag = alloc::vec![0usize; n];
    for r in 0..n {
        diag[r] = (row_ptr[r]..row_ptr[r + 1]).find(|&j| cols[j] == r).ok_or_else(singular)?;
    }
    // Position of each column of the current row, or usize::MAX.
    let mut marker = alloc::vec![usize::MAX; n];
    for r in 0..n {
        for j in row_ptr[r]..row_ptr[r + 1] {
            marker[cols[j]] = j;
        }
        for j in row_ptr[r]..diag[r] {
            let k = cols[j];
            let pivot = lu[diag[k]];
            let factor = lu[j] / pivot;
            lu[j] = factor;
            for m in diag[k] + 1..row_ptr[k + 1] {
                let pos = marker[cols[m]];
                if pos != usize::MAX {
                    lu[pos] -= factor * lu[m];
                }
            }
        }
        let d = lu[diag[r]];
        if d == 0.0 || !d.is_finite() {
            return Err(singular());
        }
        for j in row_ptr[r]..row_ptr[r + 1] {
            marker[cols[j]] = usize::MAX;
        }
    }
    Ok(Preconditioner::Ilu0 { row_ptr, cols, lu, diag })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(it: impl Iterator<Item = f64>) -> f64 {
    libm::sqrt(it.map(|x| x * x).sum())
}

/// Right-preconditioned BiCGSTAB. Restarts from the current iterate when
/// the recursive residual has drifted away from the true one.
fn bicgstab(sys: &SparseSystem, pre: &Preconditioner, tol: f64, max_iters: usize) -> Result<(Vec<f64>, usize)> {
    let n = sys.dim();
    let b_norm = norm(sys.rhs.iter().copied());
    let mut x = alloc::vec![0.0; n];
    if b_norm == 0.0 {
        return Ok((x, 0));
    }
    let target = tol * b_norm;
    let fail = |it: usize, r: f64| Error::LinearSolveFailure { iterations: it, relative_residual: r / b_norm };

    let mut r = sys.rhs.clone();
    let mut r_hat = r.clone();
    let mut p = alloc::vec![0.0; n];
    let mut v = alloc::vec![0.0; n];
    let mut y = alloc::vec![0.0; n];
    let mut s = alloc::vec![0.0; n];
    let mut z = alloc::vec![0.0; n];
    let mut t = alloc::vec![0.0; n];
    let (mut rho_old, mut alpha, mut omega) = (1.0, 1.0, 1.0);
    let mut it = 0;
    let mut r_norm = b_norm;

    while it < max_iters {
        it += 1;
        let rho = dot(&r_hat, &r);
        if rho == 0.0 || !rho.is_finite() {
            return Err(fail(it, r_norm));
        }
        let beta = (rho / rho_old) * (alpha / omega);
        for i in 0..n {
            p[i] = r[i] + beta * (p[i] - omega * v[i]);
        }
        pre.apply(&p, &mut y);
        sys.mul_vec_into(&y, &mut v);
        let denom = dot(&r_hat, &v);
        if denom == 0.0 || !denom.is_finite() {
            return Err(fail(it, r_norm));
        }
        alpha = rho / denom;
        for i in 0..n {
            s[i] = r[i] - alpha * v[i];
        }
        let s_norm = norm(s.iter().copied());
        if s_norm <= target {
            for i in 0..n {
                x[i] += alpha * y[i];
            }
        } else {
            pre.apply(&s, &mut z);
            sys.mul_vec_into(&z, &mut t);
            let tt = dot(&t, &t);
            if tt == 0.0 {
                return Err(fail(it, r_norm));
            }
            omega = dot(&t, &s) / tt;
            for i in 0..n {
                x[i] += alpha * y[i] + omega * z[i];
                r[i] = s[i] - omega * t[i];
            }
            r_norm = norm(r.iter().copied());
            rho_old = rho;
            if omega == 0.0 {
                return Err(fail(it, r_norm));
            }
            if r_norm > target {
                continue;
            }
        }
        // Recursive residual says converged; confirm against the true one.
        let ax = sys.mul_vec(&x);
        for i in 0..n {
            r[i] = sys.rhs[i] - ax[i];
        }
        r_norm = norm(r.iter().copied());
        if r_norm <= target {
            return Ok((x, it));
        }
        r_hat.copy_from_slice(&r);
        p.iter_mut().for_each(|e| *e = 0.0);
        v.iter_mut().for_each(|e| *e = 0.0);
        rho_old = 1.0;
        alpha = 1.0;
        omega = 1.0;
    }
    Err(fail(it, r_norm))
}

/// Upper bound on band storage for the direct method (number of f64 entries).
const DIRECT_MAX_BAND_ENTRIES: usize = 1 << 26;

/// Gaussian elimination with partial pivoting on band storage.
fn banded_lu_solve(sys: &SparseSystem) -> Result<Vec<f64>> {
    let n = sys.dim();
    let (kl, ku) = sys.bandwidths();
    // Row interchanges widen the upper band by kl.
    let width = 2 * kl + ku + 1;
    if n.saturating_mul(width) > DIRECT_MAX_BAND_ENTRIES {
        return Err(Error::InvalidConfig("system too large for the direct method"));
    }
    let singular = Error::LinearSolveFailure { iterations: 1, relative_residual: f64::INFINITY };
    // Row r stores columns r - kl ..= r + kl + ku at offsets 0..width.
    let mut band = alloc::vec![0.0; n * width];
    let at = |r: usize, c: usize| r * width + (c + kl - r);
    for r in 0..n {
        for (c, v) in sys.row(r) {
            band[at(r, c)] = v;
        }
    }
    let mut rhs = sys.rhs.clone();
    for col in 0..n {
        let last = (col + kl).min(n - 1);
        let mut piv = col;
        let mut best = band[at(col, col)].abs();
        for r in col + 1..=last {
            let v = band[at(r, col)].abs();
            if v > best {
                best = v;
                piv = r;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return Err(singular);
        }
        let row_end = (col + kl + ku).min(n - 1);
        if piv != col {
            for c in col..=row_end {
                band.swap(at(col, c), at(piv, c));
            }
            rhs.swap(col, piv);
        }
        let pivot = band[at(col, col)];
        for r in col + 1..=last {
            let f = band[at(r, col)] / pivot;
            if f == 0.0 {
                continue;
            }
            band[at(r, col)] = 0.0;
            for c in col + 1..=row_end {
                band[at(r, c)] -= f * band[at(col, c)];
            }
            rhs[r] -= f * rhs[col];
        }
    }
    let mut x = alloc::vec![0.0; n];
    for r in (0..n).rev() {
        let row_end = (r + kl + ku).min(n - 1);
        let mut acc = rhs[r];
        for c in r + 1..=row_end {
            acc -= band[at(r, c)] * x[c];
        }
        x[r] = acc / band[at(r, r)];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::AxisSpec;
    use crate::model::StateVector;

    fn tridiagonal(n: usize) -> SparseSystem {
        // Dirichlet rows at both ends, -x[i-1] + 2 x[i] - x[i+1] = 2 inside:
        // exact solution x[i] = i (n - 1 - i).
        let mut t = Vec::new();
        let mut rhs = alloc::vec![0.0; n];
        t.push((0, 0, 1.0));
        t.push((n - 1, n - 1, 1.0));
        for i in 1..n - 1 {
            t.extend([(i, i - 1, -1.0), (i, i, 2.0), (i, i + 1, -1.0)]);
            rhs[i] = 2.0;
        }
        SparseSystem::from_triplets(n, &t, rhs).unwrap()
    }

    #[test]
    fn identity_returns_rhs() {
        let n = 6;
        let t: Vec<_> = (0..n).map(|i| (i, i, 1.0)).collect();
        let rhs: Vec<f64> = (0..n).map(|i| i as f64 - 2.5).collect();
        let sys = SparseSystem::from_triplets(n, &t, rhs.clone()).unwrap();
        for method in [LinearMethod::KrylovBicgstab, LinearMethod::Direct] {
            let cfg = ImplicitSchemeConfig { method, ..Default::default() };
            assert_eq!(solve_system(&sys, &cfg).unwrap().x, rhs);
        }
    }

    #[test]
    fn tridiagonal_matches_closed_form() {
        for n in [5, 40] {
            let sys = tridiagonal(n);
            for method in [LinearMethod::KrylovBicgstab, LinearMethod::Direct] {
                let cfg = ImplicitSchemeConfig { method, ..Default::default() };
                let sol = solve_system(&sys, &cfg).unwrap();
                for (i, x) in sol.x.iter().enumerate() {
                    let exact = (i * (n - 1 - i)) as f64;
                    assert!((x - exact).abs() < 1e-8, "{method:?} n={n} i={i}: {x} vs {exact}");
                }
            }
        }
    }

    #[test]
    fn zero_row_is_a_failure() {
        let t = [(0, 0, 1.0), (2, 2, 1.0), (1, 0, 0.0)];
        let sys = SparseSystem::from_triplets(3, &t, alloc::vec![1.0, 1.0, 1.0]).unwrap();
        for method in [LinearMethod::KrylovBicgstab, LinearMethod::Direct] {
            let cfg = ImplicitSchemeConfig { method, ..Default::default() };
            assert!(matches!(solve_system(&sys, &cfg), Err(Error::LinearSolveFailure { .. })));
        }
    }

    #[test]
    fn iteration_budget_exhaustion_fails() {
        // ILU(0) is exact on a tridiagonal matrix, so use the weaker preconditioner.
        let sys = tridiagonal(200);
        let cfg = ImplicitSchemeConfig {
            max_linear_iters: 2,
            preconditioner: PreconditionerKind::Jacobi,
            ..Default::default()
        };
        assert!(matches!(solve_system(&sys, &cfg), Err(Error::LinearSolveFailure { .. })));
    }

    fn small_grid() -> Grid3 {
        Grid3::new(AxisSpec::new(0.0, 1.0, 5), AxisSpec::new(0.0, 1.0, 4), AxisSpec::new(0.0, 1.0, 4)).unwrap()
    }

    #[test]
    fn zero_coefficients_give_diagonal_system() {
        let g = small_grid();
        let mut coeffs = HjbCoefficients::zeros(g);
        coeffs.d = (0..g.len()).map(|i| 0.1 * i as f64).collect();
        let v_old = ScalarField::from_fn(g, |s| s.k + 2.0 * s.gamma);
        let rho = 0.03;
        let cfg = ImplicitSchemeConfig::default();
        let sys = build_system(&coeffs, &v_old, rho, &cfg).unwrap();
        assert_eq!(sys.nnz(), g.len());
        let sol = solve_system(&sys, &cfg).unwrap();
        for node in 0..g.len() {
            let expected = (coeffs.d[node] + v_old.get(node)) / (1.0 + rho);
            assert!((sol.x[node] - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn one_dimensional_laplacian_rows() {
        let g = small_grid();
        let h = g.k.spacing();
        let mut coeffs = HjbCoefficients::zeros(g);
        coeffs.c_k = alloc::vec![1.0; g.len()];
        let rho = 0.05;
        let cfg = ImplicitSchemeConfig::default();
        let sys = build_system(&coeffs, &ScalarField::constant(g, 0.0), rho, &cfg).unwrap();
        let q = 1.0 / (h * h);
        let diag = 1.0 + rho;
        // Hand-assembled rows of one k-line (j = l = 1).
        let expected: [[f64; 5]; 5] = [
            [diag - q, 2.0 * q, -q, 0.0, 0.0],
            [-q, diag + 2.0 * q, -q, 0.0, 0.0],
            [0.0, -q, diag + 2.0 * q, -q, 0.0],
            [0.0, 0.0, -q, diag + 2.0 * q, -q],
            [0.0, 0.0, -q, 2.0 * q, diag - q],
        ];
        for (i, row) in expected.iter().enumerate() {
            let r = g.flatten(i, 1, 1);
            let mut dense = [0.0; 5];
            for (c, v) in sys.row(r) {
                let (ci, cj, cl) = g.unflatten(c);
                assert_eq!((cj, cl), (1, 1), "coupling must stay on the k-line");
                dense[ci] = v;
            }
            for (a, b) in dense.iter().zip(row) {
                assert!((a - b).abs() < 1e-9 * q, "row {i}: {dense:?} vs {row:?}");
            }
        }
    }

    #[test]
    fn advection_rows_annihilate_constants() {
        let g = small_grid();
        let mut coeffs = HjbCoefficients::zeros(g);
        for node in 0..g.len() {
            let s = g.state(node);
            coeffs.b_k[node] = 0.3 - s.k;
            coeffs.b_sl[node] = s.s_l - 0.5;
            coeffs.b_gamma[node] = 1.0 + s.gamma;
            coeffs.c_gamma[node] = 0.2;
        }
        let rho = 0.04;
        for advection in [Advection::Central, Advection::Upwind] {
            let cfg = ImplicitSchemeConfig { advection, ..Default::default() };
            let sys = build_system(&coeffs, &ScalarField::constant(g, 0.0), rho, &cfg).unwrap();
            let ones = alloc::vec![1.0; g.len()];
            for (r, v) in sys.mul_vec(&ones).iter().enumerate() {
                assert!((v - (1.0 + rho)).abs() < 1e-12, "row {r}: {v}");
            }
            assert!(sys.max_row_len() <= 7);
        }
    }

    #[test]
    fn coefficients_follow_model() {
        let g = Grid3::default_bounds(6).unwrap();
        let il = ScalarField::constant(g, 0.04);
        let ih = ScalarField::constant(g, 0.06);
        let p = ModelParams::DEFAULT;
        let coeffs = assemble_coefficients(&p, &g, &il, &ih).unwrap();
        for node in [0, 17, g.len() - 1] {
            let s = g.state(node);
            let d = drifts(&p, &s, &ControlVector::new(0.04, 0.06));
            assert_eq!(coeffs.b_k[node], d.dk_star);
            assert_eq!(coeffs.b_gamma[node], d.dgamma_star);
        }
        assert!(coeffs.c_k.iter().chain(&coeffs.c_sl).chain(&coeffs.c_gamma).all(|&c| c >= 0.0));
    }

    #[test]
    fn fully_decarbonised_node_has_no_climate_terms() {
        let g = Grid3::new(AxisSpec::new(0.0, 1.0, 4), AxisSpec::new(0.0, 1.0, 4), AxisSpec::new(0.0, 1.0, 4)).unwrap();
        let p = ModelParams { lambda_ci: 1.0, ..ModelParams::DEFAULT };
        let c = ScalarField::constant(g, 0.03);
        let coeffs = assemble_coefficients(&p, &g, &c, &c).unwrap();
        let node = g.flatten(2, 3, 1);
        assert_eq!(g.state(node).s_l, 1.0);
        assert_eq!(coeffs.b_gamma[node], 0.0);
        assert_eq!(coeffs.c_gamma[node], 0.0);
    }

    #[test]
    fn inadmissible_controls_abort_assembly_with_node() {
        let g = small_grid();
        let p = ModelParams::DEFAULT;
        let il = ScalarField::from_fn(g, |s: &StateVector| if s.k > 0.9 && s.s_l > 0.9 { 1.0 } else { 0.01 });
        let ih = ScalarField::constant(g, 0.01);
        match assemble_coefficients(&p, &g, &il, &ih) {
            Err(Error::NonPositiveConsumptionAt { node, .. }) => assert_eq!(node, g.flatten(4, 3, 0)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
