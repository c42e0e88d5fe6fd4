//! Uniform rectilinear grid over `(k, s_l, gamma)`, scalar fields on it and
//! the finite-difference stencils used by both the policy step and the
//! linear system.
//!
//! Interior nodes use central differences. Boundary nodes use one-sided
//! first differences and shifted three-point second differences, so every
//! stencil is exact on quadratics.
//!
//! Nodes are flattened row-major with `k` fastest:
//! `index = i + n_k * (j + n_sl * l)`.

use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StateVector;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Axis {
    K,
    Sl,
    Gamma,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::K, Axis::Sl, Axis::Gamma];

    pub fn index(self) -> usize {
        match self {
            Axis::K => 0,
            Axis::Sl => 1,
            Axis::Gamma => 2,
        }
    }
}

/// Bounds and point count of one axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub min: f64,
    pub max: f64,
    pub points: usize,
}

impl AxisSpec {
    pub fn new(min: f64, max: f64, points: usize) -> Self {
        AxisSpec { min, max, points }
    }

    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.points - 1) as f64
    }

    pub fn coordinate(&self, i: usize) -> f64 {
        if i + 1 == self.points {
            self.max
        } else {
            self.min + (self.max - self.min) * i as f64 / (self.points - 1) as f64
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.min.is_finite() && self.max.is_finite()) || self.min >= self.max {
            return Err(Error::InvalidConfig("axis bounds must be finite with min < max"));
        }
        if self.points < 4 {
            return Err(Error::InvalidConfig("each axis needs at least 4 points"));
        }
        Ok(())
    }
}

/// Treatment of the second derivative at the two boundary nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryStencil {
    /// Shifted three-point stencil: `f0 - 2 f1 + f2` at the lower edge and
    /// `f(I-1) - 2 f(I-2) + f(I-3)` at the upper edge.
    #[default]
    ThreePoint,
    /// Second-order one-sided four-point stencil `2 f0 - 5 f1 + 4 f2 - f3`.
    FourPoint,
}

/// Three-dimensional grid over `(k, s_l, gamma)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid3 {
    pub k: AxisSpec,
    pub s_l: AxisSpec,
    pub gamma: AxisSpec,
}

impl Grid3 {
    pub fn new(k: AxisSpec, s_l: AxisSpec, gamma: AxisSpec) -> Result<Self> {
        let g = Grid3 { k, s_l, gamma };
        g.validate()?;
        Ok(g)
    }

    /// Default domain with `points` nodes on every axis.
    pub fn default_bounds(points: usize) -> Result<Self> {
        Grid3::new(
            AxisSpec::new(libm::log(10.0), libm::log(1000.0), points),
            AxisSpec::new(0.001, 0.999, points),
            AxisSpec::new(0.0, 4.0, points),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.k.validate()?;
        self.s_l.validate()?;
        self.gamma.validate()
    }

    pub fn axis(&self, axis: Axis) -> &AxisSpec {
        match axis {
            Axis::K => &self.k,
            Axis::Sl => &self.s_l,
            Axis::Gamma => &self.gamma,
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.k.points, self.s_l.points, self.gamma.points]
    }

    pub fn len(&self) -> usize {
        self.k.points * self.s_l.points * self.gamma.points
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Distance between neighbouring nodes along `axis`.
    pub fn stride(&self, axis: Axis) -> usize {
        match axis {
            Axis::K => 1,
            Axis::Sl => self.k.points,
            Axis::Gamma => self.k.points * self.s_l.points,
        }
    }

    pub fn flatten(&self, i: usize, j: usize, l: usize) -> usize {
        i + self.k.points * (j + self.s_l.points * l)
    }

    pub fn unflatten(&self, index: usize) -> (usize, usize, usize) {
        let i = index % self.k.points;
        let rest = index / self.k.points;
        (i, rest % self.s_l.points, rest / self.s_l.points)
    }

    /// Position of `node` along `axis`.
    pub fn axis_position(&self, axis: Axis, node: usize) -> usize {
        let (i, j, l) = self.unflatten(node);
        [i, j, l][axis.index()]
    }

    pub fn state(&self, node: usize) -> StateVector {
        let (i, j, l) = self.unflatten(node);
        StateVector::new(self.k.coordinate(i), self.s_l.coordinate(j), self.gamma.coordinate(l))
    }

    pub fn is_interior(&self, node: usize) -> bool {
        let (i, j, l) = self.unflatten(node);
        let [nk, ns, ng] = self.shape();
        (1..nk - 1).contains(&i) && (1..ns - 1).contains(&j) && (1..ng - 1).contains(&l)
    }

    pub fn contains(&self, s: &StateVector) -> bool {
        (self.k.min..=self.k.max).contains(&s.k)
            && (self.s_l.min..=self.s_l.max).contains(&s.s_l)
            && (self.gamma.min..=self.gamma.max).contains(&s.gamma)
    }

    /// Projects the grid coordinates of `s` onto the grid box; `n` is kept.
    pub fn clamp(&self, s: &StateVector) -> StateVector {
        StateVector {
            k: s.k.clamp(self.k.min, self.k.max),
            s_l: s.s_l.clamp(self.s_l.min, self.s_l.max),
            gamma: s.gamma.clamp(self.gamma.min, self.gamma.max),
            n: s.n,
        }
    }
}

/// Finite-difference weights: `sum(w * f[i + offset])`, at most four terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilWeights {
    terms: [(isize, f64); 4],
    len: usize,
}

impl StencilWeights {
    fn from_slice(terms: &[(isize, f64)]) -> Self {
        let mut out = StencilWeights { terms: [(0, 0.0); 4], len: terms.len() };
        out.terms[..terms.len()].copy_from_slice(terms);
        out
    }

    pub fn terms(&self) -> &[(isize, f64)] {
        &self.terms[..self.len]
    }

    pub fn apply(&self, values: &[f64], center: usize, stride: usize) -> f64 {
        self.terms()
            .iter()
            .map(|&(off, w)| w * values[offset_index(center, off, stride)])
            .sum()
    }
}

pub(crate) fn offset_index(center: usize, offset: isize, stride: usize) -> usize {
    (center as isize + offset * stride as isize) as usize
}

/// First-derivative weights at position `i` of an axis with `n` points.
pub fn first_derivative_weights(n: usize, i: usize, h: f64) -> StencilWeights {
    if i == 0 {
        StencilWeights::from_slice(&[(0, -1.0 / h), (1, 1.0 / h)])
    } else if i + 1 == n {
        StencilWeights::from_slice(&[(-1, -1.0 / h), (0, 1.0 / h)])
    } else {
        let w = 0.5 / h;
        StencilWeights::from_slice(&[(-1, -w), (1, w)])
    }
}

/// Second-derivative weights at position `i` of an axis with `n` points.
pub fn second_derivative_weights(
    n: usize,
    i: usize,
    h: f64,
    boundary: BoundaryStencil,
) -> StencilWeights {
    let q = 1.0 / (h * h);
    let lower = i == 0;
    let upper = i + 1 == n;
    if !lower && !upper {
        return StencilWeights::from_slice(&[(-1, q), (0, -2.0 * q), (1, q)]);
    }
    // Offsets point inwards from the edge.
    let dir: isize = if lower { 1 } else { -1 };
    match boundary {
        BoundaryStencil::ThreePoint => {
            StencilWeights::from_slice(&[(0, q), (dir, -2.0 * q), (2 * dir, q)])
        }
        BoundaryStencil::FourPoint => StencilWeights::from_slice(&[
            (0, 2.0 * q),
            (dir, -5.0 * q),
            (2 * dir, 4.0 * q),
            (3 * dir, -q),
        ]),
    }
}

/// First and second partials of the value function at one node.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ValueGradients {
    pub dv_dk: f64,
    pub dv_dsl: f64,
    pub dv_dgamma: f64,
    pub d2v_dk2: f64,
    pub d2v_dsl2: f64,
    pub d2v_dgamma2: f64,
}

impl ValueGradients {
    /// `[dv_dk, dv_dsl, dv_dgamma, d2v_dk2, d2v_dsl2, d2v_dgamma2]`.
    pub fn from_array(a: [f64; 6]) -> Self {
        ValueGradients {
            dv_dk: a[0],
            dv_dsl: a[1],
            dv_dgamma: a[2],
            d2v_dk2: a[3],
            d2v_dsl2: a[4],
            d2v_dgamma2: a[5],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.dv_dk, self.dv_dsl, self.dv_dgamma, self.d2v_dk2, self.d2v_dsl2, self.d2v_dgamma2]
    }
}

/// One value per grid node.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Grid3,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Grid3, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::LengthMismatch { expected: grid.len(), found: values.len() });
        }
        Ok(ScalarField { grid, values })
    }

    pub fn constant(grid: Grid3, value: f64) -> Self {
        ScalarField { grid, values: alloc::vec![value; grid.len()] }
    }

    pub fn from_fn(grid: Grid3, f: impl Fn(&StateVector) -> f64) -> Self {
        let values = (0..grid.len()).map(|n| f(&grid.state(n))).collect();
        ScalarField { grid, values }
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, node: usize) -> f64 {
        self.values[node]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.values
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Largest absolute nodewise difference.
    pub fn sup_distance(&self, other: &ScalarField) -> Result<f64> {
        if self.grid != other.grid {
            return Err(Error::GridMismatch);
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| f64::max(m, (a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

pub fn first_derivative(field: &ScalarField, axis: Axis, node: usize) -> f64 {
    let g = field.grid();
    let spec = g.axis(axis);
    let pos = g.axis_position(axis, node);
    first_derivative_weights(spec.points, pos, spec.spacing()).apply(field.values(), node, g.stride(axis))
}

pub fn second_derivative(field: &ScalarField, axis: Axis, node: usize) -> f64 {
    second_derivative_with(field, axis, node, BoundaryStencil::ThreePoint)
}

pub fn second_derivative_with(
    field: &ScalarField,
    axis: Axis,
    node: usize,
    boundary: BoundaryStencil,
) -> f64 {
    let g = field.grid();
    let spec = g.axis(axis);
    let pos = g.axis_position(axis, node);
    second_derivative_weights(spec.points, pos, spec.spacing(), boundary)
        .apply(field.values(), node, g.stride(axis))
}

pub fn gradients_at(field: &ScalarField, node: usize) -> ValueGradients {
    gradients_at_with(field, node, BoundaryStencil::ThreePoint)
}

pub fn gradients_at_with(field: &ScalarField, node: usize, boundary: BoundaryStencil) -> ValueGradients {
    ValueGradients {
        dv_dk: first_derivative(field, Axis::K, node),
        dv_dsl: first_derivative(field, Axis::Sl, node),
        dv_dgamma: first_derivative(field, Axis::Gamma, node),
        d2v_dk2: second_derivative_with(field, Axis::K, node, boundary),
        d2v_dsl2: second_derivative_with(field, Axis::Sl, node, boundary),
        d2v_dgamma2: second_derivative_with(field, Axis::Gamma, node, boundary),
    }
}

/// Cell index and fractional offset of `x` along one axis; `x` must be in bounds.
fn locate(spec: &AxisSpec, x: f64) -> (usize, f64) {
    let mut t = (x - spec.min) / spec.spacing();
    // Snap rounding noise so that node coordinates hit their node exactly.
    let nearest = libm::round(t);
    if (t - nearest).abs() < 1e-9 {
        t = nearest;
    }
    let cell = (libm::floor(t) as usize).min(spec.points - 2);
    (cell, (t - cell as f64).clamp(0.0, 1.0))
}

/// Trilinear interpolation; errors if `s` lies outside the grid box.
pub fn trilinear_interpolate(field: &ScalarField, s: &StateVector) -> Result<f64> {
    if !field.grid().contains(s) {
        return Err(Error::OutOfBounds);
    }
    Ok(interpolate_inside(field, s))
}

/// Trilinear interpolation at `s` projected onto the grid box.
pub fn trilinear_interpolate_clamped(field: &ScalarField, s: &StateVector) -> f64 {
    interpolate_inside(field, &field.grid().clamp(s))
}

fn interpolate_inside(field: &ScalarField, s: &StateVector) -> f64 {
    let g = field.grid();
    let (i, tx) = locate(&g.k, s.k);
    let (j, ty) = locate(&g.s_l, s.s_l);
    let (l, tz) = locate(&g.gamma, s.gamma);
    let v = field.values();
    let at = |di: usize, dj: usize, dl: usize| v[g.flatten(i + di, j + dj, l + dl)];
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    // At t == 0 and t == 1 lerp returns the endpoint exactly.
    let c00 = lerp(at(0, 0, 0), at(1, 0, 0), tx);
    let c10 = lerp(at(0, 1, 0), at(1, 1, 0), tx);
    let c01 = lerp(at(0, 0, 1), at(1, 0, 1), tx);
    let c11 = lerp(at(0, 1, 1), at(1, 1, 1), tx);
    lerp(lerp(c00, c10, ty), lerp(c01, c11, ty), tz)
}

/// Resamples `field` onto the nodes of `target` by trilinear interpolation.
pub fn resample(field: &ScalarField, target: &Grid3) -> ScalarField {
    ScalarField::from_fn(*target, |s| trilinear_interpolate_clamped(field, s))
}
