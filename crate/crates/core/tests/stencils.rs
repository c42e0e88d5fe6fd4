use hjb_core::grid::{
    first_derivative, second_derivative_with, trilinear_interpolate, Axis, AxisSpec, BoundaryStencil, Grid3,
    ScalarField,
};
use hjb_core::StateVector;

const AXES: [Axis; 3] = [Axis::K, Axis::Sl, Axis::Gamma];

fn grid() -> Grid3 {
    Grid3::new(AxisSpec::new(-0.7, 2.3, 9), AxisSpec::new(0.001, 0.999, 7), AxisSpec::new(0.0, 4.0, 11)).unwrap()
}

fn coord(s: &StateVector, axis: Axis) -> f64 {
    match axis {
        Axis::K => s.k,
        Axis::Sl => s.s_l,
        Axis::Gamma => s.gamma,
    }
}

#[test]
fn first_derivative_of_linear_field_is_one() {
    let g = grid();
    for axis in AXES {
        let f = ScalarField::from_fn(g, |s| coord(s, axis) + 0.25);
        for node in 0..g.len() {
            let d = first_derivative(&f, axis, node);
            assert!((d - 1.0).abs() < 1e-12, "{axis:?} node {node}: {d}");
        }
    }
}

#[test]
fn second_derivative_of_square_is_two_everywhere() {
    let g = grid();
    for boundary in [BoundaryStencil::ThreePoint, BoundaryStencil::FourPoint] {
        for axis in AXES {
            let f = ScalarField::from_fn(g, |s| coord(s, axis) * coord(s, axis));
            for node in 0..g.len() {
                let d = second_derivative_with(&f, axis, node, boundary);
                assert!((d - 2.0).abs() < 1e-12, "{boundary:?} {axis:?} node {node}: {d}");
            }
        }
    }
}

/// Textbook difference quotients written out by hand, checked against the
/// library on a random-looking field.
#[test]
fn stencils_match_hand_written_quotients() {
    let g = grid();
    let f = ScalarField::from_fn(g, |s| (1.3 * s.k).sin() + s.s_l * s.s_l * s.s_l - (0.4 * s.gamma).exp() * s.k);
    let v = f.values();
    for axis in AXES {
        let spec = *g.axis(axis);
        let h = spec.spacing();
        let stride = g.stride(axis);
        for node in 0..g.len() {
            let i = g.axis_position(axis, node);
            let at = |off: isize| v[(node as isize + off * stride as isize) as usize];
            let n = spec.points;
            let (d1, d2) = if i == 0 {
                ((at(1) - at(0)) / h, (at(2) - 2.0 * at(1) + at(0)) / (h * h))
            } else if i == n - 1 {
                ((at(0) - at(-1)) / h, (at(0) - 2.0 * at(-1) + at(-2)) / (h * h))
            } else {
                ((at(1) - at(-1)) / (2.0 * h), (at(1) - 2.0 * at(0) + at(-1)) / (h * h))
            };
            let got1 = first_derivative(&f, axis, node);
            let got2 = second_derivative_with(&f, axis, node, BoundaryStencil::ThreePoint);
            assert!((got1 - d1).abs() <= 1e-12 * d1.abs().max(1.0), "{axis:?} {node}");
            assert!((got2 - d2).abs() <= 1e-10 * d2.abs().max(1.0), "{axis:?} {node}");
        }
    }
}

#[test]
fn central_difference_error_is_second_order() {
    let err = |n: usize| {
        let g = Grid3::new(AxisSpec::new(0.0, 2.0, n), AxisSpec::new(0.0, 1.0, 4), AxisSpec::new(0.0, 1.0, 4)).unwrap();
        let f = ScalarField::from_fn(g, |s| s.k.sin());
        (0..g.len())
            .filter(|&node| {
                let i = g.axis_position(Axis::K, node);
                i > 0 && i + 1 < n
            })
            .map(|node| (first_derivative(&f, Axis::K, node) - g.state(node).k.cos()).abs())
            .fold(0.0, f64::max)
    };
    for n in [11, 21, 41] {
        let ratio = err(n) / err(2 * n - 1);
        assert!((3.5..=4.5).contains(&ratio), "n={n}: ratio {ratio}");
    }
}

#[test]
fn flatten_round_trip_and_k_fastest() {
    let g = grid();
    let [nk, ns, ng] = g.shape();
    let mut expected = 0;
    for l in 0..ng {
        for j in 0..ns {
            for i in 0..nk {
                assert_eq!(g.flatten(i, j, l), expected);
                assert_eq!(g.unflatten(expected), (i, j, l));
                expected += 1;
            }
        }
    }
}

#[test]
fn trilinear_is_exact_on_multilinear_fields() {
    let g = grid();
    let f = ScalarField::from_fn(g, |s| s.k * s.s_l * s.gamma + 2.0 * s.k - s.gamma);
    for node in 0..g.len() {
        assert_eq!(trilinear_interpolate(&f, &g.state(node)).unwrap(), f.get(node));
    }
    for (k, s, gm) in [(0.1, 0.5, 1.7), (-0.69, 0.002, 3.99), (2.29, 0.9, 0.01)] {
        let want = k * s * gm + 2.0 * k - gm;
        let got = trilinear_interpolate(&f, &StateVector::new(k, s, gm)).unwrap();
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}
