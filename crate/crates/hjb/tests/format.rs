use hjb::format::{decode, encode, export_csv, load_solution, save_solution, FORMAT_VERSION};
use hjb::FormatError;
use hjb_core::solver::{InitialGuess, SolutionMeta};
use hjb_core::{AxisSpec, Grid3, ModelParams, ScalarField, SolutionGrid};
use proptest::prelude::*;

fn sample(nk: usize, ns: usize, ng: usize, seed: f64) -> SolutionGrid {
    let g = Grid3::new(AxisSpec::new(2.3, 6.9, nk), AxisSpec::new(0.001, 0.999, ns), AxisSpec::new(0.0, 4.0, ng)).unwrap();
    let p = ModelParams { kappa_l: 7.5, ..ModelParams::DEFAULT };
    let meta = SolutionMeta {
        params: p,
        calibration_hash: p.fingerprint(),
        config_hash: 0xdead_beef_0123_4567,
        iterations: 321,
        final_change: 9.5e-9,
        converged: true,
        initial_guess: InitialGuess::Supplied,
        wall_time_secs: 12.25,
    };
    SolutionGrid::new(
        ScalarField::from_fn(g, |s| seed + s.k * s.s_l - s.gamma.sin()),
        ScalarField::from_fn(g, |s| 0.04 + 0.001 * s.k),
        ScalarField::from_fn(g, |s| 0.05 - 0.001 * s.gamma),
        meta,
    )
    .unwrap()
}

#[test]
fn round_trip_is_bit_identical() {
    let sol = sample(5, 6, 7, 0.3);
    let back = decode(&encode(&sol)).unwrap();
    assert_eq!(back, sol);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.hjb");
    save_solution(&sol, &path).unwrap();
    assert_eq!(load_solution(&path).unwrap(), sol);
}

#[test]
fn header_layout() {
    let sol = sample(4, 4, 4, 0.0);
    let bytes = encode(&sol);
    assert_eq!(&bytes[..8], b"HJBSOLN\0");
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FORMAT_VERSION);
    // Flags: converged and supplied guess.
    assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
    assert_eq!(f64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2.3);
    assert_eq!(u64::from_le_bytes(bytes[32..40].try_into().unwrap()), 4);
    let header = 8 + 4 + 4 + 72 + 16 + 104 + 24;
    assert_eq!(bytes.len(), header + 3 * 8 * 64 + 32);
    // First payload value is v at node 0.
    assert_eq!(f64::from_le_bytes(bytes[header..header + 8].try_into().unwrap()), sol.v.get(0));
}

#[test]
fn truncated_file_is_corrupt() {
    let bytes = encode(&sample(4, 5, 4, 1.0));
    for cut in [0, 5, 20, 200, bytes.len() - 1] {
        assert!(matches!(decode(&bytes[..cut]), Err(FormatError::CorruptFile(_))), "cut at {cut}");
    }
}

#[test]
fn flipped_byte_fails_checksum() {
    let mut bytes = encode(&sample(4, 5, 4, 1.0));
    let i = bytes.len() - 100;
    bytes[i] ^= 0x10;
    assert!(matches!(decode(&bytes), Err(FormatError::CorruptFile(m)) if m.contains("checksum")));
}

#[test]
fn other_version_is_rejected() {
    let mut bytes = encode(&sample(4, 4, 4, 1.0));
    bytes[8..12].copy_from_slice(&2u32.to_le_bytes());
    assert!(matches!(decode(&bytes), Err(FormatError::FormatVersionMismatch { found: 2, expected: 1 })));
}

#[test]
fn csv_export_columns_and_order() {
    let sol = sample(4, 5, 6, 0.0);
    let text = String::from_utf8(export_csv(&sol).unwrap()).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("k,s_l,gamma,v,i_l,i_h"));
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|x| x.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), sol.grid.len());
    for (node, row) in rows.iter().enumerate() {
        let s = sol.grid.state(node);
        assert_eq!(row[..], [s.k, s.s_l, s.gamma, sol.v.get(node), sol.i_l.get(node), sol.i_h.get(node)]);
    }
    // k varies fastest.
    assert_eq!(rows[1][1], rows[0][1]);
    assert!(rows[1][0] > rows[0][0]);
}

proptest! {
    #[test]
    fn round_trip_any_shape(nk in 4usize..8, ns in 4usize..8, ng in 4usize..8, seed in -1e3f64..1e3) {
        let sol = sample(nk, ns, ng, seed);
        prop_assert_eq!(decode(&encode(&sol)).unwrap(), sol);
    }
}
