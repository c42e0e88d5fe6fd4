//! Binary solution file and its CSV export.
//!
//! Layout, all integers and floats little-endian:
//!
//! | bytes | content |
//! |---|---|
//! | 8 | magic `HJBSOLN\0` |
//! | 4 | format version (u32, currently 1) |
//! | 4 | flags (u32): bit 0 converged, bit 1 supplied initial guess |
//! | 3 x 24 | axes `k`, `s_l`, `gamma`: min (f64), max (f64), points (u64) |
//! | 8 + 8 | calibration hash, config hash (u64) |
//! | 13 x 8 | calibration parameters (f64) in `ModelParams::FIELD_NAMES` order |
//! | 8 + 8 + 8 | iterations (u64), final change (f64), wall time in seconds (f64) |
//! | 3 x 8N | `v`, `i_l`, `i_h` (f64), nodes in row-major order with `k` fastest |
//! | 32 | SHA-256 of everything above |

use std::io::Write;
use std::path::Path;

use hjb_core::solver::{InitialGuess, SolutionMeta};
use hjb_core::{AxisSpec, Grid3, ModelParams, ScalarField, SolutionGrid};
use sha2::{Digest, Sha256};

use crate::error::{CliError, FormatError};

pub const MAGIC: [u8; 8] = *b"HJBSOLN\0";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 4 + 3 * 24 + 16 + 13 * 8 + 24;
const CHECKSUM_LEN: usize = 32;

const FLAG_CONVERGED: u32 = 1;
const FLAG_SUPPLIED_GUESS: u32 = 2;

pub fn encode(sol: &SolutionGrid) -> Vec<u8> {
    let n = sol.grid.len();
    let mut out = Vec::with_capacity(HEADER_LEN + 24 * n + CHECKSUM_LEN);
    let m = &sol.meta;
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let mut flags = 0;
    if m.converged {
        flags |= FLAG_CONVERGED;
    }
    if m.initial_guess == InitialGuess::Supplied {
        flags |= FLAG_SUPPLIED_GUESS;
    }
    out.extend_from_slice(&flags.to_le_bytes());
    for a in [sol.grid.k, sol.grid.s_l, sol.grid.gamma] {
        out.extend_from_slice(&a.min.to_le_bytes());
        out.extend_from_slice(&a.max.to_le_bytes());
        out.extend_from_slice(&(a.points as u64).to_le_bytes());
    }
    out.extend_from_slice(&m.calibration_hash.to_le_bytes());
    out.extend_from_slice(&m.config_hash.to_le_bytes());
    for x in m.params.to_array() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&(m.iterations as u64).to_le_bytes());
    out.extend_from_slice(&m.final_change.to_le_bytes());
    out.extend_from_slice(&m.wall_time_secs.to_le_bytes());
    for field in [&sol.v, &sol.i_l, &sol.i_h] {
        for x in field.values() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.bytes[self.pos..self.pos + N]);
        self.pos += N;
        a
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }

    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}

fn corrupt(msg: impl Into<String>) -> FormatError {
    FormatError::CorruptFile(msg.into())
}

pub fn decode(bytes: &[u8]) -> Result<SolutionGrid, FormatError> {
    if bytes.len() < 12 || bytes[..8] != MAGIC {
        return Err(corrupt("missing magic bytes"));
    }
    let mut r = Reader { bytes, pos: 8 };
    let version = r.u32();
    if version != FORMAT_VERSION {
        return Err(FormatError::FormatVersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    if bytes.len() < HEADER_LEN + CHECKSUM_LEN {
        return Err(corrupt("file shorter than its header"));
    }
    let flags = r.u32();
    let mut axes = [AxisSpec::new(0.0, 0.0, 0); 3];
    for a in &mut axes {
        let (min, max, points) = (r.f64(), r.f64(), r.u64());
        let points = usize::try_from(points).map_err(|_| corrupt("axis point count overflows"))?;
        *a = AxisSpec::new(min, max, points);
    }
    let grid = Grid3::new(axes[0], axes[1], axes[2]).map_err(|e| corrupt(format!("invalid grid: {e}")))?;
    let n = grid.len();
    let expected = n
        .checked_mul(24)
        .and_then(|p| p.checked_add(HEADER_LEN + CHECKSUM_LEN))
        .ok_or_else(|| corrupt("grid size overflows"))?;
    if bytes.len() != expected {
        return Err(corrupt(format!("expected {expected} bytes for a {n}-node grid, found {}", bytes.len())));
    }
    let body = &bytes[..bytes.len() - CHECKSUM_LEN];
    if Sha256::digest(body).as_slice() != &bytes[body.len()..] {
        return Err(corrupt("checksum mismatch"));
    }
    let calibration_hash = r.u64();
    let config_hash = r.u64();
    let mut params = [0.0; 13];
    for p in &mut params {
        *p = r.f64();
    }
    let iterations = r.u64() as usize;
    let final_change = r.f64();
    let wall_time_secs = r.f64();
    let mut field = || -> Result<ScalarField, FormatError> {
        let vals = (0..n).map(|_| r.f64()).collect();
        ScalarField::new(grid, vals).map_err(|e| corrupt(e.to_string()))
    };
    let (v, i_l, i_h) = (field()?, field()?, field()?);
    let meta = SolutionMeta {
        params: ModelParams::from_array(params),
        calibration_hash,
        config_hash,
        iterations,
        final_change,
        converged: flags & FLAG_CONVERGED != 0,
        initial_guess: if flags & FLAG_SUPPLIED_GUESS != 0 { InitialGuess::Supplied } else { InitialGuess::ClosedForm },
        wall_time_secs,
    };
    SolutionGrid::new(v, i_l, i_h, meta).map_err(|e| corrupt(e.to_string()))
}

pub fn load_solution(path: &Path) -> Result<SolutionGrid, CliError> {
    let bytes = std::fs::read(path).map_err(CliError::io("cannot read solution", path))?;
    decode(&bytes).map_err(CliError::from)
}

/// Writes `bytes` to a temporary file next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(CliError::io("cannot create file in", dir))?;
    tmp.write_all(bytes).map_err(CliError::io("cannot write", path))?;
    tmp.as_file().sync_all().map_err(CliError::io("cannot write", path))?;
    tmp.persist(path).map_err(|e| CliError::io("cannot write", path)(e.error))?;
    Ok(())
}

pub fn save_solution(sol: &SolutionGrid, path: &Path) -> Result<(), CliError> {
    write_atomic(path, &encode(sol))
}

/// One row per node with columns `k, s_l, gamma, v, i_l, i_h`.
pub fn export_csv(sol: &SolutionGrid) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Config(format!("csv export failed: {e}"));
    w.write_record(["k", "s_l", "gamma", "v", "i_l", "i_h"]).map_err(err)?;
    for node in 0..sol.grid.len() {
        let s = sol.grid.state(node);
        let row = [s.k, s.s_l, s.gamma, sol.v.get(node), sol.i_l.get(node), sol.i_h.get(node)];
        w.write_record(row.iter().map(|x| x.to_string())).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Config(format!("csv export failed: {e}")))
}
