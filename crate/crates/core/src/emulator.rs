//! Monte-Carlo forward simulation of the four-state system under a solved
//! policy, with per-step percentile bands.
//!
//! Every path owns its random stream, derived from the seed, the scenario
//! index and the path index, so paths can be simulated in any order or in
//! parallel with identical results.

use alloc::string::String;
use alloc::vec::Vec;
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::trilinear_interpolate_clamped;
use crate::model::{damage_slope, drifts, emissions, ControlVector, ModelParams, StateVector};
use crate::solver::SolutionGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmulationConfig {
    pub n_paths: usize,
    /// Calendar year of the initial state.
    pub t_start: f64,
    pub t_end: f64,
    /// Step length in years.
    pub dt: f64,
    pub initial: StateVector,
    pub seed: u64,
    /// Draw Wiener increments; when false all shocks are zero.
    pub noise: bool,
}

impl Default for EmulationConfig {
    fn default() -> Self {
        EmulationConfig {
            n_paths: 300,
            t_start: 2020.0,
            t_end: 2050.0,
            dt: 0.1,
            initial: StateVector { k: libm::log(100.0), s_l: 0.1, gamma: 1.1, n: 0.0 },
            seed: 0,
            noise: true,
        }
    }
}

impl EmulationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 {
            return Err(Error::InvalidConfig("n_paths must be at least 1"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidConfig("dt must be positive"));
        }
        if !(self.t_end > self.t_start) {
            return Err(Error::InvalidConfig("t_end must be after t_start"));
        }
        if !self.initial.is_valid() {
            return Err(Error::InvalidConfig("initial state must be finite with s_l in [0, 1]"));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        libm::round((self.t_end - self.t_start) / self.dt) as usize
    }

    /// Calendar time of every recorded point, initial state included.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps()).map(|i| self.t_start + i as f64 * self.dt).collect()
    }
}

/// Standard normal draws for one step. Log damage shares the temperature shock.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Shocks {
    pub w_l: f64,
    pub w_h: f64,
    pub w_gamma: f64,
}

/// One Euler-Maruyama step; `s_l` is clamped to `[0, 1]` afterwards.
pub fn step(p: &ModelParams, s: &StateVector, c: &ControlVector, dt: f64, z: &Shocks) -> StateVector {
    let d = drifts(p, s, c);
    let sq = libm::sqrt(dt);
    let sl = s.s_l;
    let e = emissions(p, s);
    let capital_shock = sl * p.sigma_l * z.w_l + (1.0 - sl) * p.sigma_h * z.w_h;
    let share_shock = 0.5 * sl * (1.0 - sl) * (p.sigma_l * z.w_l + p.sigma_h * z.w_h);
    let temp_shock = e * p.sigma_gamma * z.w_gamma;
    StateVector {
        k: s.k + d.dk_star * dt + capital_shock * sq,
        s_l: (sl + d.ds_l_star * dt + share_shock * sq).clamp(0.0, 1.0),
        gamma: s.gamma + d.dgamma_star * dt + temp_shock * sq,
        n: s.n + d.dn_star * dt + damage_slope(p, s) * temp_shock * sq,
    }
}

/// Parameters plus the policy used to drive them.
#[derive(Debug, Clone)]
pub struct Scenario<'a> {
    pub label: String,
    pub params: ModelParams,
    pub policy: &'a SolutionGrid,
}

impl<'a> Scenario<'a> {
    /// Unless `frozen_policy` is set, the parameters must be the ones the
    /// policy was solved under.
    pub fn new(label: impl Into<String>, params: ModelParams, policy: &'a SolutionGrid, frozen_policy: bool) -> Result<Self> {
        params
            .validate()
            .map_err(|_| Error::ScenarioOverrideInvalid("scenario parameters violate model invariants"))?;
        if !frozen_policy && params.fingerprint() != policy.meta.calibration_hash {
            return Err(Error::ScenarioOverrideInvalid(
                "scenario parameters differ from the calibration the policy was solved under",
            ));
        }
        Ok(Scenario { label: label.into(), params, policy })
    }

    pub fn controls(&self, s: &StateVector) -> ControlVector {
        ControlVector::new(
            trilinear_interpolate_clamped(&self.policy.i_l, s),
            trilinear_interpolate_clamped(&self.policy.i_h, s),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PathOutcome {
    pub states: Vec<StateVector>,
    /// Steps at which the state lay outside the policy grid.
    pub excursions: usize,
}

fn path_rng(seed: u64, scenario_index: usize, path_index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (scenario_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(path_index as u64);
    rng
}

pub fn simulate_path(cfg: &EmulationConfig, scenario: &Scenario<'_>, scenario_index: usize, path_index: usize) -> PathOutcome {
    let mut rng = path_rng(cfg.seed, scenario_index, path_index);
    let grid = &scenario.policy.grid;
    let steps = cfg.steps();
    let mut states = Vec::with_capacity(steps + 1);
    let mut s = cfg.initial;
    let mut excursions = 0;
    states.push(s);
    for _ in 0..steps {
        excursions += usize::from(!grid.contains(&s));
        let c = scenario.controls(&s);
        let z = if cfg.noise {
            Shocks {
                w_l: StandardNormal.sample(&mut rng),
                w_h: StandardNormal.sample(&mut rng),
                w_gamma: StandardNormal.sample(&mut rng),
            }
        } else {
            Shocks::default()
        };
        s = step(&scenario.params, &s, &c, cfg.dt, &z);
        states.push(s);
    }
    PathOutcome { states, excursions }
}

/// Empirical percentile with linear interpolation between order statistics
/// (position `q / 100 * (m - 1)` in the sorted sample).
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let m = sorted.len();
    if m == 1 {
        return sorted[0];
    }
    let pos = q / 100.0 * (m - 1) as f64;
    let lo = (libm::floor(pos) as usize).min(m - 1);
    let hi = (lo + 1).min(m - 1);
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Mean and percentile band of one scalar series per time step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Bands {
    pub mean: Vec<f64>,
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

/// `paths[p][t]`; all paths must have the same length.
pub fn percentile_summary(paths: &[Vec<f64>], q_low: f64, q_high: f64) -> Bands {
    let steps = paths.first().map_or(0, Vec::len);
    let mut out = Bands::default();
    let mut column = Vec::with_capacity(paths.len());
    for t in 0..steps {
        column.clear();
        column.extend(paths.iter().map(|p| p[t]));
        out.mean.push(column.iter().sum::<f64>() / column.len() as f64);
        column.sort_by(f64::total_cmp);
        out.low.push(percentile(&column, q_low));
        out.high.push(percentile(&column, q_high));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioResult {
    pub label: String,
    pub times: Vec<f64>,
    pub paths: Vec<PathOutcome>,
    pub k: Bands,
    pub s_l: Bands,
    pub gamma: Bands,
    pub n: Bands,
    pub excursions: usize,
}

/// Builds the per-step summaries from simulated paths (in path-index order).
pub fn summarize(label: String, cfg: &EmulationConfig, paths: Vec<PathOutcome>) -> ScenarioResult {
    let series = |f: fn(&StateVector) -> f64| -> Bands {
        let cols: Vec<Vec<f64>> = paths.iter().map(|p| p.states.iter().map(f).collect()).collect();
        percentile_summary(&cols, 2.5, 97.5)
    };
    ScenarioResult {
        label,
        times: cfg.times(),
        k: series(|s| s.k),
        s_l: series(|s| s.s_l),
        gamma: series(|s| s.gamma),
        n: series(|s| s.n),
        excursions: paths.iter().map(|p| p.excursions).sum(),
        paths,
    }
}

/// Simulates every scenario sequentially.
pub fn run(cfg: &EmulationConfig, scenarios: &[Scenario<'_>]) -> Result<Vec<ScenarioResult>> {
    cfg.validate()?;
    Ok(scenarios
        .iter()
        .enumerate()
        .map(|(si, sc)| {
            let paths = (0..cfg.n_paths).map(|pi| simulate_path(cfg, sc, si, pi)).collect();
            summarize(sc.label.clone(), cfg, paths)
        })
        .collect())
}
