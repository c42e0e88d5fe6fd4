//! Scenario files, parallel path simulation and result export.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use hjb_core::emulator::{simulate_path, summarize, EmulationConfig, Scenario, ScenarioResult};
use hjb_core::{Error, ModelParams, SolutionGrid};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Contents of an emulation TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EmulationFile {
    #[serde(default)]
    pub emulation: EmulationConfig,
    #[serde(default, rename = "scenario")]
    pub scenarios: Vec<ScenarioSpec>,
}

impl Default for EmulationFile {
    fn default() -> Self {
        EmulationFile { emulation: EmulationConfig::default(), scenarios: default_scenarios() }
    }
}

/// One scenario: parameter changes relative to the baseline calibration and
/// optionally its own solved policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub label: String,
    /// Solution solved under this scenario's parameters. Relative paths are
    /// taken relative to the emulation file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution: Option<PathBuf>,
    /// Multiplicative changes, by calibration key.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub scale: BTreeMap<String, f64>,
    /// Replacement values, by calibration key; applied after `scale`.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub set: BTreeMap<String, f64>,
}

/// Low-carbon adjustment cost at half, one and two times the baseline.
pub fn default_scenarios() -> Vec<ScenarioSpec> {
    [("kappa_l_x0.5", 0.5), ("kappa_l_x1", 1.0), ("kappa_l_x2", 2.0)]
        .into_iter()
        .map(|(label, m)| ScenarioSpec {
            label: label.to_string(),
            solution: None,
            scale: if m == 1.0 { BTreeMap::new() } else { BTreeMap::from([("kappa_l".to_string(), m)]) },
            set: BTreeMap::new(),
        })
        .collect()
}

fn field_index(key: &str) -> Result<usize, CliError> {
    ModelParams::FIELD_NAMES
        .iter()
        .position(|n| *n == key)
        .ok_or_else(|| CliError::Config(format!("unknown calibration key `{key}` in scenario")))
}

impl ScenarioSpec {
    pub fn apply(&self, base: &ModelParams) -> Result<ModelParams, CliError> {
        let mut a = base.to_array();
        for (k, m) in &self.scale {
            a[field_index(k)?] *= m;
        }
        for (k, v) in &self.set {
            a[field_index(k)?] = *v;
        }
        Ok(ModelParams::from_array(a))
    }
}

/// Scenario specs resolved against the baseline solution, with any
/// scenario-specific solutions loaded.
pub struct ResolvedScenarios {
    pub labels: Vec<String>,
    pub params: Vec<ModelParams>,
    pub solutions: Vec<Option<SolutionGrid>>,
    pub inputs: Vec<PathBuf>,
}

impl ResolvedScenarios {
    pub fn load(
        specs: &[ScenarioSpec],
        baseline: &SolutionGrid,
        base_dir: &Path,
    ) -> Result<Self, CliError> {
        let mut out = ResolvedScenarios { labels: vec![], params: vec![], solutions: vec![], inputs: vec![] };
        if specs.is_empty() {
            return Err(CliError::Config("no scenarios given".into()));
        }
        for spec in specs {
            let stem = file_stem(&spec.label);
            if stem.is_empty() {
                return Err(CliError::Config(format!("scenario label `{}` has no usable characters", spec.label)));
            }
            if out.labels.iter().any(|l| file_stem(l) == stem) {
                return Err(CliError::Config(format!("scenario label `{}` collides with an earlier one", spec.label)));
            }
            out.labels.push(spec.label.clone());
            out.params.push(spec.apply(&baseline.meta.params)?);
            out.solutions.push(match &spec.solution {
                Some(p) => {
                    let p = if p.is_relative() { base_dir.join(p) } else { p.clone() };
                    let sol = crate::format::load_solution(&p)?;
                    out.inputs.push(p);
                    Some(sol)
                }
                None => None,
            });
        }
        Ok(out)
    }

    /// Checks every scenario against its policy.
    pub fn scenarios<'a>(&'a self, baseline: &'a SolutionGrid, frozen_policy: bool) -> Result<Vec<Scenario<'a>>, CliError> {
        (0..self.labels.len())
            .map(|i| {
                let policy = self.solutions[i].as_ref().unwrap_or(baseline);
                Scenario::new(self.labels[i].clone(), self.params[i], policy, frozen_policy).map_err(|e| match e {
                    Error::ScenarioOverrideInvalid(msg) => {
                        CliError::Scenario(format!("scenario `{}`: {msg}", self.labels[i]))
                    }
                    other => CliError::Solver(other),
                })
            })
            .collect()
    }
}

/// Simulates all scenarios on a pool of `threads` workers. Paths are
/// collected in index order, so the result does not depend on `threads`.
pub fn run_parallel(cfg: &EmulationConfig, scenarios: &[Scenario<'_>], threads: usize) -> Result<Vec<ScenarioResult>, CliError> {
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start thread pool: {e}")))?;
    Ok(pool.install(|| {
        scenarios
            .iter()
            .enumerate()
            .map(|(si, sc)| {
                let paths = (0..cfg.n_paths).into_par_iter().map(|pi| simulate_path(cfg, sc, si, pi)).collect();
                summarize(sc.label.clone(), cfg, paths)
            })
            .collect()
    }))
}

/// Label reduced to characters that are safe in file names.
pub fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') { c } else { '_' })
        .collect::<String>()
        .trim_matches('.')
        .to_string()
}

fn year(t: f64) -> f64 {
    (t * 1e9).round() / 1e9
}

pub fn scenario_csv(r: &ScenarioResult) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Config(format!("csv export failed: {e}"));
    w.write_record(["year", "mean_sl", "p2.5_sl", "p97.5_sl", "mean_k", "mean_gamma", "mean_n"]).map_err(err)?;
    for (t, &time) in r.times.iter().enumerate() {
        let row = [year(time), r.s_l.mean[t], r.s_l.low[t], r.s_l.high[t], r.k.mean[t], r.gamma.mean[t], r.n.mean[t]];
        w.write_record(row.iter().map(|x| x.to_string())).map_err(err)?;
    }
    w.into_inner().map_err(|e| CliError::Config(format!("csv export failed: {e}")))
}

#[derive(Debug, Clone, Serialize)]
pub struct TerminalSummary {
    pub year: f64,
    pub mean_sl: f64,
    pub p2_5_sl: f64,
    pub p97_5_sl: f64,
    pub mean_k: f64,
    pub mean_gamma: f64,
    pub mean_n: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct ScenarioSummary {
    pub label: String,
    pub csv: String,
    pub params: ModelParams,
    pub policy_calibration_hash: u64,
    pub frozen_policy: bool,
    pub n_paths: usize,
    pub steps: usize,
    /// Path-steps spent outside the policy grid (controls read at the clamped state).
    pub excursions: usize,
    pub terminal: TerminalSummary,
}

#[derive(Debug, Clone, Serialize)]
pub struct EmulationSummary {
    pub settings: EmulationConfig,
    pub scenarios: Vec<ScenarioSummary>,
}

pub fn summary(cfg: &EmulationConfig, scenarios: &[Scenario<'_>], results: &[ScenarioResult]) -> EmulationSummary {
    let items = scenarios
        .iter()
        .zip(results)
        .map(|(sc, r)| {
            let last = r.times.len() - 1;
            ScenarioSummary {
                label: r.label.clone(),
                csv: format!("{}.csv", file_stem(&r.label)),
                params: sc.params,
                policy_calibration_hash: sc.policy.meta.calibration_hash,
                frozen_policy: sc.params.fingerprint() != sc.policy.meta.calibration_hash,
                n_paths: r.paths.len(),
                steps: last,
                excursions: r.excursions,
                terminal: TerminalSummary {
                    year: year(r.times[last]),
                    mean_sl: r.s_l.mean[last],
                    p2_5_sl: r.s_l.low[last],
                    p97_5_sl: r.s_l.high[last],
                    mean_k: r.k.mean[last],
                    mean_gamma: r.gamma.mean[last],
                    mean_n: r.n.mean[last],
                },
            }
        })
        .collect();
    EmulationSummary { settings: *cfg, scenarios: items }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_scale_then_set() {
        let spec = ScenarioSpec {
            label: "x".into(),
            solution: None,
            scale: BTreeMap::from([("kappa_l".into(), 2.0), ("rho".into(), 3.0)]),
            set: BTreeMap::from([("rho".into(), 0.05)]),
        };
        let p = spec.apply(&ModelParams::DEFAULT).unwrap();
        assert_eq!(p.kappa_l, 12.0);
        assert_eq!(p.rho, 0.05);
        assert_eq!(p.alpha, ModelParams::DEFAULT.alpha);
    }

    #[test]
    fn unknown_key_is_a_config_error() {
        let spec = ScenarioSpec { label: "x".into(), solution: None, scale: BTreeMap::from([("kapa".into(), 2.0)]), set: BTreeMap::new() };
        assert!(matches!(spec.apply(&ModelParams::DEFAULT), Err(CliError::Config(_))));
    }

    #[test]
    fn default_set_has_three_multipliers() {
        let d = default_scenarios();
        let k: Vec<f64> = d.iter().map(|s| s.apply(&ModelParams::DEFAULT).unwrap().kappa_l).collect();
        assert_eq!(k, vec![3.0, 6.0, 12.0]);
    }

    #[test]
    fn file_stems() {
        assert_eq!(file_stem("kappa_l_x0.5"), "kappa_l_x0.5");
        assert_eq!(file_stem("a b/c"), "a_b_c");
        assert_eq!(file_stem(".."), "");
    }
}
