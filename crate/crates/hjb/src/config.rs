//! Run configuration: a TOML file with a mandatory `[calibration]` table and
//! optional `[grid]`, `[solver]`, `[policy]` and `[implicit]` tables, plus
//! `--set key=value` overrides applied to the parsed document.

use std::path::{Path, PathBuf};

use hjb_core::linear_solver::ImplicitSchemeConfig;
use hjb_core::policy::PolicyUpdateConfig;
use hjb_core::{AxisSpec, Grid3, ModelParams, SolverConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// The shipped default configuration.
pub const DEFAULT_CONFIG: &str = include_str!("../../../calibration/default.toml");

/// Directory searched for relative config names and for `default.toml`.
pub const CONFIG_DIR_ENV: &str = "HJB_CONFIG_DIR";

const DEFAULT_POINTS: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub calibration: ModelParams,
    #[serde(default)]
    pub grid: GridSection,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub policy: PolicyUpdateConfig,
    #[serde(default)]
    pub implicit: ImplicitSchemeConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisBounds {
    pub min: f64,
    pub max: f64,
    /// Overrides the section-wide `points` for this axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub points: usize,
    pub k: AxisBounds,
    pub s_l: AxisBounds,
    pub gamma: AxisBounds,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = Grid3::default_bounds(DEFAULT_POINTS).expect("default grid is valid");
        let b = |a: AxisSpec| AxisBounds { min: a.min, max: a.max, points: None };
        GridSection { points: DEFAULT_POINTS, k: b(g.k), s_l: b(g.s_l), gamma: b(g.gamma) }
    }
}

impl GridSection {
    pub fn to_grid(&self) -> Result<Grid3, CliError> {
        let a = |b: AxisBounds| AxisSpec::new(b.min, b.max, b.points.unwrap_or(self.points));
        Grid3::new(a(self.k), a(self.s_l), a(self.gamma)).map_err(|e| CliError::Config(format!("[grid]: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub outer_tol: f64,
    pub max_outer_iters: usize,
    pub checkpoint_every: usize,
    pub max_step_halvings: usize,
}

impl Default for SolverSection {
    fn default() -> Self {
        let c = SolverConfig::new(ModelParams::DEFAULT, Grid3::default_bounds(4).expect("valid"));
        SolverSection {
            outer_tol: c.outer_tol,
            max_outer_iters: c.max_outer_iters,
            checkpoint_every: c.checkpoint_every,
            max_step_halvings: c.max_step_halvings,
        }
    }
}

impl RunConfig {
    pub fn to_solver_config(&self) -> Result<SolverConfig, CliError> {
        let cfg = SolverConfig {
            params: self.calibration,
            grid: self.grid.to_grid()?,
            policy: self.policy,
            implicit: self.implicit,
            outer_tol: self.solver.outer_tol,
            max_outer_iters: self.solver.max_outer_iters,
            checkpoint_every: self.solver.checkpoint_every,
            max_step_halvings: self.solver.max_step_halvings,
        };
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

/// Where a configuration was read from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfigSource {
    File(PathBuf),
    Embedded,
}

impl std::fmt::Display for ConfigSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ConfigSource::File(p) => write!(f, "{}", p.display()),
            ConfigSource::Embedded => f.write_str("<embedded default>"),
        }
    }
}

/// Finds the config file: an existing path as given, then `name` or
/// `name.toml` inside `$HJB_CONFIG_DIR`. Without a name, falls back to
/// `$HJB_CONFIG_DIR/default.toml` and then to the embedded default.
pub fn resolve(name: Option<&Path>) -> Result<ConfigSource, CliError> {
    let dir = std::env::var_os(CONFIG_DIR_ENV).map(PathBuf::from);
    match name {
        Some(p) if p.is_file() => Ok(ConfigSource::File(p.to_path_buf())),
        Some(p) => {
            if let (Some(dir), true) = (&dir, p.is_relative()) {
                for cand in [dir.join(p), dir.join(p).with_extension("toml")] {
                    if cand.is_file() {
                        return Ok(ConfigSource::File(cand));
                    }
                }
            }
            Err(CliError::Config(format!("config file not found: {}", p.display())))
        }
        None => match dir.map(|d| d.join("default.toml")) {
            Some(p) if p.is_file() => Ok(ConfigSource::File(p)),
            _ => Ok(ConfigSource::Embedded),
        },
    }
}

pub fn read_source(src: &ConfigSource) -> Result<String, CliError> {
    match src {
        ConfigSource::File(p) => std::fs::read_to_string(p).map_err(CliError::io("cannot read config", p)),
        ConfigSource::Embedded => Ok(DEFAULT_CONFIG.to_string()),
    }
}

/// Parses `text` as a TOML document, applies overrides, and deserialises `T`.
pub fn parse_with_overrides<T: serde::de::DeserializeOwned>(text: &str, overrides: &[String]) -> Result<T, CliError> {
    let mut doc: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let merged = toml::to_string(&doc).map_err(|e| CliError::Config(e.to_string()))?;
    toml::from_str(&merged).map_err(|e| CliError::Config(e.message().trim_end().to_string() + &location(&merged, &e)))
}

fn location(text: &str, e: &toml::de::Error) -> String {
    // Name the enclosing table when the parser points at one.
    let Some(span) = e.span() else { return String::new() };
    let header = text[..span.start.min(text.len())]
        .lines()
        .rev()
        .find(|l| l.trim_start().starts_with('['))
        .map(|l| l.trim().to_string());
    header.map(|h| format!(" (in {h})")).unwrap_or_default()
}

/// Applies one `dotted.key=value` override. The value is read as a TOML
/// literal when possible and as a bare string otherwise.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<(), CliError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{spec}` is not of the form key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override `{spec}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("x = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let (last, parents) = path.split_last().expect("non-empty");
    let mut table = doc;
    for p in parents {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{spec}`: `{p}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

/// Loads, overrides and validates a run configuration.
pub fn load(name: Option<&Path>, overrides: &[String]) -> Result<(RunConfig, ConfigSource), CliError> {
    let src = resolve(name)?;
    let text = read_source(&src)?;
    let cfg: RunConfig = parse_with_overrides(&text, overrides)?;
    cfg.to_solver_config()?;
    Ok((cfg, src))
}
