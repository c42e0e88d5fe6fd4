use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use hjb_core::evaluator::{evaluate, evaluate_resampled, EvaluationReport, DEFAULT_EPSILON_FLOOR};
use hjb_core::linear_solver::{ImplicitSchemeConfig, LinearSolution, SparseSystem};
use hjb_core::solver::{interior_residual_sup, solve_with, IterationReport, SolveObserver};
use hjb_core::{Error, ModelParams, SolutionGrid, Start};
use serde_json::json;

use crate::config;
use crate::emulate::{self, EmulationFile, ResolvedScenarios};
use crate::error::CliError;
use crate::format::{self, load_solution, save_solution, write_atomic, FORMAT_VERSION};
use crate::manifest::{manifest_path_for, ManifestBuilder};

/// Finite-difference HJB solver, evaluator and policy emulator.
#[derive(Debug, Parser)]
#[command(name = "hjb", version)]
pub struct Cli {
    /// Worker threads for parallel sections; 1 runs everything on the calling thread.
    #[arg(long, global = true, default_value_t = default_threads())]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve the HJB equation and write a solution file.
    Solve(SolveArgs),
    /// Score a candidate solution against a reference.
    Evaluate(EvaluateArgs),
    /// Simulate state paths under a solved policy.
    Emulate(EmulateArgs),
    /// Print metadata and residual of a solution file.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Config file or name inside $HJB_CONFIG_DIR; defaults to the shipped configuration.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Output solution file.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Override a config value, e.g. `--set grid.points=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from a checkpoint or earlier solution on the same grid.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Suppress progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    pub reference: PathBuf,
    pub candidate: PathBuf,
    /// Interpolate the candidate onto the reference grid when they differ.
    #[arg(long)]
    pub resample: bool,
    #[arg(long, default_value_t = DEFAULT_EPSILON_FLOOR)]
    pub epsilon_floor: f64,
    /// Also write the report as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EmulateArgs {
    /// Baseline solution file.
    pub solution: PathBuf,
    /// Emulation TOML file; defaults to kappa_l x {0.5, 1, 2} with 300 paths over 2020-2050.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Override a value in the emulation file, e.g. `--set emulation.dt=0.05`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub paths: Option<usize>,
    /// Zero all shocks.
    #[arg(long)]
    pub no_noise: bool,
    /// Allow scenario parameters to run under a policy solved for other parameters.
    #[arg(long)]
    pub frozen_policy: bool,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    pub solution: PathBuf,
    /// Write the nodes as CSV (k, s_l, gamma, v, i_l, i_h).
    #[arg(long)]
    pub export_csv: Option<PathBuf>,
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Solve(a) => cmd_solve(a, cli.threads),
        Command::Evaluate(a) => cmd_evaluate(a, cli.threads),
        Command::Emulate(a) => cmd_emulate(a, cli.threads),
        Command::Inspect(a) => cmd_inspect(a, cli.threads),
    }
}

/// `<out>.ckpt`: periodic checkpoints and the last iterate of a failed solve.
pub fn checkpoint_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".ckpt");
    out.with_file_name(name)
}

struct Progress {
    quiet: bool,
    checkpoint_every: usize,
    checkpoint: PathBuf,
    clock: std::time::Instant,
    checkpoint_error: Option<CliError>,
}

impl SolveObserver for Progress {
    fn on_iteration(&mut self, r: &IterationReport, current: &dyn Fn() -> SolutionGrid) {
        if !self.quiet && (r.iteration % 10 == 0 || r.iteration == 1) {
            println!(
                "iter={} change={:.6e} linear_iters={} linear_residual={:.3e} eps_t={} degenerate={} elapsed_secs={:.1}",
                r.iteration,
                r.sup_change,
                r.linear_iterations,
                r.linear_relative_residual,
                r.epsilon_t,
                r.degenerate_nodes,
                self.clock.elapsed().as_secs_f64()
            );
        }
        if self.checkpoint_every > 0 && r.iteration % self.checkpoint_every == 0 && self.checkpoint_error.is_none() {
            let mut sol = current();
            sol.meta.wall_time_secs = self.clock.elapsed().as_secs_f64();
            if let Err(e) = save_solution(&sol, &self.checkpoint) {
                eprintln!("warning: checkpoint not written: {e}");
                self.checkpoint_error = Some(e);
            }
        }
    }

    fn on_linear_solve(&mut self, _: &SparseSystem, _: &LinearSolution) {}
}

fn cmd_solve(a: SolveArgs, threads: usize) -> Result<(), CliError> {
    let (run_cfg, source) = config::load(a.config.as_deref(), &a.overrides)?;
    let cfg = run_cfg.to_solver_config()?;
    let snapshot = json!({ "source": source.to_string(), "run": run_cfg, "config_hash": cfg.fingerprint() });
    let mut manifest = ManifestBuilder::start("solve", snapshot, &a.overrides, threads);
    if let config::ConfigSource::File(p) = &source {
        manifest.input(p);
    }

    let start = match &a.resume {
        Some(p) => {
            let prev = load_solution(p)?;
            if prev.grid != cfg.grid {
                return Err(CliError::GridMismatch);
            }
            if prev.meta.calibration_hash != cfg.params.fingerprint() {
                return Err(CliError::Config(format!("{} was solved under a different calibration", p.display())));
            }
            manifest.input(p);
            Start::from_solution(&prev)
        }
        None => Start::default(),
    };

    let checkpoint = checkpoint_path_for(&a.out);
    let mut progress = Progress {
        quiet: a.quiet,
        checkpoint_every: cfg.checkpoint_every,
        checkpoint: checkpoint.clone(),
        clock: std::time::Instant::now(),
        checkpoint_error: None,
    };
    let [nk, ns, ng] = cfg.grid.shape();
    if !a.quiet {
        println!("grid={nk}x{ns}x{ng} nodes={} calibration_hash={:#018x} config_hash={:#018x}", cfg.grid.len(), cfg.params.fingerprint(), cfg.fingerprint());
    }
    let result = solve_with(&cfg, start, &mut progress);
    let wall = progress.clock.elapsed().as_secs_f64();
    let mut sol = match result {
        Ok(sol) => sol,
        Err(Error::MaxItersExceeded(best)) => {
            let mut best = *best;
            best.meta.wall_time_secs = wall;
            save_solution(&best, &checkpoint)?;
            manifest.output(&checkpoint);
            manifest.finish(&manifest_path_for(&checkpoint))?;
            println!(
                "status=max_iters_exceeded iterations={} final_change={:.6e} best_so_far={}",
                best.meta.iterations,
                best.meta.final_change,
                checkpoint.display()
            );
            return Err(CliError::Solver(Error::MaxItersExceeded(Box::new(best))));
        }
        Err(e @ (Error::InvalidConfig(_) | Error::GridMismatch)) => return Err(CliError::Config(e.to_string())),
        Err(e) => return Err(CliError::Solver(e)),
    };
    sol.meta.wall_time_secs = wall;
    save_solution(&sol, &a.out)?;
    manifest.output(&a.out);
    if checkpoint.exists() {
        // A finished solve supersedes its checkpoints.
        let _ = std::fs::remove_file(&checkpoint);
    }
    let residual = interior_residual_sup(&cfg.params, &sol, &cfg.implicit).map_err(CliError::Solver)?;
    manifest.finish(&manifest_path_for(&a.out))?;
    println!(
        "status=converged iterations={} final_change={:.6e} hjb_residual_sup={:.6e} wall_time_secs={:.2} out={}",
        sol.meta.iterations,
        sol.meta.final_change,
        residual,
        wall,
        a.out.display()
    );
    Ok(())
}

fn print_report(r: &EvaluationReport) {
    println!("l_v={:.12e}", r.l_v);
    println!("l_il={:.12e}", r.l_il);
    println!("l_ih={:.12e}", r.l_ih);
    println!("l_final={:.12e}", r.l_final);
    println!("cardinality={}", r.cardinality);
    println!("epsilon_floor={:e}", r.epsilon_floor);
    println!("resampled={}", r.resampled);
    println!();
    println!("{:<6} {:>14} {:>8} {:>10} {:>10} {:>10}", "field", "max_abs_error", "node", "k", "s_l", "gamma");
    for (name, m) in [("v", r.max_v), ("i_l", r.max_il), ("i_h", r.max_ih)] {
        println!(
            "{:<6} {:>14.6e} {:>8} {:>10.5} {:>10.5} {:>10.5}",
            name, m.abs_error, m.node, m.state.0, m.state.1, m.state.2
        );
    }
}

fn cmd_evaluate(a: EvaluateArgs, threads: usize) -> Result<(), CliError> {
    let reference = load_solution(&a.reference)?;
    let candidate = load_solution(&a.candidate)?;
    let report = if a.resample {
        evaluate_resampled(&reference, &candidate, a.epsilon_floor)
    } else {
        evaluate(&reference, &candidate, a.epsilon_floor)
    };
    let report = match report {
        Ok(r) => r,
        Err(Error::GridMismatch) => return Err(CliError::GridMismatch),
        Err(e) => return Err(CliError::Config(e.to_string())),
    };
    print_report(&report);
    if let Some(out) = &a.out {
        let snapshot = json!({ "resample": a.resample, "epsilon_floor": a.epsilon_floor });
        let mut manifest = ManifestBuilder::start("evaluate", snapshot, &[], threads);
        manifest.input(&a.reference);
        manifest.input(&a.candidate);
        write_atomic(out, &serde_json::to_vec_pretty(&report).expect("report serialises"))?;
        manifest.output(out);
        manifest.finish(&manifest_path_for(out))?;
    }
    Ok(())
}

fn cmd_emulate(a: EmulateArgs, threads: usize) -> Result<(), CliError> {
    let baseline = load_solution(&a.solution)?;
    let (mut file, base_dir) = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(CliError::io("cannot read emulation config", p))?;
            let file: EmulationFile = config::parse_with_overrides(&text, &a.overrides)?;
            let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (file, dir)
        }
        None => {
            let text = toml::to_string(&EmulationFile::default()).expect("default emulation file serialises");
            (config::parse_with_overrides(&text, &a.overrides)?, PathBuf::from("."))
        }
    };
    if let Some(seed) = a.seed {
        file.emulation.seed = seed;
    }
    if let Some(n) = a.paths {
        file.emulation.n_paths = n;
    }
    if a.no_noise {
        file.emulation.noise = false;
    }
    file.emulation.validate().map_err(|e| CliError::Config(e.to_string()))?;

    let resolved = ResolvedScenarios::load(&file.scenarios, &baseline, &base_dir)?;
    let scenarios = resolved.scenarios(&baseline, a.frozen_policy)?;

    let snapshot = json!({ "emulation": file, "frozen_policy": a.frozen_policy });
    let mut manifest = ManifestBuilder::start("emulate", snapshot, &a.overrides, threads);
    manifest.input(&a.solution);
    if let Some(p) = &a.config {
        manifest.input(p);
    }
    for p in &resolved.inputs {
        manifest.input(p);
    }

    let results = emulate::run_parallel(&file.emulation, &scenarios, threads)?;
    std::fs::create_dir_all(&a.out_dir).map_err(CliError::io("cannot create", &a.out_dir))?;
    for r in &results {
        let path = a.out_dir.join(format!("{}.csv", emulate::file_stem(&r.label)));
        write_atomic(&path, &emulate::scenario_csv(r)?)?;
        manifest.output(&path);
    }
    let summary = emulate::summary(&file.emulation, &scenarios, &results);
    let summary_path = a.out_dir.join("summary.json");
    write_atomic(&summary_path, &serde_json::to_vec_pretty(&summary).expect("summary serialises"))?;
    manifest.output(&summary_path);
    manifest.finish(&a.out_dir.join("manifest.json"))?;
    for s in &summary.scenarios {
        println!(
            "scenario={} year={} mean_sl={:.6} p2.5_sl={:.6} p97.5_sl={:.6} mean_k={:.6} mean_gamma={:.6} excursions={}",
            s.label, s.terminal.year, s.terminal.mean_sl, s.terminal.p2_5_sl, s.terminal.p97_5_sl,
            s.terminal.mean_k, s.terminal.mean_gamma, s.excursions
        );
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs, threads: usize) -> Result<(), CliError> {
    let sol = load_solution(&a.solution)?;
    let m = &sol.meta;
    println!("file={}", a.solution.display());
    println!("format_version={FORMAT_VERSION}");
    for (name, ax) in [("k", sol.grid.k), ("s_l", sol.grid.s_l), ("gamma", sol.grid.gamma)] {
        println!("axis_{name}=min:{} max:{} points:{}", ax.min, ax.max, ax.points);
    }
    println!("nodes={}", sol.grid.len());
    println!("converged={}", m.converged);
    println!("iterations={}", m.iterations);
    println!("final_change={:.6e}", m.final_change);
    println!("wall_time_secs={:.3}", m.wall_time_secs);
    println!("initial_guess={}", serde_json::to_value(m.initial_guess).expect("enum serialises").as_str().unwrap_or("?"));
    println!("calibration_hash={:#018x}", m.calibration_hash);
    println!("calibration_hash_matches_params={}", m.params.fingerprint() == m.calibration_hash);
    println!("config_hash={:#018x}", m.config_hash);
    for (name, value) in ModelParams::FIELD_NAMES.iter().zip(m.params.to_array()) {
        println!("calibration.{name}={value}");
    }
    for (name, f) in [("v", &sol.v), ("i_l", &sol.i_l), ("i_h", &sol.i_h)] {
        let (lo, hi) = f.min_max();
        println!("range_{name}={lo:.9e},{hi:.9e}");
    }
    match interior_residual_sup(&m.params, &sol, &ImplicitSchemeConfig::default()) {
        Ok(r) => println!("hjb_residual_sup={r:.6e}"),
        Err(e) => println!("hjb_residual_sup=undefined ({e})"),
    }
    if let Some(out) = &a.export_csv {
        let mut manifest = ManifestBuilder::start("inspect", json!({ "export_csv": out }), &[], threads);
        manifest.input(&a.solution);
        write_atomic(out, &format::export_csv(&sol)?)?;
        manifest.output(out);
        manifest.finish(&manifest_path_for(out))?;
        println!("exported={}", out.display());
    }
    Ok(())
}
