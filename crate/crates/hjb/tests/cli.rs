use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;

fn hjb(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hjb"))
        .args(args)
        .current_dir(dir)
        .env_remove("HJB_CONFIG_DIR")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Solutions on 6^3 and 8^3 grids shared by the tests in this file.
fn solved() -> &'static (TempDir, PathBuf, PathBuf) {
    static S: OnceLock<(TempDir, PathBuf, PathBuf)> = OnceLock::new();
    S.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        for n in [6, 8] {
            let o = hjb(dir.path(), &["solve", "--quiet", "--out", &format!("s{n}.hjb"), "--set", &format!("grid.points={n}")]);
            assert_eq!(code(&o), 0, "{}", stderr(&o));
        }
        let (a, b) = (dir.path().join("s6.hjb"), dir.path().join("s8.hjb"));
        (dir, a, b)
    })
}

fn kv(text: &str, key: &str) -> Option<String> {
    text.lines().find_map(|l| l.strip_prefix(&format!("{key}=")).map(str::to_string))
}

#[test]
fn solve_writes_solution_and_manifest() {
    let (dir, s6, _) = solved();
    assert!(s6.is_file());
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("s6.hjb.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["subcommand"], "solve");
    assert_eq!(manifest["overrides"][0], "grid.points=6");
    assert_eq!(manifest["config"]["run"]["grid"]["points"], 6);
    assert!(!dir.path().join("s6.hjb.ckpt").exists());
}

#[test]
fn progress_lines_every_ten_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let o = hjb(dir.path(), &["solve", "--out", "p.hjb", "--set", "grid.points=5", "--set", "solver.max_outer_iters=35"]);
    assert_eq!(code(&o), 2);
    let iters: Vec<usize> = stdout(&o)
        .lines()
        .filter_map(|l| l.strip_prefix("iter=")?.split_whitespace().next()?.parse().ok())
        .collect();
    assert_eq!(iters, vec![1, 10, 20, 30]);
    assert!(stdout(&o).lines().any(|l| l.starts_with("iter=10 change=") && l.contains("linear_residual=")));
}

#[test]
fn missing_calibration_key_exits_1_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let text: String = hjb::config::DEFAULT_CONFIG.lines().filter(|l| !l.starts_with("eta1")).map(|l| format!("{l}\n")).collect();
    std::fs::write(dir.path().join("broken.toml"), text).unwrap();
    let o = hjb(dir.path(), &["solve", "--config", "broken.toml", "--out", "x.hjb"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("eta1"), "{}", stderr(&o));
    assert!(!dir.path().join("x.hjb").exists());
}

#[test]
fn bad_override_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    for bad in ["calibration.rho=-1", "grid.bogus=3", "noequals"] {
        let o = hjb(dir.path(), &["solve", "--out", "x.hjb", "--set", bad]);
        assert_eq!(code(&o), 1, "{bad}: {}", stderr(&o));
    }
}

#[test]
fn iteration_cap_exits_2_and_keeps_best_iterate() {
    let dir = tempfile::tempdir().unwrap();
    let o = hjb(dir.path(), &["solve", "--quiet", "--out", "x.hjb", "--set", "grid.points=5", "--set", "solver.max_outer_iters=1"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    assert!(stdout(&o).contains("status=max_iters_exceeded"));
    assert!(!dir.path().join("x.hjb").exists());
    let ckpt = dir.path().join("x.hjb.ckpt");
    let best = hjb::format::load_solution(&ckpt).unwrap();
    assert!(!best.meta.converged);
    assert_eq!(best.meta.iterations, 1);
}

#[test]
fn resume_from_checkpoint_finishes() {
    let dir = tempfile::tempdir().unwrap();
    let o = hjb(dir.path(), &["solve", "--quiet", "--out", "r.hjb", "--set", "grid.points=5", "--set", "solver.max_outer_iters=300"]);
    assert_eq!(code(&o), 2);
    let o = hjb(dir.path(), &["solve", "--quiet", "--out", "r.hjb", "--set", "grid.points=5", "--resume", "r.hjb.ckpt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let resumed = hjb::format::load_solution(&dir.path().join("r.hjb")).unwrap();
    assert!(resumed.meta.converged);
    assert!(resumed.meta.iterations < 699, "{}", resumed.meta.iterations);
    // Wrong grid for the checkpoint.
    let o = hjb(dir.path(), &["solve", "--quiet", "--out", "q.hjb", "--set", "grid.points=6", "--resume", "r.hjb"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn config_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_dir = dir.path().join("configs");
    std::fs::create_dir(&cfg_dir).unwrap();
    let text = hjb::config::DEFAULT_CONFIG.replace("points = 60", "points = 4").replace("max_outer_iters = 5000", "max_outer_iters = 2");
    std::fs::write(cfg_dir.join("tiny.toml"), text).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_hjb"))
        .args(["solve", "--quiet", "--config", "tiny", "--out", "t.hjb"])
        .current_dir(dir.path())
        .env("HJB_CONFIG_DIR", &cfg_dir)
        .output()
        .unwrap();
    // Two iterations are not enough; the point is that the named config was found.
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let best = hjb::format::load_solution(&dir.path().join("t.hjb.ckpt")).unwrap();
    assert_eq!(best.grid.shape(), [4, 4, 4]);
}

#[test]
fn evaluate_against_itself_hits_floor() {
    let (dir, s6, _) = solved();
    let o = hjb(dir.path(), &["evaluate", s6.to_str().unwrap(), s6.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let out = stdout(&o);
    assert_eq!(kv(&out, "l_v").unwrap().parse::<f64>().unwrap(), 0.0);
    assert_eq!(kv(&out, "l_final").unwrap().parse::<f64>().unwrap(), 1e-12);
    assert_eq!(kv(&out, "cardinality").unwrap(), "216");
}

#[test]
fn evaluate_grid_mismatch_needs_resample() {
    let (dir, s6, s8) = solved();
    let o = hjb(dir.path(), &["evaluate", s8.to_str().unwrap(), s6.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let report = dir.path().join("report.json");
    let o = hjb(dir.path(), &["evaluate", s8.to_str().unwrap(), s6.to_str().unwrap(), "--resample", "--out", report.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(kv(&stdout(&o), "resampled").unwrap(), "true");
    let json: serde_json::Value = serde_json::from_slice(&std::fs::read(&report).unwrap()).unwrap();
    assert!(json["l_final"].as_f64().unwrap() > 0.0);
    assert!(dir.path().join("report.json.manifest.json").is_file());
}

#[test]
fn inspect_prints_residual_and_exports_csv() {
    let (dir, s6, _) = solved();
    let csv = dir.path().join("s6_nodes.csv");
    let o = hjb(dir.path(), &["inspect", s6.to_str().unwrap(), "--export-csv", csv.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let residual: f64 = kv(&stdout(&o), "hjb_residual_sup").unwrap().parse().unwrap();
    assert!(residual < 1e-6);
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().next(), Some("k,s_l,gamma,v,i_l,i_h"));
    assert_eq!(text.lines().count(), 217);
}

#[test]
fn inspect_corrupt_file_exits_5() {
    let (dir, s6, _) = solved();
    let mut bytes = std::fs::read(s6).unwrap();
    bytes.truncate(bytes.len() / 2);
    let bad = dir.path().join("truncated.hjb");
    std::fs::write(&bad, &bytes).unwrap();
    let o = hjb(dir.path(), &["inspect", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 5);
    std::fs::write(&bad, b"not a solution").unwrap();
    assert_eq!(code(&hjb(dir.path(), &["inspect", bad.to_str().unwrap()])), 5);
    assert_eq!(code(&hjb(dir.path(), &["evaluate", bad.to_str().unwrap(), s6.to_str().unwrap()])), 5);
}

#[test]
fn emulate_is_reproducible_for_a_seed() {
    let (dir, s6, _) = solved();
    let run = |out: &str, threads: &str| {
        let o = hjb(dir.path(), &["emulate", s6.to_str().unwrap(), "--frozen-policy", "--seed", "7", "--paths", "40", "--out-dir", out, "--threads", threads]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    run("em_a", "1");
    run("em_b", "3");
    for label in ["kappa_l_x0.5", "kappa_l_x1", "kappa_l_x2"] {
        let a = std::fs::read(dir.path().join("em_a").join(format!("{label}.csv"))).unwrap();
        let b = std::fs::read(dir.path().join("em_b").join(format!("{label}.csv"))).unwrap();
        assert_eq!(a, b, "{label}");
        assert_eq!(String::from_utf8_lossy(&a).lines().next(), Some("year,mean_sl,p2.5_sl,p97.5_sl,mean_k,mean_gamma,mean_n"));
    }
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("em_a/summary.json")).unwrap()).unwrap();
    assert_eq!(summary["scenarios"].as_array().unwrap().len(), 3);
    assert!(dir.path().join("em_a/manifest.json").is_file());
}

#[test]
fn emulate_refuses_foreign_policy_without_flag() {
    let (dir, s6, _) = solved();
    let o = hjb(dir.path(), &["emulate", s6.to_str().unwrap(), "--paths", "2", "--out-dir", "em_refused"]);
    assert_eq!(code(&o), 4);
    assert!(!dir.path().join("em_refused").exists());
}

#[test]
fn emulate_with_scenario_file() {
    let (dir, s6, _) = solved();
    // A scenario with its own solution must match that solution's calibration.
    std::fs::write(
        dir.path().join("em.toml"),
        "[emulation]\nn_paths = 3\nt_end = 2025.0\n\n[[scenario]]\nlabel = \"base\"\n\n[[scenario]]\nlabel = \"mismatch\"\nsolution = \"s6.hjb\"\nset = { kappa_h = 9.0 }\n",
    )
    .unwrap();
    let o = hjb(dir.path(), &["emulate", s6.to_str().unwrap(), "--config", "em.toml", "--out-dir", "em_file"]);
    assert_eq!(code(&o), 4);
    let o = hjb(dir.path(), &["emulate", s6.to_str().unwrap(), "--config", "em.toml", "--out-dir", "em_file", "--frozen-policy"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("em_file/base.csv")).unwrap();
    assert_eq!(text.lines().count(), 1 + 51);
    // Unknown calibration key in a scenario.
    std::fs::write(dir.path().join("bad.toml"), "[[scenario]]\nlabel = \"x\"\nscale = { kapa = 2.0 }\n").unwrap();
    let o = hjb(dir.path(), &["emulate", s6.to_str().unwrap(), "--config", "bad.toml", "--out-dir", "em_bad"]);
    assert_eq!(code(&o), 1);
    // Overrides that break the model invariants.
    std::fs::write(dir.path().join("neg.toml"), "[[scenario]]\nlabel = \"x\"\nset = { kappa_l = -1.0 }\n").unwrap();
    let o = hjb(dir.path(), &["emulate", s6.to_str().unwrap(), "--config", "neg.toml", "--out-dir", "em_neg", "--frozen-policy"]);
    assert_eq!(code(&o), 4);
}

#[test]
fn single_noiseless_path_is_deterministic() {
    let (dir, s6, _) = solved();
    let o = hjb(dir.path(), &["emulate", s6.to_str().unwrap(), "--frozen-policy", "--paths", "1", "--no-noise", "--out-dir", "em_one"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("em_one/kappa_l_x1.csv")).unwrap();
    for line in text.lines().skip(1) {
        let v: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(v[1], v[2]);
        assert_eq!(v[1], v[3]);
    }
    assert_eq!(text.lines().count(), 302);
}
