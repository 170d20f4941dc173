//! End-to-end runs of the `liqhjb` binary on small configurations.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use liqhjb::oracles::merton_value_power;
use liqhjb::surface::{linspace, write_surfaces, PolicySurface, ValueSurface};
use liqhjb::{GridAxes, ModelParams};

/// Few points, narrow networks and a loose stopping rule: seconds per run.
const TINY: &str = r#"
[sampler]
n_interior = 64
n_terminal = 32
refresh_every = 0

[solver]
max_outer = 2
pe_steps = 5
pi_steps = 5
hidden = 8
n_holdout = 16
lm_iterations = 2
pi_lm_iterations = 2
validation_n_w = 3
validation_n_l = 3
validation_n_t = 2
stop_tol = 1e300
"#;

const FRICTIONLESS: &str = "beta = 0.0\nkappa = 0.0\nsigma_L = 0.0\n";

fn liqhjb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_liqhjb"))
        .args(args)
        .env_remove("LIQHJB_OUT")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative paths of every file under `root`, sorted.
fn files(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    out.sort();
    out
}

fn manifest(root: &Path) -> toml::Table {
    fs::read_to_string(root.join("manifest.toml")).unwrap().parse().unwrap()
}

#[test]
fn missing_config_exits_1_naming_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.toml");
    let out = liqhjb(&["solve", "--config", s(&missing), "--out", s(tmp.path())]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("nope.toml"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_exits_1_naming_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "bad.toml", "beta = 0.3\nbogus_knob = 1\n");
    let out = liqhjb(&["solve", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("bogus_knob"), "{}", stderr(&out));
}

#[test]
fn bad_flags_exit_1_without_panicking() {
    let tmp = tempfile::tempdir().unwrap();
    for args in [
        vec!["solve", "--no-such-flag"],
        vec!["solve", "--seeds", "0"],
        vec!["solve", "--seeds", "2", "--seed-list", "1,2"],
        vec!["solve", "--utility", "quadratic"],
        vec!["solve", "--utility", "power", "--eta", "1.0"],
        vec![
            "sweep",
            "--sweep-param",
            "beta",
            "--sweep-values",
            "0.1",
            "--slice",
            "W=99",
        ],
        vec![
            "sweep",
            "--sweep-param",
            "beta",
            "--sweep-values",
            "0.1",
            "--axis",
            "theta_bar",
        ],
        vec!["mc-check", "--surface", "/nonexistent/surfaces.csv"],
        vec![],
    ] {
        let mut full = args.clone();
        if !args.is_empty() {
            full.extend(["--out", s(tmp.path())]);
        }
        let out = liqhjb(&full);
        assert_eq!(code(&out), 1, "{args:?}: {}", stderr(&out));
        assert!(!stderr(&out).contains("panicked"), "{args:?}");
    }
    assert_eq!(code(&liqhjb(&["--help"])), 0);
}

#[test]
fn solve_is_reproducible_and_lists_its_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let run = |dir: &str| {
        let out_dir = tmp.path().join(dir);
        let out = liqhjb(&["solve", "--config", s(&cfg), "--seeds", "2", "--out", s(&out_dir)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        out_dir
    };
    let a = run("a");
    let b = run("b");

    let listed = files(&a);
    assert_eq!(listed, files(&b));
    let m = manifest(&a);
    let mut declared: Vec<String> = m["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_str().unwrap().to_string())
        .collect();
    declared.sort();
    assert_eq!(declared, listed);
    assert_eq!(m["exit_code"].as_integer(), Some(0));
    assert_eq!(m["runs"].as_array().unwrap().len(), 2);

    for f in listed.iter().filter(|f| *f != "manifest.toml") {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f} differs between runs"
        );
        if f.ends_with(".csv") {
            let text = fs::read_to_string(a.join(f)).unwrap();
            assert!(text.starts_with("# schema: liqhjb-"), "{f} lacks a schema line");
        }
    }
    let band = fs::read_to_string(a.join("band.csv")).unwrap();
    let header = band.lines().nth(1).unwrap();
    for col in ["omega_mean", "omega_min", "omega_max"] {
        assert!(header.split(',').any(|c| c == col), "band header {header}");
    }
    assert!(listed.contains(&"seed-1/surfaces.csv".to_string()));
    assert!(listed.contains(&"seed-2/value.ckpt".to_string()));
}

#[test]
fn manifest_hash_ignores_key_order() {
    let tmp = tempfile::tempdir().unwrap();
    let reordered = {
        let mut blocks: Vec<&str> = TINY.split("\n\n").collect();
        blocks.reverse();
        format!("kappa = 0.004\nbeta = 0.3\n\n{}", blocks.join("\n\n"))
    };
    let plain = format!("beta = 0.3\nkappa = 0.004\n{TINY}");
    let hash = |name: &str, text: &str| {
        let cfg = write_config(tmp.path(), name, text);
        let out_dir = tmp.path().join(name.replace(".toml", ""));
        let out = liqhjb(&["solve", "--config", s(&cfg), "--out", s(&out_dir)]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        manifest(&out_dir)["config_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(hash("plain.toml", &plain), hash("reordered.toml", &reordered));
}

#[test]
fn budget_stop_exits_2() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "strict.toml",
        &TINY
            .replace("stop_tol = 1e300", "stop_tol = 1e-300")
            .replace("max_outer = 2", "max_outer = 1"),
    );
    let out = liqhjb(&["solve", "--config", s(&cfg), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(code(&out), 2, "{}", stderr(&out));
    assert_eq!(manifest(&tmp.path().join("o"))["exit_code"].as_integer(), Some(2));
}

#[test]
fn sweep_writes_one_curve_per_value() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "tiny.toml", TINY);
    let out_dir = tmp.path().join("sweep");
    let out = liqhjb(&[
        "sweep",
        "--config",
        s(&cfg),
        "--sweep-param",
        "beta",
        "--sweep-values",
        "0.1,0.5",
        "--axis",
        "t",
        "--axis-points",
        "5",
        "--out",
        s(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("sweep.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("# schema: liqhjb-sweep v1"));
    assert_eq!(
        lines.next(),
        Some("axis_value,sweep_value,omega_mean,omega_min,omega_max,merton_line")
    );
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').map(|c| c.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 10);
    for r in &rows {
        assert!(r[3] <= r[2] && r[2] <= r[4]);
        // Frictionless Merton fraction for the default market.
        assert!((r[5] - 0.375).abs() < 1e-12);
    }
}

#[test]
fn validate_reports_each_iteration_and_names_the_worst_offender() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "tiny.toml",
        &TINY.replace("stop_tol = 1e300", "stop_tol = 1e-300"),
    );
    let out_dir = tmp.path().join("v");
    let out = liqhjb(&["validate", "--config", s(&cfg), "--out", s(&out_dir)]);
    // Tiny networks cannot meet the thresholds.
    assert_eq!(code(&out), 3, "{}", stderr(&out));
    assert!(stderr(&out).contains("worst offender seed 1"), "{}", stderr(&out));
    assert!(stderr(&out).contains("at W="), "{}", stderr(&out));
    let csv = fs::read_to_string(out_dir.join("validate.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(2).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("1,1,") && rows[1].starts_with("1,2,"));
}

/// Exact Merton surfaces, optionally with the fraction scaled.
fn merton_surface(path: &Path, scale: f64) {
    let params = ModelParams::frictionless();
    let axes = GridAxes::new(linspace(0.5, 8.0, 61), linspace(0.01, 2.0, 5), linspace(0.0, 1.0, 11)).unwrap();
    let value = ValueSurface {
        values: axes
            .points()
            .iter()
            .map(|x| merton_value_power(&params, 0.5, x[0], x[2]).unwrap())
            .collect(),
        axes: axes.clone(),
        meta: Default::default(),
    };
    let policy = PolicySurface::constant(axes, (0.375 * scale).min(1.0));
    write_surfaces(path, &policy, &value).unwrap();
}

#[test]
fn mc_check_accepts_merton_and_rejects_a_corrupted_policy() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "frictionless.toml", FRICTIONLESS);
    let check = |scale: f64, dir: &str| {
        let surface = tmp.path().join(format!("{dir}.csv"));
        merton_surface(&surface, scale);
        let out_dir = tmp.path().join(dir);
        let out = liqhjb(&[
            "mc-check",
            "--config",
            s(&cfg),
            "--surface",
            s(&surface),
            "--paths",
            "100000",
            "--mc-seed",
            "11",
            "--out",
            s(&out_dir),
        ]);
        let report = fs::read_to_string(out_dir.join("mc_check.csv")).unwrap();
        let row: Vec<String> = report.lines().nth(2).unwrap().split(',').map(String::from).collect();
        (code(&out), row, stderr(&out))
    };

    let (c, row, err) = check(1.0, "exact");
    assert_eq!(c, 0, "{err}");
    assert_eq!(row[0], "100000");
    assert_eq!(row[1], "11");
    let z: f64 = row[8].parse().unwrap();
    assert!(z.abs() < 3.0, "z = {z}");

    let (c, row, err) = check(2.0, "doubled");
    assert_eq!(c, 3, "{err}");
    let z: f64 = row[8].parse().unwrap();
    assert!(z < -4.0, "z = {z}");
}
