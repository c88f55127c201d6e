//! End-to-end tests of the `fairsurvey` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const CONFIG: &str = r#"
seed = 3
trials = 60
methods = ["standard", "heuristic", "phase1", "two_phase"]
epsilons = ["inf", 0.5]

[design]
gamma_fraction = 0.25

[proxy]
points = 6
max_rate = 0.1
trials = 40

[synthetic]
regions = 12
mixing = 0.2
seed = 5

[[synthetic.groups]]
label = "a"
size = 6000
mean = 60000.0
sd = 42000.0

[[synthetic.groups]]
label = "b"
size = 3000
mean = 45000.0
sd = 36000.0

[[synthetic.groups]]
label = "c"
size = 1000
mean = 35000.0
sd = 28000.0
"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        fs::write(dir.path().join("config.toml"), CONFIG).unwrap();
        Workspace { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Runs the binary with the workspace config and `out` as output dir.
    fn run(&self, out: &str, args: &[&str]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_fairsurvey"));
        cmd.arg("--config").arg(self.path("config.toml")).arg("--output-dir").arg(self.path(out));
        cmd.args(args).output().unwrap()
    }

    fn read(&self, rel: &str) -> String {
        fs::read_to_string(self.path(rel)).unwrap_or_else(|e| panic!("reading {rel}: {e}"))
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by a signal")
}

fn assert_ok(out: &Output) {
    assert_eq!(code(out), 0, "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_and_version_exit_zero() {
    for flag in ["--help", "--version"] {
        let out = Command::new(env!("CARGO_BIN_EXE_fairsurvey")).arg(flag).output().unwrap();
        assert_eq!(code(&out), 0, "{flag}");
        assert!(!out.stdout.is_empty());
    }
    let out = Command::new(env!("CARGO_BIN_EXE_fairsurvey")).args(["run", "--help"]).output().unwrap();
    assert_eq!(code(&out), 0);
}

#[test]
fn usage_and_input_errors_exit_one() {
    let ws = Workspace::new();
    let bin = env!("CARGO_BIN_EXE_fairsurvey");
    let cases: Vec<Vec<String>> = vec![
        vec!["--no-such-flag".into(), "run".into()],
        vec!["frobnicate".into()],
        vec!["--config".into(), ws.path("missing.toml").display().to_string(), "run".into()],
        // No population source.
        vec!["run".into()],
        vec!["--config".into(), ws.path("config.toml").display().to_string(), "--alpha".into(), "1.5".into(), "run".into()],
        vec!["--config".into(), ws.path("config.toml").display().to_string(), "--epsilon=-1".into(), "run".into()],
    ];
    for args in cases {
        let out = Command::new(bin).current_dir(ws.dir.path()).args(&args).output().unwrap();
        assert_eq!(code(&out), 1, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        assert!(!out.stderr.is_empty());
    }

    // `privatize` needs exactly one ε; the config has two.
    assert_ok(&ws.run("gen", &["generate"]));
    let prior = ws.path("gen/prior.csv").display().to_string();
    let out = ws.run("p", &["privatize", "--input", &prior]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("exactly one"));

    // Malformed microdata.
    fs::write(ws.path("bad.csv"), "region_id,group_id,value,weight\nr0,a,abc,1\n").unwrap();
    let out = ws.run("p", &["--epsilon", "1", "privatize", "--input", ws.path("bad.csv").to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"));
}

#[test]
fn generate_is_deterministic() {
    let ws = Workspace::new();
    assert_ok(&ws.run("one", &["generate"]));
    assert_ok(&ws.run("two", &["generate"]));
    for f in ["prior.csv", "truth.csv"] {
        assert_eq!(ws.read(&format!("one/{f}")), ws.read(&format!("two/{f}")), "{f}");
    }
    assert_ne!(ws.read("one/prior.csv"), ws.read("one/truth.csv"));
    let out = ws.run("three", &["--seed", "1", "generate"]);
    assert_ok(&out);
    // The population seed lives in the synthetic spec, not the run seed.
    assert_eq!(ws.read("one/prior.csv"), ws.read("three/prior.csv"));
}

#[test]
fn run_is_deterministic_and_thread_count_independent() {
    let ws = Workspace::new();
    assert_ok(&ws.run("one", &["run"]));
    assert_ok(&ws.run("two", &["--sequential", "run"]));
    for f in [
        "plot.csv",
        "failures.csv",
        "designs/eps-0.5/counts.csv",
        "designs/eps-0.5/curves.csv",
        "cells/eps-0.5/two_phase/allocation.json",
        "cells/eps-0.5/two_phase/trials.csv",
        "cells/eps-inf/standard/report.json",
    ] {
        assert_eq!(ws.read(&format!("one/{f}")), ws.read(&format!("two/{f}")), "{f}");
    }
    assert_eq!(ws.read("one/failures.csv").trim(), "epsilon,method,error");

    // A different seed changes the noise and the trials.
    assert_ok(&ws.run("three", &["--seed", "4", "run"]));
    assert_ne!(ws.read("one/designs/eps-0.5/counts.csv"), ws.read("three/designs/eps-0.5/counts.csv"));
    assert_ne!(ws.read("one/plot.csv"), ws.read("three/plot.csv"));
}

#[test]
fn failing_cells_exit_two_and_keep_the_rest() {
    let ws = Workspace::new();
    // Brute force refuses more than 20 regions; the other cells succeed.
    let out = ws.run("out", &["--method", "phase1,brute_force,two_phase", "--region-size", "300", "run"]);
    assert_eq!(code(&out), 2, "stderr: {}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));

    let failures = ws.read("out/failures.csv");
    let lines: Vec<&str> = failures.lines().collect();
    assert_eq!(lines.len(), 3, "{failures}");
    assert!(lines[1].starts_with("inf,brute_force,"));
    assert!(lines[2].starts_with("0.5,brute_force,"));
    for eps in ["inf", "0.5"] {
        for m in ["phase1", "two_phase"] {
            assert!(ws.path(&format!("out/cells/eps-{eps}/{m}/report.json")).is_file());
        }
        assert!(!ws.path(&format!("out/cells/eps-{eps}/brute_force")).exists());
    }
    let plot = ws.read("out/plot.csv");
    assert!(plot.contains(",two_phase,") && !plot.contains("brute_force"));

    // A clean rerun into the same directory clears the failure list.
    assert_ok(&ws.run("out", &["--method", "phase1,two_phase", "--region-size", "300", "run"]));
    assert_eq!(ws.read("out/failures.csv").trim(), "epsilon,method,error");
}

#[test]
fn ablation_reports_bad_grid_points() {
    let ws = Workspace::new();
    let out = ws.run("out", &["ablate", "--param", "c2", "--grid", "100,500,-1"]);
    assert_eq!(code(&out), 2);
    let csv = ws.read("out/ablation_c2.csv");
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.splitn(6, ',').collect()).collect();
    assert_eq!(rows.len(), 3);
    for row in &rows[..2] {
        assert!(row[2].parse::<f64>().unwrap() > 0.0);
        assert!(row[5].is_empty());
    }
    assert!(rows[2][2].is_empty() && !rows[2][5].is_empty());
    // Dearer regions never make the optimum cheaper.
    assert!(rows[0][2].parse::<f64>().unwrap() <= rows[1][2].parse::<f64>().unwrap());
}

#[test]
fn sparsity_writes_one_row_per_size_cell_and_group() {
    let ws = Workspace::new();
    let out = ws.run("out", &["--method", "phase1", "sparsity", "--sizes", "500,2000"]);
    assert_ok(&out);
    let csv = ws.read("out/sparsity.csv");
    // 2 sizes × 2 ε × 1 method × 3 groups.
    assert_eq!(csv.lines().count(), 1 + 12);
}

/// privatize → fit-proxy → optimize → simulate reproduces the `run` cell.
#[test]
fn pipeline_steps_reproduce_run() {
    let ws = Workspace::new();
    assert_ok(&ws.run("run", &["run"]));
    assert_ok(&ws.run("gen", &["generate"]));
    let prior = ws.path("gen/prior.csv").display().to_string();
    let truth = ws.path("gen/truth.csv").display().to_string();
    let counts = ws.path("p/counts.csv").display().to_string();
    let curves = ws.path("p/curves.csv").display().to_string();
    assert_ok(&ws.run("p", &["--epsilon", "0.5", "privatize", "--input", &prior]));
    assert_ok(&ws.run("p", &["fit-proxy", "--prior", &prior]));
    assert_ok(&ws.run("p", &["optimize", "--counts", &counts, "--curves", &curves, "--prior", &prior]));
    let alloc = ws.path("p/two_phase/allocation.json").display().to_string();
    assert_ok(&ws.run("p/sim", &["simulate", "--truth", &truth, "--allocation", &alloc, "--prior", &prior]));

    assert_eq!(ws.read("p/counts.csv"), ws.read("run/designs/eps-0.5/counts.csv"));
    assert_eq!(ws.read("p/curves.csv"), ws.read("run/designs/eps-0.5/curves.csv"));
    for m in ["standard", "heuristic", "phase1", "two_phase"] {
        for f in ["allocation.json", "groups.csv", "regions.csv"] {
            assert_eq!(ws.read(&format!("p/{m}/{f}")), ws.read(&format!("run/cells/eps-0.5/{m}/{f}")), "{m}/{f}");
        }
    }
    assert_eq!(ws.read("p/sim/trials.csv"), ws.read("run/cells/eps-0.5/two_phase/trials.csv"));
    assert_eq!(ws.read("p/sim/aggregate.json"), ws.read("run/cells/eps-0.5/two_phase/aggregate.json"));
}

/// Shuffling the rows of a microdata file changes nothing downstream.
#[test]
fn row_order_of_microdata_does_not_matter() {
    let ws = Workspace::new();
    assert_ok(&ws.run("gen", &["generate"]));
    let text = ws.read("gen/prior.csv");
    let mut lines: Vec<&str> = text.lines().collect();
    lines[1..].reverse();
    fs::write(ws.path("reversed.csv"), lines.join("\n") + "\n").unwrap();
    for (dir, input) in [("x", "gen/prior.csv"), ("y", "reversed.csv")] {
        let input = ws.path(input).display().to_string();
        assert_ok(&ws.run(dir, &["--epsilon", "0.5", "privatize", "--input", &input]));
    }
    assert_eq!(ws.read("x/counts.csv"), ws.read("y/counts.csv"));
}

#[test]
fn plot_table_matches_golden_file() {
    let ws = Workspace::new();
    assert_ok(&ws.run("out", &["run"]));
    let actual = ws.read("out/plot.csv");
    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/plot.csv");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        fs::write(&golden_path, &actual).unwrap();
    }
    let golden = fs::read_to_string(&golden_path).unwrap();
    let parse = |text: &str| -> Vec<(String, f64)> {
        text.lines()
            .skip(1)
            .map(|l| {
                let (key, value) = l.rsplit_once(',').unwrap();
                (key.to_string(), value.parse().unwrap())
            })
            .collect()
    };
    let (actual, golden) = (parse(&actual), parse(&golden));
    assert_eq!(actual.len(), golden.len());
    for ((ka, va), (kg, vg)) in actual.iter().zip(&golden) {
        assert_eq!(ka, kg);
        assert!((va - vg).abs() <= 1e-9 * vg.abs().max(1.0), "{ka}: {va} vs golden {vg}");
    }
}
