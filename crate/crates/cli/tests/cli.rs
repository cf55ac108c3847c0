use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn path(rel: &str) -> String {
    root().join(rel).to_string_lossy().into_owned()
}

fn c2e(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c2e"))
        .args(args)
        .output()
        .unwrap()
}

fn c2e_stdin(args: &[&str], input: &[u8]) -> Output {
    let mut child = Command::new(env!("CARGO_BIN_EXE_c2e"))
        .args(args)
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    child.stdin.take().unwrap().write_all(input).unwrap();
    child.wait_with_output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (
                e.file_name().to_string_lossy().into_owned(),
                fs::read(e.path()).unwrap(),
            )
        })
        .collect()
}

#[test]
fn validate_exit_codes() {
    let ok = c2e(&["validate", &path("scenarios/chain_placement.toml")]);
    assert_eq!(code(&ok), 0, "{}", stderr(&ok));
    assert!(stdout(&ok).starts_with("ok: 4 operators, 3 nodes"));

    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.toml");
    let text = fs::read_to_string(path("scenarios/chain_placement.toml")).unwrap();
    fs::write(
        &bad,
        format!("{text}\n[policy]\ntheta_up = 0.8\ntheta_down = 0.9\n"),
    )
    .unwrap();
    let o = c2e(&["validate", bad.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(
        stdout(&o).contains("theta_down < theta_up"),
        "{}",
        stdout(&o)
    );

    let missing = c2e(&["validate", "/nonexistent/scenario.toml"]);
    assert_eq!(code(&missing), 2);

    let garbage = c2e_stdin(&["validate", "-"], b"seed = [");
    assert_eq!(code(&garbage), 2);
}

#[test]
fn override_errors_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = c2e(&[
        "run",
        &path("scenarios/chain_placement.toml"),
        "-o",
        out.to_str().unwrap(),
        "--override",
        "cluster.nodes.9.slots=2",
    ]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = c2e(&[
        "run",
        &path("scenarios/chain_placement.toml"),
        "--override",
        "nonsense",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn run_writes_identical_csvs_for_the_same_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let out = tmp.path().join(run);
        let o = c2e(&[
            "run",
            &path("scenarios/chain_placement.toml"),
            "-o",
            out.to_str().unwrap(),
            "--override",
            "seed=7",
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("completion_time="));
        trees.push(tree(&out));
    }
    let names: Vec<&String> = trees[0].keys().collect();
    assert_eq!(names, ["events.csv", "summary.csv", "timeseries.csv"]);
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn infeasible_run_exits_one_and_keeps_partial_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = c2e(&[
        "run",
        &path("scenarios/chain_placement.toml"),
        "-o",
        out.to_str().unwrap(),
        "--override",
        "app.operators.0.parallelism_min=3",
        "--override",
        "app.operators.0.parallelism_max=3",
        "--override",
        "cluster.nodes.1.slots=1",
        "--override",
        "cluster.nodes.2.slots=1",
    ]);
    assert_eq!(code(&o), 1, "{}", stderr(&o));
    assert!(stderr(&o).contains("infeasible"));
    assert!(out.join("summary.csv").exists());
    assert!(out.join("events.csv").exists());
}

#[test]
fn sweep_writes_one_row_per_seed_and_set() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let o = c2e(&[
        "sweep",
        &path("scenarios/chain_placement.toml"),
        "-o",
        out.to_str().unwrap(),
        "--seeds",
        "1,2,3",
        "--override-set",
        "horizon=30",
        "--override-set",
        "horizon=40;policy.cooldown=5",
        "--jobs",
        "2",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let mut rdr = csv::Reader::from_path(out.join("aggregate.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| &r[3] == "ok"));
    assert_eq!(&rows[3][2], "horizon=40;policy.cooldown=5");
    for i in 0..6 {
        assert!(out.join(format!("run-{i:03}")).join("summary.csv").exists());
    }
}

#[test]
fn sweep_records_failed_runs_per_row() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sweep");
    let o = c2e(&[
        "sweep",
        &path("scenarios/chain_placement.toml"),
        "-o",
        out.to_str().unwrap(),
        "--seeds",
        "1",
        "--override-set",
        "horizon=20",
        "--override-set",
        "policy.theta_down=0.99",
    ]);
    assert_eq!(code(&o), 1);
    let mut rdr = csv::Reader::from_path(out.join("aggregate.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rdr.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(&rows[0][3], "ok");
    assert_eq!(&rows[1][3], "error");
    assert!(rows[1][11].contains("theta_down"), "{:?}", rows[1]);
}

#[test]
fn sweep_needs_seeds() {
    let o = c2e(&[
        "sweep",
        &path("scenarios/chain_placement.toml"),
        "-o",
        "/tmp/x",
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_suggestions() {
    let o = c2e(&["config", &path("descriptors/camera_boxes.toml")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let first = stdout(&o).lines().next().unwrap().to_string();
    assert!(
        first.contains("Darknet") && first.contains("YoloV5"),
        "{first}"
    );

    let o = c2e(&["config", &path("descriptors/gps_links.toml")]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("LSTMSequence"));

    let o = c2e(&["config", &path("descriptors/lane_masks.toml")]);
    assert_eq!(code(&o), 1);

    let o = c2e_stdin(&["config", "-"], b"n_samples = \"many\"");
    assert_eq!(code(&o), 2);
}

#[test]
fn generated_scenario_pipes_into_run() {
    let o = c2e(&[
        "config",
        &path("descriptors/camera_boxes.toml"),
        "--emit-app",
        "--into",
        &path("scenarios/chain_placement.toml"),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let r = c2e_stdin(&["run", "-", "-o", out.to_str().unwrap()], &o.stdout);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert!(out.join("timeseries.csv").exists());
}
