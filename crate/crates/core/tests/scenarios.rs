use std::fs;
use std::path::{Path, PathBuf};

use c2e_core::simengine::{EVENTS_CSV, SUMMARY_CSV, TIMESERIES_CSV};
use c2e_core::{export_metrics, parse_scenario, render_scenario, simulate, Scenario};

fn scenario_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn all() -> Vec<(String, Scenario)> {
    let mut out: Vec<(String, Scenario)> = fs::read_dir(scenario_dir())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "toml"))
        .map(|p| {
            let text = fs::read_to_string(&p).unwrap();
            let s = parse_scenario(&text).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
            (p.file_stem().unwrap().to_string_lossy().into_owned(), s)
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn every_shipped_scenario_parses() {
    let names: Vec<String> = all().into_iter().map(|(n, _)| n).collect();
    assert_eq!(
        names,
        [
            "chain_placement",
            "device_speedup",
            "fault_16",
            "fault_8",
            "ramp"
        ]
    );
}

#[test]
fn rendering_round_trips() {
    for (name, s) in all() {
        let again = parse_scenario(&render_scenario(&s)).unwrap();
        assert_eq!(again, s, "{name}");
    }
}

#[test]
fn shipped_scenarios_run_to_the_horizon_and_balance() {
    for (name, s) in all() {
        let r = simulate(&s).unwrap();
        assert!(!r.summary.aborted, "{name}: {}", r.summary.abort_reason);
        assert!(
            r.conservation_violations().is_empty(),
            "{name}: {:?}",
            r.conservation_violations()
        );
        let last = r.rows.last().unwrap().time as f64;
        assert!(
            last <= s.horizon && last >= s.horizon - 1.0,
            "{name}: last row at {last}"
        );
        assert!(r.summary.injected > 0, "{name}");
    }
}

#[test]
fn export_writes_three_files_and_repeats_byte_for_byte() {
    let s =
        parse_scenario(&fs::read_to_string(scenario_dir().join("fault_8.toml")).unwrap()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        let dir = tmp.path().join(run);
        let written = export_metrics(&simulate(&s).unwrap(), &dir).unwrap();
        let mut names: Vec<String> = written
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        names.sort();
        let mut expected = vec![EVENTS_CSV, SUMMARY_CSV, TIMESERIES_CSV];
        expected.sort();
        assert_eq!(names, expected);
        trees.push(
            written
                .iter()
                .map(|p| fs::read(p).unwrap())
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(trees[0], trees[1]);
}

#[test]
fn timeseries_has_one_row_per_second_with_a_stable_header() {
    let s =
        parse_scenario(&fs::read_to_string(scenario_dir().join("chain_placement.toml")).unwrap())
            .unwrap();
    let tmp = tempfile::tempdir().unwrap();
    export_metrics(&simulate(&s).unwrap(), tmp.path()).unwrap();
    let mut rdr = csv::Reader::from_path(tmp.path().join(TIMESERIES_CSV)).unwrap();
    let header = rdr.headers().unwrap().clone();
    assert_eq!(&header[0], "time");
    let rows = rdr.records().count();
    assert_eq!(rows as f64, s.horizon);
}
