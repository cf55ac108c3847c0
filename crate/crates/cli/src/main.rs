//! `c2e`: validate, run, sweep and configure training scenarios.
//!
//! Exit status: 0 on success, 1 when the scenario or descriptor is
//! well-formed but fails on its own terms (invalid, infeasible, unsupported),
//! 2 on usage, I/O or syntax errors.

use std::fs;
use std::io::{self, Read};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use c2e_core::app_model::parse_scenario_with_overrides;
use c2e_core::dnn_config;
use c2e_core::simengine::fmt_f64;
use c2e_core::{export_metrics, render_scenario, simulate, MetricsReport, ScenarioError};
use clap::{Parser, Subcommand};
use rayon::prelude::*;

const OK: u8 = 0;
const DOMAIN: u8 = 1;
const USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "c2e",
    version,
    about = "Simulate elastic cloud/edge training pipelines"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario and list every violated invariant.
    Validate {
        /// Scenario file, or `-` for stdin.
        file: String,
    },
    /// Simulate a scenario and write CSV metrics.
    Run {
        file: String,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
        /// Dotted-path override such as `policy.theta_up=0.9`; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE", value_parser = parse_kv)]
        overrides: Vec<(String, String)>,
    },
    /// Run every seed against every override set.
    Sweep {
        file: String,
        #[arg(short = 'o', long = "output")]
        output: PathBuf,
        #[arg(long, value_delimiter = ',', required = true, num_args = 1..)]
        seeds: Vec<u64>,
        /// Semicolon-separated overrides applied together, e.g.
        /// `horizon=60;policy.cooldown=10`; repeatable.
        #[arg(long = "override-set", value_name = "K=V;K=V", value_parser = parse_set)]
        override_sets: Vec<Vec<(String, String)>>,
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u32).range(1..))]
        jobs: u32,
    },
    /// Suggest architectures for a dataset descriptor.
    Config {
        file: String,
        /// Print the generated application as a scenario `[app]` section.
        #[arg(long)]
        emit_app: bool,
        /// With --emit-app, print this scenario with its app replaced.
        #[arg(long, requires = "emit_app")]
        into: Option<String>,
    },
}

fn parse_kv(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(format!("expected KEY=VALUE, got `{s}`")),
    }
}

fn parse_set(s: &str) -> Result<Vec<(String, String)>, String> {
    s.split(';')
        .filter(|p| !p.trim().is_empty())
        .map(parse_kv)
        .collect()
}

fn read_input(path: &str) -> Result<String, String> {
    if path == "-" {
        let mut text = String::new();
        io::stdin()
            .read_to_string(&mut text)
            .map_err(|e| format!("stdin: {e}"))?;
        Ok(text)
    } else {
        fs::read_to_string(path).map_err(|e| format!("{path}: {e}"))
    }
}

fn scenario_status(e: &ScenarioError) -> u8 {
    match e {
        ScenarioError::Syntax { .. } | ScenarioError::Override { .. } => USAGE,
        ScenarioError::UnknownId { .. } | ScenarioError::Invalid(_) => DOMAIN,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let status = match cli.command {
        Command::Validate { file } => validate(&file),
        Command::Run {
            file,
            output,
            overrides,
        } => run(&file, &output, &overrides),
        Command::Sweep {
            file,
            output,
            seeds,
            override_sets,
            jobs,
        } => sweep(&file, &output, &seeds, &override_sets, jobs),
        Command::Config {
            file,
            emit_app,
            into,
        } => config(&file, emit_app, into.as_deref()),
    };
    ExitCode::from(status)
}

fn validate(file: &str) -> u8 {
    let text = match read_input(file) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return USAGE;
        }
    };
    match parse_scenario_with_overrides(&text, &[]) {
        Ok(s) => {
            println!(
                "ok: {} operators, {} nodes, horizon {}",
                s.app.operators.len(),
                s.cluster.nodes.len(),
                fmt_f64(s.horizon)
            );
            OK
        }
        Err(ScenarioError::Invalid(violations)) => {
            for v in violations {
                println!("{v}");
            }
            DOMAIN
        }
        Err(e) => {
            eprintln!("error: {e}");
            scenario_status(&e)
        }
    }
}

fn summary_line(r: &MetricsReport) -> String {
    let s = &r.summary;
    let mut line = format!(
        "completion_time={} final_accuracy={} migrations={} target_reached={}",
        fmt_f64(s.training_completion_time),
        fmt_f64(s.final_accuracy),
        s.total_migrations,
        s.target_reached
    );
    if s.aborted {
        line.push_str(&format!(" aborted: {}", s.abort_reason));
    }
    line
}

fn run(file: &str, output: &Path, overrides: &[(String, String)]) -> u8 {
    let text = match read_input(file) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return USAGE;
        }
    };
    let scenario = match parse_scenario_with_overrides(&text, overrides) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            return scenario_status(&e);
        }
    };
    let report = match simulate(&scenario) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return DOMAIN;
        }
    };
    if let Err(e) = export_metrics(&report, output) {
        eprintln!("error: {e}");
        return USAGE;
    }
    println!("{}", summary_line(&report));
    if report.summary.aborted {
        eprintln!("infeasible: {}", report.summary.abort_reason);
        DOMAIN
    } else {
        OK
    }
}

struct SweepRow {
    run: String,
    seed: u64,
    overrides: String,
    result: Result<MetricsReport, String>,
}

const AGGREGATE_CSV: &str = "aggregate.csv";

type Override = (String, String);

fn sweep(
    file: &str,
    output: &Path,
    seeds: &[u64],
    sets: &[Vec<(String, String)>],
    jobs: u32,
) -> u8 {
    let text = match read_input(file) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return USAGE;
        }
    };
    if let Err(e) = parse_scenario_with_overrides(&text, &[]) {
        eprintln!("error: {e}");
        return scenario_status(&e);
    }
    let no_overrides = [Vec::new()];
    let sets = if sets.is_empty() {
        &no_overrides[..]
    } else {
        sets
    };
    let plan: Vec<(usize, u64, &[Override])> = sets
        .iter()
        .flat_map(|set| seeds.iter().map(move |seed| (*seed, set)))
        .enumerate()
        .map(|(i, (seed, set))| (i, seed, set.as_slice()))
        .collect();

    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(jobs as usize)
        .build()
    {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return USAGE;
        }
    };
    let rows: Vec<SweepRow> = pool.install(|| {
        plan.par_iter()
            .map(|&(i, seed, set)| {
                let run = format!("run-{i:03}");
                let mut overrides = set.to_vec();
                overrides.push(("seed".to_string(), seed.to_string()));
                let result = parse_scenario_with_overrides(&text, &overrides)
                    .map_err(|e| e.to_string())
                    .and_then(|s| simulate(&s).map_err(|e| e.to_string()))
                    .and_then(|r| {
                        export_metrics(&r, &output.join(&run)).map_err(|e| e.to_string())?;
                        Ok(r)
                    });
                let described: Vec<String> = set.iter().map(|(k, v)| format!("{k}={v}")).collect();
                SweepRow {
                    run,
                    seed,
                    overrides: described.join(";"),
                    result,
                }
            })
            .collect()
    });

    if let Err(e) = write_aggregate(&output.join(AGGREGATE_CSV), &rows) {
        eprintln!("error: {e}");
        return USAGE;
    }
    let mut status = OK;
    for row in &rows {
        match &row.result {
            Ok(r) if !r.summary.aborted => {
                println!("{} seed={} {}", row.run, row.seed, summary_line(r))
            }
            Ok(r) => {
                println!("{} seed={} {}", row.run, row.seed, summary_line(r));
                status = DOMAIN;
            }
            Err(e) => {
                println!("{} seed={} failed: {e}", row.run, row.seed);
                status = DOMAIN;
            }
        }
    }
    status
}

fn write_aggregate(path: &Path, rows: &[SweepRow]) -> Result<(), String> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    }
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    let header = [
        "run",
        "seed",
        "overrides",
        "status",
        "training_completion_time",
        "final_accuracy",
        "epochs",
        "total_migrations",
        "scale_decisions",
        "injected",
        "dropped",
        "error",
    ];
    w.write_record(header).map_err(|e| e.to_string())?;
    for row in rows {
        let mut rec = vec![row.run.clone(), row.seed.to_string(), row.overrides.clone()];
        match &row.result {
            Ok(r) => {
                let s = &r.summary;
                rec.extend([
                    if s.aborted { "aborted" } else { "ok" }.to_string(),
                    fmt_f64(s.training_completion_time),
                    fmt_f64(s.final_accuracy),
                    s.epochs.to_string(),
                    s.total_migrations.to_string(),
                    s.scale_decisions.to_string(),
                    s.injected.to_string(),
                    s.dropped.to_string(),
                    s.abort_reason.clone(),
                ]);
            }
            Err(e) => {
                rec.push("error".to_string());
                rec.extend(std::iter::repeat_n(String::new(), 7));
                rec.push(e.clone());
            }
        }
        w.write_record(&rec).map_err(|e| e.to_string())?;
    }
    w.flush().map_err(|e| format!("{}: {e}", path.display()))
}

fn config(file: &str, emit_app: bool, into: Option<&str>) -> u8 {
    let text = match read_input(file) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return USAGE;
        }
    };
    let descriptor = match dnn_config::parse_descriptor(&text) {
        Ok(d) => d,
        Err(e) => {
            eprintln!("error: {e}");
            return USAGE;
        }
    };
    let archs = match dnn_config::suggest_architectures(&descriptor) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return DOMAIN;
        }
    };
    // Suggestions become comments when the output is meant to be parsed.
    let prefix = if emit_app { "# " } else { "" };
    for (i, a) in archs.iter().enumerate() {
        println!("{prefix}{}. {a}", i + 1);
    }
    if !emit_app {
        return OK;
    }
    let app = match dnn_config::generate_training_dag(&archs[0], &descriptor) {
        Ok(app) => app,
        Err(e) => {
            eprintln!("error: {e}");
            return DOMAIN;
        }
    };
    let Some(base) = into else {
        print!("{}", dnn_config::render_app(&app));
        return OK;
    };
    let base_text = match read_input(base) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {e}");
            return USAGE;
        }
    };
    let mut scenario = match parse_scenario_with_overrides(&base_text, &[]) {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {base}: {e}");
            return scenario_status(&e);
        }
    };
    scenario.app = app;
    let rendered = render_scenario(&scenario);
    // The new app must still resolve against the base cluster.
    if let Err(e) = parse_scenario_with_overrides(&rendered, &[]) {
        eprintln!("error: generated scenario: {e}");
        return DOMAIN;
    }
    print!("{rendered}");
    OK
}
