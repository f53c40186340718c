use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use idonly::sim::explore::{explore_rb, ExploreError, ExploreParams, DEFAULT_CAP};
use idonly::sim::partition::run_partition_demo;
use idonly::sim::scenario::Scenario;
use idonly::sim::{run_scenario, run_scenario_traced, RunReport, SimError};
use rayon::prelude::*;

const PASS: u8 = 0;
const FAIL: u8 = 1;
const INPUT: u8 = 2;
const CAP: u8 = 3;

#[derive(Parser)]
#[command(name = "idonly", version, about = "Run id-only Byzantine protocol scenarios")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario file and write its report.
    Run {
        file: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Report path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record wall time in the report (makes it non-reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Run every `*.json` scenario in a directory.
    Suite {
        dir: PathBuf,
        #[arg(long)]
        jobs: Option<usize>,
        /// Directory for one report per scenario.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Enumerate every adversary schedule against reliable broadcast.
    Explore {
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        f: usize,
        #[arg(long, default_value_t = 6)]
        horizon: u64,
        #[arg(long)]
        byzantine_sender: bool,
        /// Succeed only if a violation is found (negative controls).
        #[arg(long)]
        expect_fail: bool,
        #[arg(long, default_value_t = DEFAULT_CAP)]
        cap: u128,
    },
    Demo {
        #[command(subcommand)]
        demo: Demo,
    },
}

#[derive(Subcommand)]
enum Demo {
    /// Two blocks whose cross-block traffic arrives late.
    Partition {
        #[arg(long, default_value_t = 4)]
        block_size: usize,
        #[arg(long, default_value_t = 12)]
        delay: u64,
    },
}

/// A failure that maps to an exit code.
struct Exit(u8, anyhow::Error);

impl Exit {
    fn input(e: impl Into<anyhow::Error>) -> Self {
        Exit(INPUT, e.into())
    }
}

fn load(path: &Path) -> Result<Scenario, Exit> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(Exit::input)?;
    Scenario::from_json(&text).with_context(|| format!("{}", path.display())).map_err(Exit::input)
}

fn sim_exit(path: &Path, e: SimError) -> Exit {
    let code = match e {
        SimError::Scenario(_) => INPUT,
        SimError::Engine(_) => FAIL,
    };
    Exit(code, anyhow!(e).context(path.display().to_string()))
}

/// Runs a loaded scenario, writing its trace if the scenario asks for one.
fn execute(path: &Path, s: &Scenario, timing: bool) -> Result<RunReport, Exit> {
    let t = Instant::now();
    let trace_path = s.output.as_ref().and_then(|o| o.trace.as_ref());
    let outcome = match trace_path {
        Some(p) => {
            let (outcome, trace) = run_scenario_traced(s).map_err(|e| sim_exit(path, e))?;
            let p = path.parent().unwrap_or(Path::new(".")).join(p);
            let mut text = String::new();
            for rec in &trace {
                text.push_str(&rec.line());
                text.push('\n');
            }
            fs::write(&p, text).with_context(|| format!("writing {}", p.display())).map_err(Exit::input)?;
            outcome
        }
        None => run_scenario(s).map_err(|e| sim_exit(path, e))?,
    };
    let wall = timing.then(|| t.elapsed().as_millis() as u64);
    Ok(RunReport::new(s, outcome, wall))
}

fn describe_failures(report: &RunReport) -> Vec<String> {
    report
        .verdict
        .failures()
        .map(|p| {
            format!(
                "{} failed at round {}: {}",
                p.name,
                p.first_violation_round.map_or("?".into(), |r| r.to_string()),
                p.witness.as_deref().unwrap_or("")
            )
        })
        .collect()
}

fn cmd_run(file: &Path, seed: Option<u64>, out: Option<&Path>, timing: bool) -> Result<u8, Exit> {
    let mut s = load(file)?;
    if let Some(seed) = seed {
        s.seed = seed;
    }
    let report = execute(file, &s, timing)?;
    let json = report.to_json();
    match out {
        Some(p) => fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display())).map_err(Exit::input)?,
        None => println!("{json}"),
    }
    for line in describe_failures(&report) {
        eprintln!("{line}");
    }
    if report.expect_fail && !report.passed {
        eprintln!("expected failure observed");
    }
    Ok(if report.ok { PASS } else { FAIL })
}

fn cmd_suite(dir: &Path, jobs: Option<usize>, out: Option<&Path>) -> Result<u8, Exit> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))
        .map_err(Exit::input)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Exit::input(anyhow!("no scenario files in {}", dir.display())));
    }
    if let Some(o) = out {
        fs::create_dir_all(o).with_context(|| format!("creating {}", o.display())).map_err(Exit::input)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Exit::input(anyhow!(e)))?;
    let results: Vec<(PathBuf, Result<RunReport, Exit>)> = pool.install(|| {
        files.par_iter().map(|f| (f.clone(), load(f).and_then(|s| execute(f, &s, false)))).collect()
    });

    let mut code = PASS;
    for (path, res) in &results {
        let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
        match res {
            Ok(report) => {
                let status = match (report.passed, report.expect_fail) {
                    (true, false) => "PASS",
                    (false, true) => "XFAIL",
                    (false, false) => "FAIL",
                    (true, true) => "XPASS",
                };
                println!("{status:<6} {name}");
                if !report.ok {
                    code = code.max(FAIL);
                    for line in describe_failures(report) {
                        println!("       {line}");
                    }
                }
                if let Some(o) = out {
                    let p = o.join(&name);
                    fs::write(&p, report.to_json() + "\n")
                        .with_context(|| format!("writing {}", p.display()))
                        .map_err(Exit::input)?;
                }
            }
            Err(Exit(c, e)) => {
                println!("{:<6} {name}: {e:#}", if *c == INPUT { "ERROR" } else { "ABORT" });
                code = code.max(*c);
            }
        }
    }
    let ok = results.iter().filter(|(_, r)| r.as_ref().is_ok_and(|r| r.ok)).count();
    println!("{ok}/{} scenarios ok", results.len());
    Ok(code)
}

fn cmd_explore(p: ExploreParams, expect_fail: bool, cap: u128) -> Result<u8, Exit> {
    let report = match explore_rb(p, cap) {
        Ok(r) => r,
        Err(e @ ExploreError::Cap { .. }) => return Err(Exit(CAP, e.into())),
        Err(e) => return Err(Exit::input(e)),
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    eprintln!(
        "{} branches, {} violating, {} states",
        report.branches, report.violating_branches, report.states
    );
    Ok(if report.passed() != expect_fail { PASS } else { FAIL })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.cmd {
        Cmd::Run { file, seed, out, timing } => cmd_run(&file, seed, out.as_deref(), timing),
        Cmd::Suite { dir, jobs, out } => cmd_suite(&dir, jobs, out.as_deref()),
        Cmd::Explore { n, f, horizon, byzantine_sender, expect_fail, cap } => {
            cmd_explore(ExploreParams { n, f, horizon, byzantine_sender }, expect_fail, cap)
        }
        Cmd::Demo { demo: Demo::Partition { block_size, delay } } => run_partition_demo(block_size, delay)
            .map(|r| {
                println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
                eprintln!("{}", if r.disagreement { "disagreement" } else { "no disagreement" });
                PASS
            })
            .map_err(|e| Exit::input(e)),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
