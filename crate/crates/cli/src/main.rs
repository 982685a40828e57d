//! `acshadow`: run access-control configuration changes against a shadow
//! copy of a server before rolling them out.

mod manifest;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use acshadow_core::hir::DynCfg;
use acshadow_core::impact::ImpactRun;
use acshadow_core::reqgen::{resolve_groups, subjects_from_table};
use acshadow_core::trimmer::{find_final_accs_for, Color};
use acshadow_core::*;
use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use manifest::{
    load_config, load_data, load_delta, load_program, load_tuples, read_json, read_text,
    RequestSource, RunManifest,
};

const EXIT_ERROR: u8 = 1;
const EXIT_DANGEROUS: u8 = 2;
const EXIT_NO_CANDIDATES: u8 = 3;

#[derive(Parser)]
#[command(name = "acshadow", version, about = "Test access-control configuration changes before rollout")]
struct Cli {
    /// Format of what is printed to stdout.
    #[arg(long, value_enum, global = true, default_value_t = Format::Json)]
    format: Format,
    /// Worker threads for corpus runs (default: available parallelism).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Triage rule file (JSON); the built-in rules are used otherwise.
    #[arg(long, global = true)]
    rules: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum TrimMode {
    Advanced,
    Strawman,
}

#[derive(Subcommand)]
enum Command {
    /// Compute, aggregate and triage the impact of a change.
    Run {
        /// Run manifest (JSON).
        manifest: PathBuf,
    },
    /// Trim a program for fast impact runs.
    Trim {
        #[arg(long)]
        program: PathBuf,
        #[arg(long, value_enum, default_value_t = TrimMode::Advanced)]
        mode: TrimMode,
        /// Trace tuples (JSON); required in advanced mode.
        #[arg(long)]
        tuples: Option<PathBuf>,
        /// Data manifest the tuples run against; required in advanced mode.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Where to write the trimmed program (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where to write the final-check report (advanced mode).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Run one request and write its dynamic CFG.
    Trace {
        #[arg(long)]
        program: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Request (JSON).
        #[arg(long)]
        request: PathBuf,
        /// Seed for nondeterministic branches.
        #[arg(long, default_value_t = 0)]
        entropy: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diff an allowed and a denied trace and report the deciding check.
    CfgDiff {
        allow: PathBuf,
        deny: PathBuf,
        /// Also write the coloured graph in Graphviz format.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Generate a request corpus from a synthesis spec.
    Synthesize {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config_old: Option<PathBuf>,
        #[arg(long)]
        config_new: Option<PathBuf>,
        #[arg(long)]
        delta: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Turn an access log into a request corpus.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Data manifest whose user table supplies group memberships.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "users")]
        users_table: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Where to write the rejected-line report (default: stderr).
        #[arg(long)]
        rejected: Option<PathBuf>,
    },
    /// Re-triage an existing impact report.
    Triage {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    // Usage errors exit 1, not clap's 2, which means DANGEROUS here.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            let no_candidates = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<TrimError>(), Some(TrimError::NoCandidates)));
            ExitCode::from(if no_candidates { EXIT_NO_CANDIDATES } else { EXIT_ERROR })
        }
    }
}

fn dispatch(cli: &Cli) -> Result<u8> {
    match &cli.command {
        Command::Run { manifest } => cmd_run(cli, manifest),
        Command::Trim {
            program,
            mode,
            tuples,
            data,
            out,
            report,
        } => cmd_trim(cli, program, *mode, tuples.as_deref(), data.as_deref(), out.as_deref(), report.as_deref()),
        Command::Trace {
            program,
            config,
            data,
            request,
            entropy,
            out,
        } => cmd_trace(program, config, data, request, *entropy, out.as_deref()),
        Command::CfgDiff { allow, deny, dot } => cmd_cfgdiff(cli, allow, deny, dot.as_deref()),
        Command::Synthesize {
            spec,
            data,
            config_old,
            config_new,
            delta,
            out,
        } => cmd_synthesize(spec, data, config_old.as_deref(), config_new.as_deref(), delta.as_deref(), out.as_deref()),
        Command::Replay {
            log,
            data,
            users_table,
            out,
            rejected,
        } => cmd_replay(log, data.as_deref(), users_table, out.as_deref(), rejected.as_deref()),
        Command::Triage { report, out } => cmd_triage(cli, report, out.as_deref()),
    }
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("{}: cannot write", p.display())),
        None => {
            std::io::stdout().lock().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output types serialize");
    s.push('\n');
    s
}

fn workers(cli: &Cli, fallback: Option<usize>) -> usize {
    cli.workers
        .or(fallback)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1)
}

fn rules(path: Option<&Path>) -> Result<RuleSet> {
    match path {
        Some(p) => Ok(RuleSet::load(p)?),
        None => Ok(RuleSet::default()),
    }
}

fn print_report(cli: &Cli, report: &ImpactReport) -> Result<u8> {
    let text = match cli.format {
        Format::Json => to_json(report),
        Format::Text => report.to_text(),
    };
    write_out(None, &text)?;
    Ok(if report.has_dangerous() { EXIT_DANGEROUS } else { 0 })
}

fn cmd_run(cli: &Cli, path: &Path) -> Result<u8> {
    let m = RunManifest::load(path)?;
    let (program, _) = load_program(&m.program)?;
    let change = ChangeSpec::new(
        load_config(&m.config_old)?,
        load_config(&m.config_new)?,
        load_delta(m.data_delta.as_deref())?,
    )?;
    let lower = Arc::new(load_data(&m.data)?);
    let store = OverlayStore::new(Arc::clone(&lower));
    let requests = match &m.requests {
        RequestSource::Synthesize(spec) => {
            let spec: SynthesisSpec = read_json(spec)?;
            synthesize(&spec, &store, Some(&change))?
        }
        RequestSource::Logs(log) => {
            let parsed = parse_access_log(read_text(log)?.lines()).with_context(|| log.display().to_string())?;
            let mut requests = parsed.requests;
            if let Ok(known) = subjects_from_table(&store, "users") {
                resolve_groups(&mut requests, &known);
            }
            requests
        }
    };
    let workers = workers(cli, m.workers);
    let run: ImpactRun = match &m.tuples {
        Some(tuples) => {
            let tuples = load_tuples(tuples)?;
            let (finals, _) = find_final_accs_for(&program, &tuples, &store)?;
            let trimmed = trim_advanced(&program, &finals)?;
            let fast = compute_impact(&trimmed, &change, &lower, &requests, workers)?;
            confirm_impacts(&program, &fast.impacts, &change, &lower, workers)?
        }
        None => compute_impact(&program, &change, &lower, &requests, workers)?,
    };
    let tested: Vec<String> = requests
        .iter()
        .map(|r| r.object.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let rules = rules(cli.rules.as_deref().or(m.rules.as_deref()))?;
    let report = ImpactReport::build(run, &tested, &rules);
    if let Some(out) = &m.output {
        write_out(Some(out), &to_json(&report))?;
        write_out(Some(&out.with_extension("txt")), &report.to_text())?;
    }
    print_report(cli, &report)
}

#[derive(Serialize)]
struct TrimReport<'a> {
    finals: &'a AccSet,
    tuples: Vec<TupleResult<'a>>,
}

#[derive(Serialize)]
struct TupleResult<'a> {
    request: &'a Request,
    acc: &'a AccRef,
}

#[allow(clippy::too_many_arguments)]
fn cmd_trim(
    cli: &Cli,
    program: &Path,
    mode: TrimMode,
    tuples: Option<&Path>,
    data: Option<&Path>,
    out: Option<&Path>,
    report: Option<&Path>,
) -> Result<u8> {
    let (prog, text) = load_program(program)?;
    match mode {
        TrimMode::Strawman => {
            let trimmed = trim_strawman(&prog);
            // Nothing to remove: keep the input byte for byte.
            let body = if trimmed == prog { text } else { trimmed.to_string() };
            write_out(out, &body)?;
        }
        TrimMode::Advanced => {
            let tuples_path = tuples.context("advanced mode needs --tuples")?;
            let data = data.context("advanced mode needs --data")?;
            let tuples = load_tuples(tuples_path)?;
            let store = OverlayStore::new(Arc::new(load_data(data)?));
            let (finals, pairs) = find_final_accs_for(&prog, &tuples, &store)?;
            let trimmed = trim_advanced(&prog, &finals)?;
            write_out(out, &trimmed.to_string())?;
            let summary = TrimReport {
                finals: &finals,
                tuples: tuples
                    .iter()
                    .zip(&pairs)
                    .map(|(t, (acc, _))| TupleResult {
                        request: &t.request,
                        acc,
                    })
                    .collect(),
            };
            if let Some(path) = report {
                let body = match cli.format {
                    Format::Json => to_json(&summary),
                    Format::Text => finals.finals.iter().map(|a| format!("{a}\n")).collect(),
                };
                write_out(Some(path), &body)?;
            }
        }
    }
    Ok(0)
}

fn cmd_trace(
    program: &Path,
    config: &Path,
    data: &Path,
    request: &Path,
    entropy: u64,
    out: Option<&Path>,
) -> Result<u8> {
    let (prog, _) = load_program(program)?;
    let cfg = load_config(config)?;
    let store = OverlayStore::new(Arc::new(load_data(data)?));
    let req: Request = read_json(request)?;
    let opts = hir::RunOptions {
        entropy,
        ..hir::RunOptions::default()
    };
    let (_, graph) = hir::trace_run_with(&prog, &req, &cfg, &store, &opts)?;
    write_out(out, &to_json(&graph))?;
    Ok(0)
}

#[derive(Serialize)]
struct DiffReport<'a> {
    colors: BTreeMap<Color, usize>,
    acc: &'a AccRef,
    divergence: usize,
}

fn cmd_cfgdiff(cli: &Cli, allow: &Path, deny: &Path, dot: Option<&Path>) -> Result<u8> {
    let a: DynCfg = read_json(allow)?;
    let d: DynCfg = read_json(deny)?;
    let merged = diff_cfg(&a, &d)?;
    if let Some(path) = dot {
        write_out(Some(path), &merged.to_dot())?;
    }
    let (acc, merged) = find_final_acc(&a, &d)?;
    let colors: BTreeMap<Color, usize> = [Color::Green, Color::Red, Color::Mixed]
        .into_iter()
        .map(|c| (c, merged.count(c)))
        .collect();
    let idx = merged.index_of(&acc.key()).expect("winner is a merged node");
    let report = DiffReport {
        colors,
        acc: &acc,
        divergence: trimmer::divergence(&merged, idx),
    };
    let body = match cli.format {
        Format::Json => to_json(&report),
        Format::Text => format!(
            "GREEN {} RED {} GREEN_RED_MIXED {}\nfinal check: {} (divergence {})\n",
            report.colors[&Color::Green],
            report.colors[&Color::Red],
            report.colors[&Color::Mixed],
            acc,
            report.divergence
        ),
    };
    write_out(None, &body)?;
    Ok(0)
}

fn cmd_synthesize(
    spec: &Path,
    data: &Path,
    config_old: Option<&Path>,
    config_new: Option<&Path>,
    delta: Option<&Path>,
    out: Option<&Path>,
) -> Result<u8> {
    let spec: SynthesisSpec = read_json(spec)?;
    let store = OverlayStore::new(Arc::new(load_data(data)?));
    let change = if config_old.is_some() || config_new.is_some() || delta.is_some() {
        let old = config_old.map(load_config).transpose()?;
        let new = config_new.map(load_config).transpose()?;
        let (old, new) = match (old, new) {
            (Some(o), Some(n)) => (o, n),
            (Some(o), None) => (o.clone(), o),
            (None, Some(n)) => (n.clone(), n),
            (None, None) => (AcConfig::default(), AcConfig::default()),
        };
        Some(ChangeSpec::new(old, new, load_delta(delta)?)?)
    } else {
        None
    };
    let requests = synthesize(&spec, &store, change.as_ref())?;
    write_out(out, &to_json(&requests))?;
    Ok(0)
}

fn cmd_replay(
    log: &Path,
    data: Option<&Path>,
    users_table: &str,
    out: Option<&Path>,
    rejected: Option<&Path>,
) -> Result<u8> {
    let parsed = parse_access_log(read_text(log)?.lines()).with_context(|| log.display().to_string())?;
    let mut requests = parsed.requests;
    if let Some(data) = data {
        let store = OverlayStore::new(Arc::new(load_data(data)?));
        let known = subjects_from_table(&store, users_table)?;
        resolve_groups(&mut requests, &known);
    }
    write_out(out, &to_json(&requests))?;
    let report = to_json(&parsed.rejected);
    match rejected {
        Some(path) => write_out(Some(path), &report)?,
        None if !parsed.rejected.is_empty() => {
            eprintln!("{} rejected lines", parsed.rejected.len());
            eprint!("{report}");
        }
        None => {}
    }
    Ok(0)
}

fn cmd_triage(cli: &Cli, path: &Path, out: Option<&Path>) -> Result<u8> {
    let mut report: ImpactReport = read_json(path)?;
    report.retriage(&rules(cli.rules.as_deref())?);
    if out.is_some() {
        write_out(out, &to_json(&report))?;
    }
    print_report(cli, &report)
}
