use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use psap::hash::Digest256;
use psap::pipeline::{self, RunManifest};
use psap::report::{self, RunSummary};
use psap::scenario::Scenario;
use psap::sim::{AuditRecord, Policy};
use psap::workload::{export_csv, generate};
use psap::{Error, Result};
use sha2::{Digest as _, Sha256};

#[derive(Parser)]
#[command(name = "psap", version, about = "Predictive shard allocation simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario file (TOML).
    #[arg(long)]
    scenario: PathBuf,
    /// Master seed; overrides the trace and engine seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory [default: $PSAP_OUT/<name>, else the scenario's output_dir, else runs/<name>]
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Fmt {
    Text,
    Csv,
    Jsonl,
    SvgData,
}

impl Fmt {
    fn records(self) -> report::Format {
        match self {
            Fmt::Jsonl => report::Format::Jsonl,
            Fmt::SvgData => report::Format::SvgData,
            Fmt::Csv | Fmt::Text => report::Format::Csv,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Target {
    Twf,
    Policy,
}

#[derive(Subcommand)]
enum Command {
    /// Write the scenario's transaction trace and a manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "csv")]
        format: Fmt,
    },
    /// Train the forecaster or the migration policy and save a checkpoint.
    Train {
        #[arg(value_enum)]
        target: Target,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate one or more policies and archive each run.
    Run {
        #[command(flatten)]
        common: Common,
        /// Policies to run [default: the scenario's].
        #[arg(long, value_delimiter = ',')]
        policy: Vec<String>,
        /// Record format next to audit.jsonl.
        #[arg(long, value_enum, default_value = "csv")]
        format: Fmt,
        /// Runs executed in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Summarize archived runs into one comparison table.
    Report {
        /// Run directories (each holding audit.jsonl).
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Fmt,
        /// Where csv, jsonl and svg-data output goes [default: stdout, or each run's plots/ for svg-data].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the fully resolved scenario, defaults included.
    Config {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<(Scenario, PathBuf)> {
    let mut sc = Scenario::load(&common.scenario)?;
    if let Some(seed) = common.seed {
        sc = sc.with_seed(seed);
    }
    let dir = pipeline::output_dir(&sc, common.out.as_deref());
    Ok((sc, dir))
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_generate(common: &Common, format: Fmt) -> Result<()> {
    let (sc, dir) = load(common)?;
    mkdir(&dir)?;
    let blocks: Vec<_> = generate(&sc.trace)?.collect();
    let mut h = Sha256::new();
    let mut count = 0u64;
    for b in &blocks {
        for tx in b {
            h.update(serde_json::to_vec(tx)?);
            count += 1;
        }
    }
    let file = match format {
        Fmt::Jsonl => {
            let p = dir.join("trace.jsonl");
            let txs: Vec<_> = blocks.iter().flatten().collect();
            report::write_jsonl(&p, &txs)?;
            p
        }
        Fmt::Csv => {
            let p = dir.join("trace.csv");
            export_csv(&p, &blocks)?;
            p
        }
        _ => return Err(Error::config("format", "generate writes csv or jsonl")),
    };
    let manifest = serde_json::json!({
        "scenario": sc.name,
        "file": file.file_name().map(|f| f.to_string_lossy().to_string()),
        "blocks": blocks.len(),
        "transactions": count,
        "digest": Digest256(h.finalize().into()).to_hex(),
        "trace": sc.trace,
    });
    write(&dir.join("trace_manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    write(&dir.join("scenario.toml"), &sc.to_toml())?;
    println!("{} blocks, {count} transactions -> {}", blocks.len(), file.display());
    Ok(())
}

fn cmd_train(target: Target, common: &Common) -> Result<()> {
    let (sc, dir) = load(common)?;
    mkdir(&dir)?;
    write(&dir.join("scenario.toml"), &sc.to_toml())?;
    match target {
        Target::Twf => {
            let out = pipeline::train_twf(&sc)?;
            let path = dir.join("twf.ckpt");
            let hash = out.model.save(&path)?;
            let report = serde_json::json!({
                "checkpoint": path,
                "content_hash": hash.to_hex(),
                "training": out.report,
                "held_out": out.accuracy,
            });
            write(&dir.join("twf_report.json"), &serde_json::to_string_pretty(&report)?)?;
            println!("twf checkpoint {} ({})", path.display(), hash.to_hex());
            for a in &out.accuracy {
                println!("  H={:<3} MAPE {:6.2}%  MAE {:8.2}  origins {}", a.horizon, a.overall.mape, a.overall.mae, a.origins);
            }
        }
        Target::Policy => {
            let model = match &sc.sim.twf_checkpoint {
                Some(p) if !p.exists() => {
                    return Err(Error::config("sim.twf_checkpoint", format!("{} does not exist", p.display())))
                }
                Some(p) => Some(psap::twf::TwfModel::load(p)?),
                None => None,
            };
            let (agent, episodes) = pipeline::train_policy(&sc, model)?;
            let path = dir.join("policy.ckpt");
            let hash = agent.save(&path)?;
            report::write_jsonl(&dir.join("episodes.jsonl"), &episodes)?;
            println!("policy checkpoint {} ({})", path.display(), hash.to_hex());
            for e in &episodes {
                println!(
                    "  episode {:>3}: mean imbalance {:.3}, moved {}, updates {}, lambda {:.4}",
                    e.episode, e.mean_imbalance, e.moved, e.updates, e.lambda
                );
            }
        }
    }
    Ok(())
}

fn parse_policy(s: &str) -> Result<Policy> {
    match s {
        "psap" => Ok(Policy::Psap),
        "static" => Ok(Policy::Static),
        "reactive" => Ok(Policy::Reactive),
        other => Err(Error::config("policy", format!("unknown policy {other:?}"))),
    }
}

fn summary_line(policy: Policy, s: &RunSummary) -> String {
    format!(
        "{:<9} tps {:>8.1}  p95 {:>6.0} ms  imbalance {:.3} +- {:.3}  index {:.3}  migration gas p95 {:.4}  recovery {}  violations {}/{}/{}",
        policy.as_str(),
        s.tps.mean,
        s.latency_p95_ms.p95,
        s.imbalance.mean,
        s.imbalance.std,
        s.imbalance_index.mean,
        s.migration_share.p95,
        s.recovery.map_or("-".to_string(), |r| r.to_string()),
        s.stake_violations,
        s.gas_violations,
        s.move_violations,
    )
}

fn cmd_run(common: &Common, policies: &[String], format: Fmt, jobs: usize) -> Result<()> {
    let (sc, dir) = load(common)?;
    let policies: Vec<Policy> = if policies.is_empty() {
        vec![sc.sim.policy]
    } else {
        policies.iter().map(|p| parse_policy(p)).collect::<Result<_>>()?
    };
    let jobs = jobs.max(1);
    let mut results: Vec<(Policy, Result<RunManifest>)> = Vec::new();
    for chunk in policies.chunks(jobs) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|p| {
                    let (sc, dir) = (&sc, dir.join(p.as_str()));
                    (*p, s.spawn(move || pipeline::run_archived(sc, *p, &dir, format.records())))
                })
                .collect();
            for (p, h) in handles {
                results.push((p, h.join().expect("run thread panicked")));
            }
        });
    }
    let mut first_err = None;
    for (p, r) in results {
        match r {
            Ok(m) => println!("{}", summary_line(p, &m.summary)),
            Err(e) => {
                eprintln!("{}: {e}", p.as_str());
                if first_err.as_ref().is_none_or(|f: &Error| e.exit_code() > f.exit_code()) {
                    first_err = Some(e);
                }
            }
        }
    }
    println!("artifacts in {}", dir.display());
    first_err.map_or(Ok(()), Err)
}

struct Loaded {
    dir: PathBuf,
    policy: String,
    records: Vec<psap::sim::BlockRecord>,
    summary: RunSummary,
    breach: Option<Error>,
}

fn load_run(dir: &Path) -> Result<Loaded> {
    let audit: Vec<AuditRecord> = report::read_jsonl(&dir.join("audit.jsonl"))?;
    let breach = audit.iter().find_map(|a| {
        let r = &a.record;
        let msg = a.breach.clone().or_else(|| {
            (r.stake_violation || r.gas_violation || r.move_violation)
                .then(|| "block violates a safety limit".to_string())
        })?;
        Some(Error::Invariant { height: a.height, msg: format!("{}: {msg}", dir.display()) })
    });
    let records: Vec<_> = audit.into_iter().map(|a| a.record).collect();
    let sc = Scenario::load(dir.join("scenario.toml")).ok();
    let attack = sc.as_ref().and_then(|s| {
        use psap::workload::TraceKind::*;
        matches!(s.trace.kind, Hotspot | Adaptive | StakeBribery).then_some(s.trace.attack.start)
    });
    let policy = sc.map_or_else(|| "?".to_string(), |s| s.sim.policy.as_str().to_string());
    let summary = report::summarize(&records, attack)?;
    Ok(Loaded { dir: dir.to_path_buf(), policy, records, summary, breach })
}

/// Summarizes archived runs; an archived breach is reported after the output.
fn cmd_report(dirs: &[PathBuf], format: Fmt, out: Option<&Path>) -> Result<()> {
    let mut runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    summarize_runs(&runs, format, out)?;
    runs.iter_mut().find_map(|r| r.breach.take()).map_or(Ok(()), Err)
}

fn summarize_runs(runs: &[Loaded], format: Fmt, out: Option<&Path>) -> Result<()> {
    match format {
        Fmt::Text => {
            println!("imbalance = max-min utilization; index = mean relative deviation of executed load");
            for r in runs {
                println!("{}  [{}]", summary_line(parse_policy(&r.policy).unwrap_or(Policy::Static), &r.summary), r.dir.display());
            }
        }
        Fmt::Jsonl => {
            let mut text = String::new();
            for r in runs {
                let row = serde_json::json!({ "run": r.dir, "policy": r.policy, "summary": r.summary });
                text.push_str(&serde_json::to_string(&row)?);
                text.push('\n');
            }
            emit(out, "summary.jsonl", &text)?;
        }
        Fmt::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            let header = [
                "run", "policy", "blocks", "tps_mean", "tps_p95", "latency_p95_ms", "imbalance_mean", "imbalance_std",
                "imbalance_index_mean", "util_below_target", "cross_ratio_mean", "migration_share_mean",
                "migration_share_p95", "recovery", "stake_violations", "gas_violations", "move_violations",
            ];
            let csv_err = |e: csv::Error| Error::Degenerate(e.to_string());
            w.write_record(header).map_err(csv_err)?;
            for r in runs {
                let s = &r.summary;
                w.write_record([
                    r.dir.display().to_string(),
                    r.policy.clone(),
                    s.blocks.to_string(),
                    s.tps.mean.to_string(),
                    s.tps.p95.to_string(),
                    s.latency_p95_ms.p95.to_string(),
                    s.imbalance.mean.to_string(),
                    s.imbalance.std.to_string(),
                    s.imbalance_index.mean.to_string(),
                    s.util_below_target.to_string(),
                    s.cross_ratio.mean.to_string(),
                    s.migration_share.mean.to_string(),
                    s.migration_share.p95.to_string(),
                    s.recovery.map_or(String::new(), |r| r.to_string()),
                    s.stake_violations.to_string(),
                    s.gas_violations.to_string(),
                    s.move_violations.to_string(),
                ])
                .map_err(csv_err)?;
            }
            let bytes = w.into_inner().map_err(|e| Error::Degenerate(e.to_string()))?;
            emit(out, "summary.csv", &String::from_utf8_lossy(&bytes))?;
        }
        Fmt::SvgData => {
            for r in runs {
                let dest = match out {
                    Some(o) => o.join(r.dir.file_name().unwrap_or_default()),
                    None => r.dir.join("plots"),
                };
                let files = report::export(&dest, &r.records, report::Format::SvgData)?;
                println!("{} series -> {}", files.len(), dest.display());
            }
        }
    }
    Ok(())
}

fn emit(out: Option<&Path>, name: &str, text: &str) -> Result<()> {
    match out {
        Some(dir) => {
            mkdir(dir)?;
            write(&dir.join(name), text)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Generate { common, format } => cmd_generate(common, *format),
        Command::Train { target, common } => cmd_train(*target, common),
        Command::Run { common, policy, format, jobs } => cmd_run(common, policy, *format, *jobs),
        Command::Report { dirs, format, out } => cmd_report(dirs, *format, out.as_deref()),
        Command::Config { common } => load(common).map(|(sc, _)| print!("{}", sc.to_toml())),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
