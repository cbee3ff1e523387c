use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use fedforge_core::orchestrator::{
    DecisionRequest, Orchestrator, RunPhase, RunSettings, RunSnapshot, RunStore, EVENTS_FILE, HOME_ENV,
};
use fedforge_core::task_spec::{validate_template, BenchmarkRegistry};

#[derive(Debug, Parser)]
#[command(name = "fedforge", version, about = "Plan, generate and repair federated learning codebases")]
pub struct Cli {
    /// Root of the run store.
    #[arg(long, env = HOME_ENV, global = true)]
    pub home: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Start a run for a benchmark query.
    Run {
        #[arg(long)]
        query: String,
        /// Transcript directory: all agents replay scripted replies offline.
        #[arg(long)]
        scripted: Option<PathBuf>,
        #[arg(long = "t-max", default_value_t = fedforge_core::eval::DEFAULT_T_MAX)]
        t_max: u32,
        #[arg(long, default_value_t = fedforge_core::eval::DEFAULT_N_ROUNDS)]
        rounds: u32,
        #[arg(long, default_value_t = fedforge_core::eval::DEFAULT_SEED)]
        seed: u64,
    },
    /// Approve the plan under review, or retry a failed module build.
    Approve {
        run_id: String,
        #[arg(long)]
        note: Option<String>,
    },
    /// Send the plan back with feedback.
    Revise {
        run_id: String,
        #[arg(long)]
        feedback: String,
    },
    Abandon {
        run_id: String,
    },
    /// Start a new linked run after the correction budget ran out.
    Replan {
        run_id: String,
        #[arg(long)]
        feedback: Option<String>,
    },
    /// Finish an interrupted run.
    Resume {
        run_id: String,
    },
    Status {
        run_id: String,
    },
    Bench {
        #[command(subcommand)]
        command: BenchCommand,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: SocketAddr,
    },
}

#[derive(Debug, Subcommand)]
pub enum BenchCommand {
    /// Check every registry entry against the query template.
    Validate {
        #[arg(long)]
        registry: Option<PathBuf>,
    },
}

fn summary(snap: &RunSnapshot) -> String {
    let mut s = format!("run {} {} phase={:?} seq={}", snap.run_id, snap.query_id, snap.phase, snap.last_seq);
    if let Some(p) = snap.pending_decision {
        s.push_str(&format!(" awaiting={}", serde_json::to_value(p).unwrap_or_default().as_str().unwrap_or("")));
    }
    if let Some(e) = &snap.last_error {
        s.push_str(&format!(" error={e:?}"));
    }
    if let Some(child) = &snap.replanned_as {
        s.push_str(&format!(" replanned_as={child}"));
    }
    s
}

fn finish(orch: &Orchestrator, snap: RunSnapshot, out: &mut impl Write) -> Result<i32> {
    writeln!(out, "{}", summary(&snap))?;
    writeln!(out, "events: {}", orch.run_dir(&snap.run_id)?.join(EVENTS_FILE).display())?;
    Ok(match snap.phase {
        RunPhase::Certified => 0,
        RunPhase::Exhausted => 3,
        RunPhase::Abandoned => 4,
        _ if snap.last_error.is_some() => 2,
        _ => 0,
    })
}

fn decide_and_drive(orch: &Orchestrator, run_id: &str, req: DecisionRequest, out: &mut impl Write) -> Result<i32> {
    let outcome = orch.decide(run_id, req)?;
    if let Some(child) = outcome.new_run_id {
        writeln!(out, "replanned as {child}")?;
        let snap = orch.drive(&child)?;
        return finish(orch, snap, out);
    }
    let snap = orch.drive(run_id)?;
    finish(orch, snap, out)
}

/// Run a parsed command; returns the process exit code.
pub fn execute(cli: Cli, out: &mut impl Write) -> Result<i32> {
    let store = match cli.home {
        Some(h) => RunStore::new(h),
        None => RunStore::from_env(),
    };
    let orch = Orchestrator::new(store);
    match cli.command {
        Command::Run { query, scripted, t_max, rounds, seed } => {
            let mut settings = match scripted {
                Some(dir) => RunSettings::scripted(std::path::absolute(&dir).context("transcript directory")?),
                None => RunSettings::default(),
            };
            settings.t_max = t_max;
            settings.n_rounds = rounds;
            settings.seed = seed;
            let id = orch.start_run(&query, settings)?;
            writeln!(out, "started {id}")?;
            let snap = orch.run_scripted(&id)?;
            finish(&orch, snap, out)
        }
        Command::Approve { run_id, note } => {
            decide_and_drive(&orch, &run_id, DecisionRequest { decision: "approve".into(), feedback: None, note }, out)
        }
        Command::Revise { run_id, feedback } => {
            decide_and_drive(&orch, &run_id, DecisionRequest::new("revise").with_feedback(feedback), out)
        }
        Command::Abandon { run_id } => decide_and_drive(&orch, &run_id, DecisionRequest::new("abandon"), out),
        Command::Replan { run_id, feedback } => {
            let req = DecisionRequest { decision: "replan".into(), feedback, note: None };
            decide_and_drive(&orch, &run_id, req, out)
        }
        Command::Resume { run_id } => {
            let snap = orch.resume(&run_id)?;
            finish(&orch, snap, out)
        }
        Command::Status { run_id } => {
            let snap = orch.snapshot(&run_id)?;
            writeln!(out, "{}", serde_json::to_string_pretty(&snap)?)?;
            Ok(0)
        }
        Command::Bench { command: BenchCommand::Validate { registry } } => {
            let reg = match registry {
                Some(p) => BenchmarkRegistry::load(&p)?,
                None => BenchmarkRegistry::shipped(),
            };
            bench_validate(&reg, out)
        }
        Command::Serve { addr } => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async move {
                let listener = tokio::net::TcpListener::bind(addr).await?;
                tracing::info!(%addr, "serving");
                axum::serve(listener, crate::api::router(Arc::new(orch))).await?;
                Ok::<_, anyhow::Error>(())
            })?;
            Ok(0)
        }
    }
}

pub fn bench_validate(reg: &BenchmarkRegistry, out: &mut impl Write) -> Result<i32> {
    let mut bad = 0;
    for e in reg.entries() {
        let mut problems: Vec<String> = validate_template(&e.query).iter().map(ToString::to_string).collect();
        problems.extend(e.config.violations().iter().map(ToString::to_string));
        if problems.is_empty() {
            writeln!(out, "ok   {} {:?}", e.query.id, e.query.research_area)?;
        } else {
            bad += 1;
            writeln!(out, "FAIL {} {}", e.query.id, problems.join(", "))?;
        }
    }
    for (area, n) in reg.area_counts() {
        writeln!(out, "{area:?}: {n}")?;
    }
    writeln!(out, "{} entries, {bad} invalid", reg.len())?;
    if bad > 0 {
        bail!("{bad} registry entries are invalid");
    }
    Ok(0)
}
