use std::collections::VecDeque;
use std::fs::File;
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use thiserror::Error;
use wait_timeout::ChildExt;

use super::log::{parse_events, SimulationLog};

pub const EVENTS_ENV: &str = "FEDFORGE_EVENTS";
pub const ROUND_LIMIT_ENV: &str = "FEDFORGE_ROUND_LIMIT";
pub const SEED_ENV: &str = "FEDFORGE_SEED";

pub const STDOUT_FILE: &str = "log.stdout";
pub const STDERR_FILE: &str = "log.stderr";
pub const EVENTS_FILE: &str = "events.jsonl";

/// Exit classes of the sandbox contract.
pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME_ERROR: i32 = 1;
pub const EXIT_LIMIT_VIOLATION: i32 = 9;

pub const DEFAULT_N_ROUNDS: u32 = 5;

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("sandbox-unavailable: {0}")]
    Unavailable(String),
    #[error("missing-entry: {0}")]
    MissingEntry(String),
    #[error("sandbox io error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SimLimits {
    pub wall_ms: u64,
    pub cpu_seconds: u64,
}

impl Default for SimLimits {
    fn default() -> Self {
        Self { wall_ms: 120_000, cpu_seconds: 120 }
    }
}

#[derive(Debug, Clone)]
pub struct SimRequest {
    pub run_handle: String,
    pub code_dir: PathBuf,
    /// Receives log.stdout, log.stderr and events.jsonl.
    pub artifacts_dir: PathBuf,
    pub n_rounds: u32,
    pub seed: u64,
}

pub trait Sandbox: Send + Sync {
    /// Environment check; failure means the loop cannot run at all.
    fn probe(&self) -> Result<(), SandboxError>;
    /// Always yields a log when the environment is usable, crashes included.
    fn simulate(&self, req: &SimRequest) -> Result<SimulationLog, SandboxError>;
}

/// Runs `<runtime> run.py` as a child process under CPU and wall-clock limits.
#[derive(Debug, Clone)]
pub struct ProcessSandbox {
    pub runtime: String,
    pub entry: String,
    pub limits: SimLimits,
}

impl Default for ProcessSandbox {
    fn default() -> Self {
        Self { runtime: "python3".into(), entry: "run.py".into(), limits: SimLimits::default() }
    }
}

impl ProcessSandbox {
    pub fn with_limits(limits: SimLimits) -> Self {
        Self { limits, ..Self::default() }
    }
}

fn read_lossy(path: &Path) -> io::Result<String> {
    Ok(String::from_utf8_lossy(&std::fs::read(path)?).into_owned())
}

#[cfg(unix)]
fn exit_code(status: std::process::ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    match (status.code(), status.signal()) {
        (Some(c), _) => c,
        (None, Some(sig)) if sig == libc::SIGXCPU || sig == libc::SIGKILL => EXIT_LIMIT_VIOLATION,
        (None, Some(sig)) => 128 + sig,
        (None, None) => EXIT_RUNTIME_ERROR,
    }
}

#[cfg(not(unix))]
fn exit_code(status: std::process::ExitStatus) -> i32 {
    status.code().unwrap_or(EXIT_RUNTIME_ERROR)
}

impl Sandbox for ProcessSandbox {
    fn probe(&self) -> Result<(), SandboxError> {
        let out = Command::new(&self.runtime)
            .arg("--version")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map_err(|e| SandboxError::Unavailable(format!("{}: {e}", self.runtime)))?;
        if out.success() {
            Ok(())
        } else {
            Err(SandboxError::Unavailable(format!("{} --version exited with {out}", self.runtime)))
        }
    }

    fn simulate(&self, req: &SimRequest) -> Result<SimulationLog, SandboxError> {
        let entry = req.code_dir.join(&self.entry);
        if !entry.is_file() {
            return Err(SandboxError::MissingEntry(entry.display().to_string()));
        }
        std::fs::create_dir_all(&req.artifacts_dir)?;
        let artifacts = std::path::absolute(&req.artifacts_dir)?;
        let stdout_path = artifacts.join(STDOUT_FILE);
        let stderr_path = artifacts.join(STDERR_FILE);
        let events_path = artifacts.join(EVENTS_FILE);
        File::create(&events_path)?;

        let mut cmd = Command::new(&self.runtime);
        cmd.arg(&self.entry)
            .current_dir(&req.code_dir)
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_default())
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONHASHSEED", "0")
            .env("PYTHONUNBUFFERED", "1")
            .env(EVENTS_ENV, &events_path)
            .env(ROUND_LIMIT_ENV, req.n_rounds.to_string())
            .env(SEED_ENV, req.seed.to_string())
            .stdin(Stdio::null())
            .stdout(File::create(&stdout_path)?)
            .stderr(File::create(&stderr_path)?);
        #[cfg(unix)]
        {
            use std::os::unix::process::CommandExt;
            let cpu = self.limits.cpu_seconds as libc::rlim_t;
            // SAFETY: only async-signal-safe libc calls between fork and exec.
            unsafe {
                cmd.pre_exec(move || {
                    if libc::setpgid(0, 0) != 0 {
                        return Err(io::Error::last_os_error());
                    }
                    let lim = libc::rlimit { rlim_cur: cpu, rlim_max: cpu + 1 };
                    if libc::setrlimit(libc::RLIMIT_CPU, &lim) != 0 {
                        return Err(io::Error::last_os_error());
                    }
                    Ok(())
                });
            }
        }

        let started = Instant::now();
        let mut child = cmd
            .spawn()
            .map_err(|e| SandboxError::Unavailable(format!("spawn {}: {e}", self.runtime)))?;
        let (return_code, timed_out) = match child.wait_timeout(Duration::from_millis(self.limits.wall_ms))? {
            Some(status) => (exit_code(status), false),
            None => {
                #[cfg(unix)]
                // SAFETY: signals the process group created in pre_exec.
                unsafe {
                    libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
                }
                let _ = child.kill();
                child.wait()?;
                (EXIT_LIMIT_VIOLATION, true)
            }
        };
        let wall_time_ms = started.elapsed().as_millis() as u64;
        let parsed = parse_events(&read_lossy(&events_path)?);
        Ok(SimulationLog {
            run_handle: req.run_handle.clone(),
            return_code,
            stdout: read_lossy(&stdout_path)?,
            stderr: read_lossy(&stderr_path)?,
            events: parsed.events,
            wall_time_ms,
            timed_out,
            malformed_event_lines: parsed.malformed_lines,
        })
    }
}

/// Replays canned logs in order; the last one repeats once the queue drains.
#[derive(Debug, Default)]
pub struct ScriptedSandbox {
    logs: Mutex<VecDeque<SimulationLog>>,
    last: Mutex<Option<SimulationLog>>,
    unavailable: bool,
}

impl ScriptedSandbox {
    pub fn new(logs: impl IntoIterator<Item = SimulationLog>) -> Self {
        Self { logs: Mutex::new(logs.into_iter().collect()), ..Self::default() }
    }

    pub fn unavailable() -> Self {
        Self { unavailable: true, ..Self::default() }
    }
}

impl Sandbox for ScriptedSandbox {
    fn probe(&self) -> Result<(), SandboxError> {
        if self.unavailable {
            Err(SandboxError::Unavailable("scripted sandbox marked unavailable".into()))
        } else {
            Ok(())
        }
    }

    fn simulate(&self, req: &SimRequest) -> Result<SimulationLog, SandboxError> {
        self.probe()?;
        let next = self.logs.lock().unwrap_or_else(|e| e.into_inner()).pop_front();
        let mut last = self.last.lock().unwrap_or_else(|e| e.into_inner());
        let log = match next {
            Some(l) => {
                *last = Some(l.clone());
                l
            }
            None => last.clone().ok_or_else(|| SandboxError::Unavailable("no scripted logs".into()))?,
        };
        Ok(SimulationLog { run_handle: req.run_handle.clone(), ..log })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::log::Phase;

    fn request(dir: &Path, n: u32) -> SimRequest {
        SimRequest {
            run_handle: "t".into(),
            code_dir: dir.join("code"),
            artifacts_dir: dir.to_path_buf(),
            n_rounds: n,
            seed: 42,
        }
    }

    fn write_runner(dir: &Path, src: &str) {
        std::fs::create_dir_all(dir.join("code")).unwrap();
        std::fs::write(dir.join("code/run.py"), src).unwrap();
    }

    const EMITTING: &str = r#"import json, os, sys
limit = int(os.environ["FEDFORGE_ROUND_LIMIT"])
with open(os.environ["FEDFORGE_EVENTS"], "a") as f:
    for r in range(1, limit + 1):
        f.write(json.dumps({"round": r, "phase": "fit_agg", "loss": 1.0 / r, "accuracy": 0.5, "num_results": 3}) + "\n")
        f.flush()
        if os.environ.get("CRASH_AT") == str(r):
            raise RuntimeError("boom")
print("seed", os.environ["FEDFORGE_SEED"])
"#;

    #[test]
    fn runs_child_and_reads_events() {
        let tmp = tempfile::tempdir().unwrap();
        write_runner(tmp.path(), EMITTING);
        let log = ProcessSandbox::default().simulate(&request(tmp.path(), 4)).unwrap();
        assert_eq!(log.return_code, 0, "{}", log.stderr);
        assert_eq!(log.events.len(), 4);
        assert!(log.events.iter().all(|e| e.phase == Phase::FitAgg));
        assert_eq!(log.stdout.trim(), "seed 42");
        assert!(tmp.path().join(STDOUT_FILE).is_file());
    }

    #[test]
    fn crash_captures_traceback() {
        let tmp = tempfile::tempdir().unwrap();
        write_runner(tmp.path(), &EMITTING.replace("os.environ.get(\"CRASH_AT\")", "\"2\""));
        let log = ProcessSandbox::default().simulate(&request(tmp.path(), 5)).unwrap();
        assert_eq!(log.return_code, 1);
        assert!(log.stderr.contains("Traceback"));
        assert_eq!(log.events.len(), 2);
    }

    #[test]
    fn wall_limit_kills_child() {
        let tmp = tempfile::tempdir().unwrap();
        write_runner(tmp.path(), "import time\ntime.sleep(10)\n");
        let sb = ProcessSandbox::with_limits(SimLimits { wall_ms: 1, cpu_seconds: 5 });
        let started = Instant::now();
        let log = sb.simulate(&request(tmp.path(), 5)).unwrap();
        assert!(log.timed_out);
        assert_eq!(log.return_code, EXIT_LIMIT_VIOLATION);
        assert!(started.elapsed() < Duration::from_secs(5));
    }

    #[test]
    fn cpu_limit_is_a_limit_violation() {
        let tmp = tempfile::tempdir().unwrap();
        write_runner(tmp.path(), "while True:\n    pass\n");
        let sb = ProcessSandbox::with_limits(SimLimits { wall_ms: 20_000, cpu_seconds: 1 });
        let log = sb.simulate(&request(tmp.path(), 5)).unwrap();
        assert!(!log.timed_out);
        assert_eq!(log.return_code, EXIT_LIMIT_VIOLATION);
    }

    #[test]
    fn missing_entry_and_probe() {
        let tmp = tempfile::tempdir().unwrap();
        let err = ProcessSandbox::default().simulate(&request(tmp.path(), 5)).unwrap_err();
        assert!(matches!(err, SandboxError::MissingEntry(_)));
        let bogus = ProcessSandbox { runtime: "/nonexistent/python".into(), ..ProcessSandbox::default() };
        assert!(matches!(bogus.probe(), Err(SandboxError::Unavailable(_))));
    }
}
