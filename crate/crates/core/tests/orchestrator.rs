use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use fedforge_core::codegen::GrammarChecker;
use fedforge_core::eval::{Phase, Sandbox, SandboxError, SimRequest, SimulationLog, StructuredEvent};
use fedforge_core::fixtures::{zero_results_strategy, TOY_STRATEGY};
use fedforge_core::orchestrator::{
    kinds, read_event_log, DecisionRequest, Orchestrator, OrchestratorError, RunEvent, RunPhase, RunSettings,
    RunSnapshot, RunStore, EVENTS_FILE,
};

fn q5_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/transcripts/q5")
}

/// Simulates by looking at strategy.py: the zero-results variant fails L2,
/// anything else completes every round.
struct KeyedSandbox;

impl Sandbox for KeyedSandbox {
    fn probe(&self) -> Result<(), SandboxError> {
        Ok(())
    }

    fn simulate(&self, req: &SimRequest) -> Result<SimulationLog, SandboxError> {
        let strategy = std::fs::read_to_string(req.code_dir.join("strategy.py")).unwrap_or_default();
        let broken = strategy.contains("return []");
        let mut events = Vec::new();
        for r in 1..=req.n_rounds {
            let loss = 1.0 / (r as f64 + 1.0);
            events.push(StructuredEvent { round: r, phase: Phase::FitAgg, loss: Some(loss), accuracy: None, num_results: 3 });
            let (l, a, n) = if broken { (None, None, 0) } else { (Some(loss), Some(0.5), 3) };
            events.push(StructuredEvent { round: r, phase: Phase::EvalAgg, loss: l, accuracy: a, num_results: n });
            events.push(StructuredEvent { round: r, phase: Phase::CentralEval, loss: Some(loss), accuracy: Some(0.5), num_results: 0 });
        }
        Ok(SimulationLog {
            run_handle: req.run_handle.clone(),
            return_code: 0,
            stdout: "done\n".into(),
            stderr: String::new(),
            events,
            wall_time_ms: 1,
            timed_out: false,
            malformed_event_lines: vec![],
        })
    }
}

fn orch(home: &Path) -> Orchestrator {
    Orchestrator::new(RunStore::new(home))
        .with_checker(Arc::new(GrammarChecker))
        .with_sandbox(Arc::new(KeyedSandbox))
}

/// The Q5 transcript with `broken` debugger replies that keep strategy.py
/// failing before the one that fixes it (`fix = false` leaves it failing).
fn transcript(dir: &Path, broken: usize, fix: bool) -> PathBuf {
    let out = dir.join("transcript");
    std::fs::create_dir_all(&out).unwrap();
    for e in std::fs::read_dir(q5_dir()).unwrap() {
        let e = e.unwrap();
        let name = e.file_name().to_string_lossy().into_owned();
        if !name.starts_with("debugger.") {
            std::fs::copy(e.path(), out.join(name)).unwrap();
        }
    }
    let mut n = 0;
    for k in 0..broken {
        n += 1;
        let src = format!("{}\n# revision {k}\n", zero_results_strategy());
        std::fs::write(out.join(format!("debugger.{n}.txt")), format!("FILE: strategy.py\n```python\n{src}```\n")).unwrap();
    }
    if fix {
        n += 1;
        std::fs::write(out.join(format!("debugger.{n}.txt")), format!("FILE: strategy.py\n```python\n{TOY_STRATEGY}```\n"))
            .unwrap();
    }
    out
}

fn kinds_of(events: &[RunEvent]) -> Vec<&str> {
    events.iter().map(|e| e.kind.as_str()).collect()
}

fn position(events: &[RunEvent], kind: &str) -> usize {
    events.iter().position(|e| e.kind == kind).unwrap_or_else(|| panic!("no {kind}"))
}

#[test]
fn q5_scripted_reaches_certified() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orch(tmp.path());
    let id = o.start_run("Q5", RunSettings::scripted(q5_dir())).unwrap();
    let snap = o.run_scripted(&id).unwrap();
    assert_eq!(snap.phase, RunPhase::Certified, "{:?}", snap.last_error);
    assert!(snap.is_certified());
    let events = o.events_since(&id, 1).unwrap();
    assert_eq!(kinds_of(&events)[..2], [kinds::RUN_CREATED, kinds::PLAN_DRAFTING]);
    assert_eq!(snap.iterations.len(), 2);
    assert_eq!(snap.iterations[0].patch.as_ref().unwrap().files, vec!["strategy.py"]);
}

#[test]
fn phases_never_skip() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orch(tmp.path());
    let id = o.start_run("Q5", RunSettings::scripted(transcript(tmp.path(), 2, true))).unwrap();
    assert_eq!(o.run_scripted(&id).unwrap().phase, RunPhase::Certified);
    let events = o.events_since(&id, 1).unwrap();
    let approved = position(&events, kinds::PLAN_APPROVED);
    let first_stable = position(&events, kinds::MODULE_STABLE);
    let first_sim = position(&events, kinds::SIM_FINISHED);
    assert!(approved < first_stable && first_stable < first_sim);
    let last_stable = events.iter().rposition(|e| e.kind == kinds::MODULE_STABLE).unwrap();
    assert!(last_stable < first_sim);
}

#[test]
fn replay_reconstructs_every_prefix() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orch(tmp.path());
    let id = o.start_run("Q5", RunSettings::scripted(transcript(tmp.path(), 1, true))).unwrap();
    let snap = o.run_scripted(&id).unwrap();
    let from_disk = read_event_log(&o.run_dir(&id).unwrap().join(EVENTS_FILE)).unwrap();
    assert_eq!(RunSnapshot::replay(&from_disk).unwrap(), snap);
    let seqs: Vec<u64> = from_disk.iter().map(|e| e.seq).collect();
    assert_eq!(seqs, (1..=from_disk.len() as u64).collect::<Vec<_>>());
    for n in 1..=from_disk.len() {
        RunSnapshot::replay(&from_disk[..n]).unwrap();
    }
}

fn events_file(o: &Orchestrator, id: &str) -> String {
    std::fs::read_to_string(o.run_dir(id).unwrap().join(EVENTS_FILE)).unwrap()
}

#[test]
fn crash_at_any_seq_then_resume_matches_clean_run() {
    let clean_home = tempfile::tempdir().unwrap();
    let script = transcript(clean_home.path(), 4, true);
    let clean = orch(clean_home.path());
    let id = clean.start_run("Q5", RunSettings::scripted(&script)).unwrap();
    let snap = clean.run_scripted(&id).unwrap();
    assert_eq!(snap.phase, RunPhase::Certified);
    assert_eq!(snap.iterations.len(), 6);
    let golden = events_file(&clean, &id);
    let total = golden.lines().count() as u64;

    for halt in 2..total {
        let home = tempfile::tempdir().unwrap();
        let first = orch(home.path());
        let rid = first.start_run("Q5", RunSettings::scripted(&script)).unwrap();
        assert_eq!(rid, id);
        first.set_halt_after(&rid, Some(halt)).unwrap();
        assert!(matches!(first.run_scripted(&rid), Err(OrchestratorError::Halted(h)) if h == halt));
        drop(first);

        let second = orch(home.path());
        second.resume(&rid).unwrap();
        let snap = second.run_scripted(&rid).unwrap();
        assert_eq!(snap.phase, RunPhase::Certified, "halt {halt}");
        assert_eq!(events_file(&second, &rid), golden, "halt {halt}");
    }
}

#[test]
fn kill_during_evaluation_at_four_keeps_history_prefix() {
    let home = tempfile::tempdir().unwrap();
    let script = transcript(home.path(), 6, true);
    let first = orch(home.path());
    let id = first.start_run("Q5", RunSettings::scripted(&script)).unwrap();
    first.run_scripted(&id).unwrap_or_else(|_| unreachable!());
    let events = first.events_since(&id, 1).unwrap();
    let into_four = events
        .iter()
        .find(|e| e.kind == kinds::PATCH_APPLIED && e.payload["iteration"] == 4)
        .unwrap()
        .seq;

    let home2 = tempfile::tempdir().unwrap();
    let script2 = transcript(home2.path(), 6, true);
    let a = orch(home2.path());
    let id2 = a.start_run("Q5", RunSettings::scripted(&script2)).unwrap();
    a.set_halt_after(&id2, Some(into_four)).unwrap();
    assert!(a.run_scripted(&id2).is_err());
    let before = a.snapshot(&id2).unwrap();
    assert_eq!(before.phase, RunPhase::Evaluating);
    assert_eq!(before.current_iteration, 4);
    let prefix = before.history();
    drop(a);

    let b = orch(home2.path());
    let after = b.resume(&id2).unwrap();
    assert_eq!(after.phase, RunPhase::Certified);
    assert_eq!(after.history()[..4], prefix[..]);
    assert_eq!(events_file(&b, &id2), events_file(&first, &id));
}

#[test]
fn t_max_exhausts_with_ten_patches() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orch(tmp.path());
    let id = o.start_run("Q5", RunSettings::scripted(transcript(tmp.path(), 10, false))).unwrap();
    let snap = o.run_scripted(&id).unwrap();
    assert_eq!(snap.phase, RunPhase::Exhausted);
    let events = o.events_since(&id, 1).unwrap();
    assert_eq!(events.iter().filter(|e| e.kind == kinds::PATCH_APPLIED).count(), 10);
    assert_eq!(events.iter().filter(|e| e.kind == kinds::DIAGNOSIS).count(), 11);
    assert_eq!(snap.history().len(), 11);
    assert_eq!(events.last().unwrap().payload["attempts"], 10);
    let dir = o.run_dir(&id).unwrap();
    for i in 0..=10 {
        assert!(dir.join(format!("iterations/{i}/diagnosis.json")).is_file());
    }
    assert!(!dir.join("iterations/11").exists());
}

#[test]
fn exhausted_run_can_be_replanned() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orch(tmp.path());
    let mut settings = RunSettings::scripted(transcript(tmp.path(), 2, false));
    settings.t_max = 2;
    let id = o.start_run("Q5", settings).unwrap();
    assert_eq!(o.run_scripted(&id).unwrap().phase, RunPhase::Exhausted);
    assert!(o.decide(&id, DecisionRequest::new("approve")).is_err());
    let out = o.decide(&id, DecisionRequest::new("replan").with_feedback("try FedProx")).unwrap();
    let child = out.new_run_id.unwrap();
    assert_ne!(child, id);
    assert_eq!(out.snapshot.replanned_as.as_deref(), Some(child.as_str()));
    let meta = o.meta(&child).unwrap();
    assert_eq!(meta.parent_run.as_deref(), Some(id.as_str()));
    assert!(meta.prior_context.unwrap().contains("try FedProx"));
    let child_snap = o.snapshot(&child).unwrap();
    assert_eq!(child_snap.phase, RunPhase::Planning);
    assert_eq!(child_snap.parent_run.as_deref(), Some(id.as_str()));
}

#[test]
fn resume_of_certified_run_is_noop() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orch(tmp.path());
    let id = o.start_run("Q5", RunSettings::scripted(q5_dir())).unwrap();
    o.run_scripted(&id).unwrap();
    let before = events_file(&o, &id);
    let again = orch(tmp.path());
    assert_eq!(again.resume(&id).unwrap().phase, RunPhase::Certified);
    assert_eq!(events_file(&again, &id), before);
}

#[test]
fn corrupted_events_name_first_bad_seq() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orch(tmp.path());
    let id = o.start_run("Q5", RunSettings::scripted(q5_dir())).unwrap();
    o.run_scripted(&id).unwrap();
    let path = o.run_dir(&id).unwrap().join(EVENTS_FILE);
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[4] = "{\"seq\": 5, garbage";
    std::fs::write(&path, lines.join("\n") + "\n").unwrap();
    let fresh = orch(tmp.path());
    match fresh.resume(&id) {
        Err(OrchestratorError::Integrity(e)) => {
            assert_eq!(e.first_bad_seq(), Some(5));
            assert!(e.to_string().contains("seq 5"));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn unknown_query_and_config_snapshot() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orch(tmp.path());
    assert!(matches!(o.start_run("Q99", RunSettings::default()), Err(OrchestratorError::UnknownQuery(_))));
    let id = o.start_run("Q16", RunSettings { t_max: 10, ..RunSettings::default() }).unwrap();
    let snap = o.snapshot(&id).unwrap();
    assert_eq!(snap.config["t_max"], 10);
    assert_eq!(snap.query_id, "Q16");
    assert_eq!(snap.phase, RunPhase::Planning);
}

#[test]
fn revise_then_approve_second_version() {
    let tmp = tempfile::tempdir().unwrap();
    let script = transcript(tmp.path(), 0, true);
    std::fs::copy(script.join("planner.2.txt"), script.join("planner.3.txt")).unwrap();
    std::fs::copy(script.join("reflector.1.txt"), script.join("reflector.2.txt")).unwrap();
    std::fs::write(script.join("user.1.txt"), "{\"decision\": \"revise\", \"feedback\": \"use 20 clients\"}").unwrap();
    std::fs::write(script.join("user.2.txt"), "{\"decision\": \"approve\", \"note\": \"ok\"}").unwrap();
    let o = orch(tmp.path());
    let id = o.start_run("Q5", RunSettings::scripted(&script)).unwrap();
    let snap = o.run_scripted(&id).unwrap();
    assert_eq!(snap.phase, RunPhase::Certified);
    assert_eq!(snap.approved_version, Some(2));
    assert_eq!(snap.plans.len(), 2);
    let events = o.events_since(&id, 1).unwrap();
    assert!(position(&events, kinds::PLAN_REVISING) < position(&events, kinds::PLAN_APPROVED));
    assert!(o.run_dir(&id).unwrap().join("plan.v2.md").is_file());
}

#[test]
fn decisions_are_validated() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orch(tmp.path());
    let id = o.start_run("Q5", RunSettings::scripted(q5_dir())).unwrap();
    assert!(o.decide(&id, DecisionRequest::new("approve")).is_err());
    let snap = o.drive(&id).unwrap();
    assert_eq!(snap.planning_state.as_deref(), Some("AwaitingUser"));
    assert!(o.decide(&id, DecisionRequest::new("revise")).is_err());
    assert!(o.decide(&id, DecisionRequest::new("ship-it")).is_err());
    let out = o.decide(&id, DecisionRequest::new("abandon")).unwrap();
    assert_eq!(out.snapshot.phase, RunPhase::Abandoned);
    assert_eq!(out.snapshot.planning_state.as_deref(), Some("Abandoned"));
    assert!(o.decide(&id, DecisionRequest::new("abandon")).is_err());
}

#[test]
fn missing_backend_is_recorded_not_fatal() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orch(tmp.path());
    let id = o.start_run("Q5", RunSettings::scripted(tmp.path().join("nowhere"))).unwrap();
    let snap = o.drive(&id).unwrap();
    assert_eq!(snap.phase, RunPhase::Planning);
    assert!(snap.last_error.is_some());
}

#[test]
fn concurrent_runs_use_distinct_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orch(tmp.path());
    let ids: Vec<String> = std::thread::scope(|s| {
        let hs: Vec<_> = (0..4)
            .map(|_| {
                s.spawn(|| {
                    let id = o.start_run("Q5", RunSettings::scripted(q5_dir())).unwrap();
                    assert_eq!(o.run_scripted(&id).unwrap().phase, RunPhase::Certified);
                    id
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let dirs: std::collections::BTreeSet<PathBuf> = ids.iter().map(|id| o.run_dir(id).unwrap()).collect();
    assert_eq!(dirs.len(), 4);
}

#[test]
fn iteration_files_are_whitelisted() {
    let tmp = tempfile::tempdir().unwrap();
    let o = orch(tmp.path());
    let id = o.start_run("Q5", RunSettings::scripted(q5_dir())).unwrap();
    o.run_scripted(&id).unwrap();
    assert_eq!(o.iteration_file(&id, 1, "strategy.py").unwrap(), TOY_STRATEGY.trim_end().as_bytes());
    assert!(o.iteration_file(&id, 0, "diagnosis.json").is_ok());
    assert!(o.iteration_file(&id, 0, "log.stdout").is_ok());
    assert!(matches!(o.iteration_file(&id, 0, "../run.json"), Err(OrchestratorError::NotFound(_))));
    assert!(matches!(o.iteration_file(&id, 7, "task.py"), Err(OrchestratorError::NotFound(_))));
}

#[test]
fn background_drive_and_follow() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Arc::new(orch(tmp.path()));
    let id = o.start_run("Q5", RunSettings::scripted(q5_dir())).unwrap();
    o.spawn_drive(&id).unwrap();
    let mut seen = 0;
    while seen < 5 {
        let batch = o.wait_events(&id, seen + 1, Duration::from_secs(10)).unwrap();
        assert!(!batch.is_empty());
        seen = batch.last().unwrap().seq;
    }
    o.decide(&id, DecisionRequest::new("approve")).unwrap();
    o.spawn_drive(&id).unwrap();
    loop {
        let batch = o.wait_events(&id, seen + 1, Duration::from_secs(10)).unwrap();
        assert!(!batch.is_empty(), "stalled after seq {seen}");
        seen = batch.last().unwrap().seq;
        if batch.iter().any(|e| e.kind == kinds::RUN_CERTIFIED) {
            break;
        }
    }
}
