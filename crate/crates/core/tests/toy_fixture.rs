use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use fedforge_core::eval::{parse_events, Phase, ProcessSandbox, Sandbox, SimRequest, EVENTS_FILE};
use fedforge_core::fixtures::{toy_codebase, TOY_LEARNING_RATE, TOY_LOCAL_EPOCHS, TOY_NUM_CLIENTS};

// Independent re-implementation of the fixture's arithmetic.
mod oracle {
    const A: u64 = 6364136223846793005;
    const C: u64 = 1442695040888963407;

    type Point = ([f64; 2], f64);

    fn points(seed: u64, n: usize) -> Vec<Point> {
        let mut s = seed;
        let mut u = || {
            s = A.wrapping_mul(s).wrapping_add(C);
            (s >> 11) as f64 / (1u64 << 53) as f64
        };
        (0..n)
            .map(|i| {
                let y = (i % 2) as f64;
                let c = if i % 2 == 1 { 1.0 } else { -1.0 };
                let x1 = c + (u() - 0.5) * 3.0;
                let x2 = c + (u() - 0.5) * 3.0;
                ([x1, x2], y)
            })
            .collect()
    }

    fn sigmoid(z: f64) -> f64 {
        if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            z.exp() / (1.0 + z.exp())
        }
    }

    fn loss_grad(p: &[f64; 3], data: &[Point]) -> (f64, [f64; 3]) {
        let mut loss = 0.0;
        let mut g = [0.0; 3];
        for (x, y) in data {
            let q = sigmoid(p[0] * x[0] + p[1] * x[1] + p[2]);
            loss -= y * (q + 1e-12).ln() + (1.0 - y) * (1.0 - q + 1e-12).ln();
            let d = q - y;
            g[0] += d * x[0];
            g[1] += d * x[1];
            g[2] += d;
        }
        let n = data.len() as f64;
        (loss / n, g.map(|v| v / n))
    }

    /// (fit_agg loss, central_eval loss) per round.
    pub fn run(seed: u64, rounds: usize, clients: usize, epochs: usize, lr: f64) -> Vec<(f64, f64)> {
        let shards: Vec<_> = (0..clients as u64)
            .map(|k| points(seed * 1000 + k * 10 + 1, 40))
            .collect();
        let central = points(seed * 1000 + 999, 60);
        let mut params = [0.0; 3];
        let mut out = Vec::new();
        for _ in 0..rounds {
            let mut agg = [0.0; 3];
            let mut fit_loss = 0.0;
            let mut total = 0.0;
            for shard in &shards {
                let mut p = params;
                let mut last = 0.0;
                for _ in 0..epochs {
                    let (l, g) = loss_grad(&p, shard);
                    last = l;
                    for k in 0..3 {
                        p[k] -= lr * g[k];
                    }
                }
                let n = shard.len() as f64;
                for k in 0..3 {
                    agg[k] += p[k] * n;
                }
                fit_loss += last * n;
                total += n;
            }
            params = agg.map(|v| v / total);
            out.push((fit_loss / total, loss_grad(&params, &central).0));
        }
        out
    }
}

fn simulate(dir: &Path, rounds: u32) -> fedforge_core::eval::SimulationLog {
    toy_codebase(&[]).write_to(&dir.join("code")).unwrap();
    ProcessSandbox::default()
        .simulate(&SimRequest {
            run_handle: "toy".into(),
            code_dir: dir.join("code"),
            artifacts_dir: dir.to_path_buf(),
            n_rounds: rounds,
            seed: 42,
        })
        .unwrap()
}

#[test]
fn toy_fixture_matches_oracle() {
    let tmp = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let log = simulate(tmp.path(), 5);
    assert!(started.elapsed() < Duration::from_secs(10));
    assert_eq!(log.return_code, 0, "{}", log.stderr);

    let fit = log.losses(Phase::FitAgg);
    let central = log.losses(Phase::CentralEval);
    assert_eq!(fit.len(), 5);
    assert_eq!(central.len(), 5);
    assert!(fit.windows(2).all(|w| w[1] < w[0]), "fit losses not strictly decreasing: {fit:?}");

    let expected = oracle::run(42, 5, TOY_NUM_CLIENTS, TOY_LOCAL_EPOCHS, TOY_LEARNING_RATE);
    for (r, ((f, c), (ef, ec))) in fit.iter().zip(&central).zip(&expected).enumerate() {
        // Events carry 6 decimals.
        assert!((f - ef).abs() <= 5e-7 + 1e-12, "round {}: fit {f} vs {ef}", r + 1);
        assert!((c - ec).abs() <= 5e-7 + 1e-12, "round {}: central {c} vs {ec}", r + 1);
    }
}

#[test]
fn sandbox_events_equal_direct_run() {
    let tmp = tempfile::tempdir().unwrap();
    let via_sandbox = simulate(tmp.path(), 5);
    let direct_dir = tmp.path().join("direct");
    toy_codebase(&[]).write_to(&direct_dir).unwrap();
    let status = Command::new("python3")
        .arg("run.py")
        .current_dir(&direct_dir)
        .env("FEDFORGE_EVENTS", direct_dir.join("out.jsonl"))
        .env("PYTHONDONTWRITEBYTECODE", "1")
        .output()
        .unwrap();
    assert!(status.status.success());
    let direct = std::fs::read_to_string(direct_dir.join("out.jsonl")).unwrap();
    let sandboxed = std::fs::read_to_string(tmp.path().join(EVENTS_FILE)).unwrap();
    assert_eq!(direct, sandboxed);
    assert_eq!(parse_events(&direct).events, via_sandbox.events);
}

#[test]
fn round_limit_truncates_stream() {
    let tmp = tempfile::tempdir().unwrap();
    let log = simulate(tmp.path(), 3);
    assert_eq!(log.completed_rounds(), 3);
    assert!(log.events.iter().all(|e| e.round <= 3));
}
