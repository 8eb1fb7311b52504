use std::path::Path;
use std::process::{Command, Output};

use foam_core::config::{ExperimentConfig, Testbed};

fn foam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_foam"))
        .args(args)
        .output()
        .expect("spawn foam")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, cfg.to_json().unwrap()).unwrap();
    p.to_string_lossy().into_owned()
}

fn small_book() -> ExperimentConfig {
    let mut c = ExperimentConfig::desk();
    c.optimizer.batch_size = 64;
    c.optimizer.episode_len = 16;
    c.optimizer.iterations = 2;
    c.policy.hidden = vec![8];
    c.eval.horizon = 64;
    c.eval.every = 1;
    c.eval.lipschitz_pairs = 50;
    c
}

#[test]
fn stability_grid_is_csv() {
    let o = foam(&["stability", "--grid", "kp=0:1:3,ki=0.1:0.5:2"]);
    assert!(o.status.success());
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "kp,ki,kd,jury_stable,validate_gains,boundary_distance");
    assert_eq!(lines.len(), 1 + 6);
    // kp=0.5, ki=0.1 has poles 0.2 and -0.5.
    assert!(lines.iter().any(|l| l.starts_with("0.5,0.1,0,true,true,")), "{text}");
}

#[test]
fn malformed_grid_is_an_error() {
    let o = foam(&["stability", "--grid", "kp=0:1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn oracle_sweep_passes() {
    let o = foam(&["oracle-qp", "--instances", "40", "--seed", "3"]);
    assert!(o.status.success(), "{}", stdout(&o));
    assert_eq!(stdout(&o).lines().last(), Some("PASS"));
}

#[test]
fn train_then_audit_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_book());
    let run = tmp.path().join("runs").join("foam").join("seed_0");
    let run_s = run.to_string_lossy().into_owned();
    let o = foam(&["train", "-c", &cfg, "-o", &run_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("\"cvf\""));

    let batch = run.join("settlement_0.bin").to_string_lossy().into_owned();
    let prefix = tmp.path().join("c0").to_string_lossy().into_owned();
    assert!(foam(&["audit", "commit", &batch, &prefix]).status.success());
    let record = format!("{prefix}.bin");
    let sidecar = format!("{prefix}.json");
    assert_eq!(
        std::fs::read(&record).unwrap(),
        std::fs::read(run.join("commitment_0.bin")).unwrap()
    );

    let o = foam(&["audit", "verify", &batch]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).trim(), "ok");
    let o = foam(&["audit", "challenge", &record, &sidecar, &batch]);
    assert_eq!(stdout(&o).trim(), "rejected");
    let o = foam(&["audit", "replay", &record, &sidecar, &batch]);
    assert_eq!(stdout(&o).trim(), "consistent");

    let mut tampered = std::fs::read(&batch).unwrap();
    let last = tampered.len() - 1;
    tampered[last] ^= 1;
    let bad = tmp.path().join("bad.bin");
    std::fs::write(&bad, tampered).unwrap();
    let o = foam(&["audit", "challenge", &record, &sidecar, &bad.to_string_lossy()]);
    assert!(stdout(&o).starts_with("upheld"), "{}", stdout(&o));

    let root = tmp.path().join("runs").to_string_lossy().into_owned();
    let o = foam(&["report", &root]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("foam"));
    assert!(tmp.path().join("runs/report/aggregate.csv").is_file());
}

#[test]
fn ablate_writes_one_directory_per_run() {
    let tmp = tempfile::tempdir().unwrap();
    let mut c = ExperimentConfig::desk();
    c.testbed = Testbed::DriftBandit;
    c.optimizer.episode_len = 1;
    c.optimizer.batch_size = 64;
    c.optimizer.iterations = 3;
    c.policy.hidden = vec![8];
    let cfg = write_config(tmp.path(), &c);
    let out = tmp.path().join("abl");
    let out_s = out.to_string_lossy().into_owned();
    let o = foam(&[
        "ablate",
        "-c",
        &cfg,
        "--variants",
        "foam,lagrangian",
        "--seeds",
        "2",
        "-o",
        &out_s,
        "--jobs",
        "2",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for v in ["foam", "lagrangian"] {
        for s in 0..2 {
            assert!(out.join(v).join(format!("seed_{s}")).join("metrics.json").is_file());
        }
    }
    let per_seed = std::fs::read_to_string(out.join("report/per_seed.csv")).unwrap();
    assert_eq!(per_seed.lines().count(), 1 + 4);
}

#[test]
fn unknown_variant_is_rejected() {
    let o = foam(&["ablate", "--variants", "nonsense", "--seeds", "1"]);
    assert!(!o.status.success());
}
