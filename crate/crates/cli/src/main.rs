use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use foam_core::audit::{
    challenge, commit, open_replay, verify_conservation, ChallengeOutcome, CommitmentSidecar, Conservation, Evidence,
    ReplayOutcome, SettlementBatch, SettlementCommitment,
};
use foam_core::baselines::{make_variant, VariantName};
use foam_core::config::ExperimentConfig;
use foam_core::control::{boundary_distance, jury_stable};
use foam_core::outer_loop::{validate_gains, PidGains};
use foam_core::qp_oracle::run_equivalence;
use foam_core::report::write_report;
use foam_core::trainer::train;
use foam_core::{FoamError, Result};

#[derive(Parser)]
#[command(name = "foam", version, about = "Fair order allocation with adaptive safety margins")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its artifacts.
    Train {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(short, long, default_value = "runs/train")]
        out: PathBuf,
    },
    /// Run variants over seeds, then aggregate.
    Ablate {
        /// Base configuration; the desk preset when omitted.
        #[arg(short, long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "foam,foam_no_pid,lagrangian")]
        variants: Vec<String>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(short, long, default_value = "runs/ablate")]
        out: PathBuf,
        /// Worker threads; all cores when omitted.
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Tabulate PI stability over a gain grid as CSV.
    Stability {
        /// `kp=lo:hi:n,ki=lo:hi:n`
        #[arg(long, default_value = "kp=-1:2:50,ki=-0.5:4.5:50")]
        grid: String,
        #[arg(long, default_value_t = 0.0)]
        kd: f64,
    },
    /// Settlement commitments.
    Audit {
        #[command(subcommand)]
        verb: AuditVerb,
    },
    /// Aggregate run directories.
    Report {
        dir: PathBuf,
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Compare the dual solver against a brute-force primal solver.
    OracleQp {
        #[arg(long, default_value_t = 500)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum AuditVerb {
    /// Writes `<prefix>.bin` (108-byte record) and `<prefix>.json`.
    Commit { batch: PathBuf, prefix: PathBuf },
    /// Exact fund-conservation check.
    Verify { batch: PathBuf },
    Challenge {
        record: PathBuf,
        sidecar: PathBuf,
        batch: PathBuf,
    },
    Replay {
        record: PathBuf,
        sidecar: PathBuf,
        batch: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let run = train(&cfg)?;
            run.write_artifacts(&out)?;
            println!("{}", serde_json::to_string_pretty(&run.metrics)?);
            for t in &run.tags {
                println!("tag: {t}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Ablate {
            config,
            variants,
            seeds,
            out,
            jobs,
        } => ablate(config.as_deref(), &variants, seeds, &out, jobs),
        Command::Stability { grid, kd } => stability(&grid, kd),
        Command::Audit { verb } => audit(verb),
        Command::Report { dir, out } => {
            let out = out.unwrap_or_else(|| dir.join("report"));
            let summaries = write_report(&dir, &out)?;
            for s in &summaries {
                println!(
                    "{:<18} runs={:<3} cvf={:.2}±{:.2} transient={:.1}±{:.1} crossings={:.1}",
                    s.variant,
                    s.runs,
                    s.mean["cvf"],
                    s.std["cvf"],
                    s.mean["transient_length"],
                    s.std["transient_length"],
                    s.mean["crossings"]
                );
            }
            println!("wrote {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::OracleQp { instances, seed } => {
            let rep = run_equivalence(instances, seed, 1e-5, 1e-10)?;
            println!(
                "{} instances: max objective gap {:e}, max violation {:e}, max natural-gradient gap {:e}",
                rep.instances, rep.max_objective_gap, rep.max_violation, rep.max_natural_gap
            );
            for f in &rep.failures {
                println!("  {f}");
            }
            println!("{}", if rep.passed() { "PASS" } else { "FAIL" });
            Ok(if rep.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn ablate(config: Option<&Path>, variants: &[String], seeds: u64, out: &Path, jobs: Option<usize>) -> Result<ExitCode> {
    let base = match config {
        Some(p) => ExperimentConfig::load(p)?,
        None => {
            let mut c = ExperimentConfig::desk();
            c.apply_env_overrides()?;
            c
        }
    };
    let variants = variants
        .iter()
        .map(|v| v.parse::<VariantName>())
        .collect::<Result<Vec<_>>>()?;
    let mut work = Vec::new();
    for v in &variants {
        for s in 0..seeds {
            let mut cfg = make_variant(&base, *v);
            cfg.seed = base.seed + s;
            work.push(cfg);
        }
    }
    let jobs = jobs
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        .max(1);
    let next = AtomicUsize::new(0);
    let errors = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(work.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(cfg) = work.get(i) else { break };
                let dir = out.join(cfg.variant.as_str()).join(format!("seed_{}", cfg.seed));
                let res = train(cfg).and_then(|r| r.write_artifacts(&dir));
                match res {
                    Ok(()) => eprintln!("done {} seed {}", cfg.variant, cfg.seed),
                    Err(e) => errors
                        .lock()
                        .expect("error list lock")
                        .push(format!("{} seed {}: {e}", cfg.variant, cfg.seed)),
                }
            });
        }
    });
    let errors = errors.into_inner().expect("error list lock");
    for e in &errors {
        eprintln!("error: {e}");
    }
    if !errors.is_empty() {
        return Ok(ExitCode::FAILURE);
    }
    write_report(out, &out.join("report"))?;
    println!("wrote {}", out.join("report").display());
    Ok(ExitCode::SUCCESS)
}

fn parse_axis(spec: &str) -> Result<(String, f64, f64, usize)> {
    let bad = || FoamError::InvalidConfig(format!("grid axis `{spec}` is not name=lo:hi:n"));
    let (name, range) = spec.split_once('=').ok_or_else(bad)?;
    let parts: Vec<&str> = range.split(':').collect();
    if parts.len() != 3 {
        return Err(bad());
    }
    let lo: f64 = parts[0].parse().map_err(|_| bad())?;
    let hi: f64 = parts[1].parse().map_err(|_| bad())?;
    let n: usize = parts[2].parse().map_err(|_| bad())?;
    if n < 2 {
        return Err(bad());
    }
    Ok((name.trim().to_string(), lo, hi, n))
}

fn stability(grid: &str, kd: f64) -> Result<ExitCode> {
    let axes = grid.split(',').map(parse_axis).collect::<Result<Vec<_>>>()?;
    let find = |name: &str| {
        axes.iter()
            .find(|a| a.0 == name)
            .cloned()
            .ok_or_else(|| FoamError::InvalidConfig(format!("grid needs a `{name}` axis")))
    };
    let (_, kp_lo, kp_hi, kp_n) = find("kp")?;
    let (_, ki_lo, ki_hi, ki_n) = find("ki")?;
    println!("kp,ki,kd,jury_stable,validate_gains,boundary_distance");
    for a in 0..kp_n {
        let kp = kp_lo + (kp_hi - kp_lo) * a as f64 / (kp_n - 1) as f64;
        for b in 0..ki_n {
            let ki = ki_lo + (ki_hi - ki_lo) * b as f64 / (ki_n - 1) as f64;
            let gains = PidGains { kp, ki, kd };
            println!(
                "{kp},{ki},{kd},{},{},{}",
                jury_stable(kp, ki),
                validate_gains(&gains).is_stable(),
                boundary_distance(kp, ki)
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn read_commitment(record: &Path, sidecar: &Path) -> Result<SettlementCommitment> {
    let rec = std::fs::read(record)?;
    let side: CommitmentSidecar = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
    SettlementCommitment::from_parts(&rec, &side)
}

fn audit(verb: AuditVerb) -> Result<ExitCode> {
    match verb {
        AuditVerb::Commit { batch, prefix } => {
            let b = SettlementBatch::from_bytes(&std::fs::read(&batch)?)?;
            let c = commit(&b)?;
            std::fs::write(prefix.with_extension("bin"), c.to_record()?)?;
            std::fs::write(
                prefix.with_extension("json"),
                serde_json::to_string_pretty(&c.sidecar())?,
            )?;
            println!("allocation_root {}", foam_core::audit::to_hex(&c.allocation_root));
            Ok(ExitCode::SUCCESS)
        }
        AuditVerb::Verify { batch } => {
            let b = SettlementBatch::from_bytes(&std::fs::read(&batch)?)?;
            match verify_conservation(&b) {
                Conservation::Ok => {
                    println!("ok");
                    Ok(ExitCode::SUCCESS)
                }
                Conservation::Violated { deficit } => {
                    println!("violated deficit={deficit}");
                    Ok(ExitCode::from(2))
                }
            }
        }
        AuditVerb::Challenge { record, sidecar, batch } => {
            let c = read_commitment(&record, &sidecar)?;
            match challenge(&c, &std::fs::read(&batch)?) {
                ChallengeOutcome::Rejected => println!("rejected"),
                ChallengeOutcome::Upheld(Evidence::Leaf { proof, .. }) => {
                    println!("upheld leaf {} ({} proof hashes)", proof.index, proof.siblings.len())
                }
                ChallengeOutcome::Upheld(Evidence::Field(f)) => println!("upheld field {f}"),
                ChallengeOutcome::Upheld(Evidence::Malformed(m)) => println!("upheld malformed: {m}"),
            }
            Ok(ExitCode::SUCCESS)
        }
        AuditVerb::Replay { record, sidecar, batch } => {
            let c = read_commitment(&record, &sidecar)?;
            let b = SettlementBatch::from_bytes(&std::fs::read(&batch)?)?;
            match open_replay(&c, &b.trades, &b.model_bytes) {
                ReplayOutcome::Consistent => println!("consistent"),
                ReplayOutcome::Inconsistent(why) => println!("inconsistent: {why}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
