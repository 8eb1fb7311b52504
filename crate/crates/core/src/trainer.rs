//! The training loop: rollout, estimation, margin update, inner solve or
//! recovery, and policy update, plus run artifacts.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::audit::{commit, legs_from_fills, quantize, SettlementBatch, Trade};
use crate::baselines::{lagrangian_step, penalized_step, pid_lagrangian_step, rule_allocate, Algorithm, RuleKind};
use crate::config::{ExperimentConfig, Testbed};
use crate::env::{compute_market_metrics, Env, MarketSample};
use crate::error::{FoamError, Result};
use crate::estimator::{
    disturbance_bound, estimate_gradients, mean_kl, rollout, surrogate_costs, BookCmdp, Cmdp, GradientBundle,
    RolloutConfig, TrajectoryBatch,
};
use crate::fairness::lipschitz_violation_rate;
use crate::inner_loop::{
    apply_update, check_feasibility, recovery_step, solve_dual, DualStatus, RecoveryStatus, SubproblemSpec,
};
use crate::metrics::{measured_dp_gap, ConstraintTrace, RunMetrics};
use crate::outer_loop::{violation_energy, MarginState};
use crate::policy::Policy;
use crate::testbed::{AnalyticBandit, BanditInstance, DriftBandit};

pub const UNSTABLE_GAINS_TAG: &str = "unstable-gains";

/// Mean-policy evaluation of one policy.
#[derive(Debug, Clone, Default)]
pub struct Evaluation {
    pub reward: f64,
    /// Same units as the training cost estimates.
    pub costs: Vec<f64>,
    pub dp_pairs: Vec<(u8, f64)>,
    pub market: Vec<MarketSample>,
    pub features: Vec<Vec<f64>>,
    pub trades: Vec<Trade>,
    pub state_snapshot: Vec<u8>,
}

/// What the trainer needs from a testbed.
pub trait Oracle {
    fn num_constraints(&self) -> usize;
    fn estimate(&mut self, policy: &Policy, rng: &mut ChaCha8Rng) -> Result<GradientBundle>;
    /// Cost estimates for a candidate, from the last estimate's data.
    fn candidate_costs(&self, candidate: &Policy) -> Result<Vec<f64>>;
    fn kl(&self, old: &Policy, new: &Policy) -> Result<f64>;
    fn evaluate(&self, policy: &Policy) -> Result<Evaluation>;
    /// Worst-constraint disturbance bound for the last batch, when defined.
    fn disturbance(&self) -> Option<f64> {
        None
    }
    fn end_iteration(&mut self) {}
}

/// Discounted episode sums over consecutive `episode_len` chunks, averaged.
fn chunked_returns(rewards: &[f64], costs: &[Vec<f64>], episode_len: usize, gamma: f64) -> (f64, Vec<f64>) {
    let m = costs.first().map_or(0, Vec::len);
    let mut jr = 0.0;
    let mut jc = vec![0.0; m];
    let mut episodes = 0usize;
    for (r, c) in rewards.chunks(episode_len).zip(costs.chunks(episode_len)) {
        let mut w = 1.0;
        for (rt, ct) in r.iter().zip(c) {
            jr += w * rt;
            for (acc, v) in jc.iter_mut().zip(ct) {
                *acc += w * v;
            }
            w *= gamma;
        }
        episodes += 1;
    }
    let e = episodes.max(1) as f64;
    (jr / e, jc.into_iter().map(|v| v / e).collect())
}

/// Testbeds that evaluate a mean policy without consuming training data.
pub trait Evaluate {
    fn evaluate_mean(&self, policy: &Policy, cfg: &ExperimentConfig) -> Result<Evaluation>;
}

impl Evaluate for BookCmdp {
    /// Runs a copy of the book; the training stream is untouched.
    fn evaluate_mean(&self, policy: &Policy, cfg: &ExperimentConfig) -> Result<Evaluation> {
        let mut book = self.clone();
        let state_snapshot = serde_json::to_vec(book.env.state())?;
        let h = cfg.eval.horizon;
        let mut ev = Evaluation {
            state_snapshot,
            ..Evaluation::default()
        };
        let mut rewards = Vec::with_capacity(h);
        let mut costs = Vec::with_capacity(h);
        for _ in 0..h {
            let x = book.observe();
            let order = book.pending().cloned().ok_or(FoamError::Empty("pending order"))?;
            let a = policy.forward(&x)?;
            let out = book.env.step(&order, &a)?;
            ev.dp_pairs.push((order.group, out.fill_mass));
            ev.market.push(MarketSample {
                spread_bps: out.spread_bps,
                depth5: out.depth5,
                fill_mass: out.fill_mass,
                order_size: order.size,
            });
            ev.trades.push(Trade {
                order_id: order.arrival_time,
                group: order.group,
                qualified: out.qualified,
                features: x.clone(),
                allocation: a.iter().map(|v| quantize(*v)).collect(),
                fill_mass: quantize(out.fill_mass),
                legs: legs_from_fills(&out.fills),
            });
            ev.features.push(x);
            rewards.push(out.reward);
            costs.push(out.costs);
        }
        let (r, c) = chunked_returns(&rewards, &costs, cfg.optimizer.episode_len, cfg.optimizer.gamma);
        ev.reward = r;
        ev.costs = c;
        Ok(ev)
    }
}

impl Evaluate for DriftBandit {
    /// Exact expected one-step reward and costs at the current drift.
    fn evaluate_mean(&self, policy: &Policy, _cfg: &ExperimentConfig) -> Result<Evaluation> {
        let (reward, costs) = self.expected(policy)?;
        Ok(Evaluation {
            reward,
            costs,
            features: self.instance.contexts.clone(),
            ..Evaluation::default()
        })
    }
}

/// Estimates from sampled rollouts.
pub struct SampledOracle<C> {
    pub cmdp: C,
    cfg: ExperimentConfig,
    last: Option<TrajectoryBatch>,
}

impl<C: Cmdp + Evaluate> SampledOracle<C> {
    pub fn new(cmdp: C, cfg: &ExperimentConfig) -> Self {
        Self {
            cmdp,
            cfg: cfg.clone(),
            last: None,
        }
    }

    fn batch(&self) -> Result<&TrajectoryBatch> {
        self.last.as_ref().ok_or(FoamError::Empty("no batch collected yet"))
    }
}

impl<C: Cmdp + Evaluate> Oracle for SampledOracle<C> {
    fn num_constraints(&self) -> usize {
        self.cmdp.num_constraints()
    }

    fn estimate(&mut self, policy: &Policy, rng: &mut ChaCha8Rng) -> Result<GradientBundle> {
        let o = &self.cfg.optimizer;
        let rc = RolloutConfig {
            horizon: o.batch_size,
            episode_len: o.episode_len,
            gamma: o.gamma,
            gae_lambda: o.gae_lambda,
            temperature: o.temperature,
        };
        let batch = rollout(policy, &mut self.cmdp, &rc, rng)?;
        let bundle = estimate_gradients(policy, &batch, &o.estimator)?;
        self.last = Some(batch);
        Ok(bundle)
    }

    fn candidate_costs(&self, candidate: &Policy) -> Result<Vec<f64>> {
        surrogate_costs(candidate, self.batch()?, &self.cfg.optimizer.estimator)
    }

    fn kl(&self, old: &Policy, new: &Policy) -> Result<f64> {
        mean_kl(old, new, self.batch()?)
    }

    fn evaluate(&self, policy: &Policy) -> Result<Evaluation> {
        self.cmdp.evaluate_mean(policy, &self.cfg)
    }

    fn disturbance(&self) -> Option<f64> {
        let o = &self.cfg.optimizer;
        let b = self.last.as_ref()?;
        if b.num_constraints() == 0 {
            return None;
        }
        disturbance_bound(b, o.delta, o.zeta, &o.disturbance)
            .ok()
            .map(|d| d.w_max)
    }
}

/// Exact expectations on the noise-free bandit.
pub struct AnalyticOracle {
    pub bandit: AnalyticBandit,
    cfg: ExperimentConfig,
}

impl AnalyticOracle {
    pub fn new(bandit: AnalyticBandit, cfg: &ExperimentConfig) -> Self {
        Self {
            bandit,
            cfg: cfg.clone(),
        }
    }
}

impl Oracle for AnalyticOracle {
    fn num_constraints(&self) -> usize {
        self.bandit.instance.num_constraints()
    }

    fn estimate(&mut self, policy: &Policy, _rng: &mut ChaCha8Rng) -> Result<GradientBundle> {
        let e = &self.cfg.optimizer.estimator;
        self.bandit.gradients(policy, e.damping, e.cg.into())
    }

    fn candidate_costs(&self, candidate: &Policy) -> Result<Vec<f64>> {
        Ok(self.bandit.expected(candidate)?.1)
    }

    fn kl(&self, old: &Policy, new: &Policy) -> Result<f64> {
        self.bandit.kl(old, new)
    }

    fn evaluate(&self, policy: &Policy) -> Result<Evaluation> {
        let (reward, costs) = self.bandit.expected(policy)?;
        Ok(Evaluation {
            reward,
            costs,
            features: self.bandit.instance.contexts.clone(),
            ..Evaluation::default()
        })
    }

    fn end_iteration(&mut self) {
        self.bandit.advance();
    }
}

/// One JSON-lines log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub j_r: f64,
    /// Training estimates of the constraint costs.
    pub j_c: Vec<f64>,
    pub d: Vec<f64>,
    pub xi: Vec<f64>,
    /// `d - j_c - xi`.
    pub kappa: Vec<f64>,
    pub status: String,
    pub dual_solved: bool,
    pub recovery_invoked: bool,
    pub recovery_status: Option<RecoveryStatus>,
    pub lambda: Option<f64>,
    /// Dual multipliers, Lagrangian multipliers or PID multipliers.
    pub nu: Vec<f64>,
    pub kl: f64,
    pub halvings: usize,
    pub reverted: bool,
    pub cusum_reset: Vec<bool>,
    pub w_max: Option<f64>,
    /// Mean-policy evaluation at the start of the iteration.
    pub eval_reward: f64,
    pub eval_costs: Vec<f64>,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: ExperimentConfig,
    pub records: Vec<IterationRecord>,
    /// Mean-policy cost trace with the margins in force.
    pub trace: ConstraintTrace,
    pub metrics: RunMetrics,
    pub policy_bytes: Option<Vec<u8>>,
    pub settlements: Vec<SettlementBatch>,
    pub tags: Vec<String>,
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Runs one experiment.
pub fn train(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    match (cfg.flags.algorithm, cfg.testbed) {
        (Algorithm::Rule(kind), Testbed::Book) => run_rule(cfg, kind),
        (Algorithm::Rule(_), _) => Err(FoamError::InvalidConfig(
            "rule-based variants run on the book testbed only".into(),
        )),
        (_, Testbed::Book) => {
            let env = Env::new(cfg.env.clone(), cfg.seed, cfg.regime)?;
            run_learned(cfg, SampledOracle::new(BookCmdp::new(env), cfg))
        }
        (_, Testbed::DriftBandit) => {
            let inst = BanditInstance::generate(&cfg.bandit, cfg.seed)?;
            let bandit = DriftBandit::new(inst, &cfg.bandit, cfg.optimizer.batch_size, cfg.seed)?;
            run_learned(cfg, SampledOracle::new(bandit, cfg))
        }
        (_, Testbed::AnalyticBandit) => {
            let inst = BanditInstance::generate(&cfg.bandit, cfg.seed)?;
            let bandit = AnalyticBandit::new(inst, cfg.optimizer.temperature);
            run_learned(cfg, AnalyticOracle::new(bandit, cfg))
        }
    }
}

fn run_tags(cfg: &ExperimentConfig) -> Vec<String> {
    if cfg.gain_validation().is_stable() {
        Vec::new()
    } else {
        vec![UNSTABLE_GAINS_TAG.to_string()]
    }
}

struct StepResult {
    status: String,
    dual_solved: bool,
    recovery_invoked: bool,
    recovery_status: Option<RecoveryStatus>,
    lambda: Option<f64>,
    nu: Vec<f64>,
    kl: f64,
    halvings: usize,
    reverted: bool,
}

impl StepResult {
    fn plain(status: &str, nu: Vec<f64>) -> Self {
        Self {
            status: status.to_string(),
            dual_solved: false,
            recovery_invoked: false,
            recovery_status: None,
            lambda: None,
            nu,
            kl: 0.0,
            halvings: 0,
            reverted: false,
        }
    }
}

fn dual_status_name(s: DualStatus) -> &'static str {
    match s {
        DualStatus::Feasible => "feasible",
        DualStatus::InfeasibleRecovery => "infeasible_recovery",
        DualStatus::Degenerate => "degenerate",
    }
}

/// Replaces the policy by a plain-gradient candidate, projected when the
/// variant projects.
fn adopt<O: Oracle>(policy: &mut Policy, mut next: Policy, spectral: bool, oracle: &O) -> Result<f64> {
    if spectral {
        next.spectral_project();
    }
    let kl = oracle.kl(policy, &next)?;
    *policy = next;
    Ok(kl)
}

struct Learner {
    margins: MarginState,
    pid: MarginState,
    nu: Vec<f64>,
}

fn foam_step<O: Oracle>(
    cfg: &ExperimentConfig,
    policy: &mut Policy,
    oracle: &O,
    bundle: &GradientBundle,
    d: &[f64],
    xi: &[f64],
    kappa: &[f64],
) -> Result<StepResult> {
    let flags = cfg.flags;
    let o = &cfg.optimizer;
    if !flags.trust_region {
        let next = penalized_step(policy, bundle, d, xi, o.penalty, o.lr_theta)?;
        let kl = adopt(policy, next, flags.spectral, oracle)?;
        return Ok(StepResult {
            kl,
            ..StepResult::plain("penalized", Vec::new())
        });
    }
    let (b, kappa) = if flags.constrained {
        (bundle.b.clone(), kappa.to_vec())
    } else {
        (DMatrix::zeros(0, bundle.g.len()), Vec::new())
    };
    let spec = SubproblemSpec {
        g: bundle.g.clone(),
        b,
        fisher: &bundle.fisher,
        kappa,
        delta: o.delta,
    };
    let feasible = check_feasibility(&spec)?.feasible;
    let solution = if feasible { Some(solve_dual(&spec)?) } else { None };
    match solution {
        Some(sol) if sol.status != DualStatus::InfeasibleRecovery => {
            let rep = apply_update(policy, &sol.delta_theta, o.delta, flags.spectral, |a, b| {
                oracle.kl(a, b)
            })?;
            Ok(StepResult {
                status: dual_status_name(sol.status).to_string(),
                dual_solved: true,
                recovery_invoked: false,
                recovery_status: None,
                lambda: Some(sol.lambda),
                nu: sol.nu,
                kl: rep.kl,
                halvings: rep.halvings,
                reverted: rep.reverted,
            })
        }
        _ if !flags.recovery => Ok(StepResult::plain("infeasible_recovery", Vec::new())),
        _ => {
            let targets: Vec<f64> = d.iter().zip(xi).map(|(d, x)| d - x).collect();
            let theta = policy.flat();
            let template = policy.clone();
            let evaluate = |cand: &DVector<f64>| -> Result<Vec<f64>> {
                let mut p = template.clone();
                p.set_flat(cand)?;
                oracle.candidate_costs(&p)
            };
            let out = recovery_step(
                &theta,
                &bundle.j_c,
                &targets,
                &bundle.b,
                &bundle.fisher,
                evaluate,
                o.delta,
                &o.recovery,
            )?;
            let step = &out.theta - &theta;
            let rep = if out.status == RecoveryStatus::Accepted {
                apply_update(policy, &step, o.delta, flags.spectral, |a, b| oracle.kl(a, b))?
            } else {
                crate::inner_loop::UpdateReport {
                    kl: 0.0,
                    halvings: 0,
                    reverted: false,
                }
            };
            Ok(StepResult {
                status: "infeasible_recovery".to_string(),
                dual_solved: false,
                recovery_invoked: true,
                recovery_status: Some(out.status),
                lambda: None,
                nu: Vec::new(),
                kl: rep.kl,
                halvings: rep.halvings,
                reverted: rep.reverted,
            })
        }
    }
}

fn run_learned<O: Oracle>(cfg: &ExperimentConfig, mut oracle: O) -> Result<RunOutput> {
    let m = oracle.num_constraints();
    let d = cfg.thresholds.clone();
    let arch = cfg.policy_arch();
    let mut init_rng = rng_stream(cfg.seed, 0);
    let mut rng = rng_stream(cfg.seed, 1);
    let mut policy = Policy::new(&arch, &mut init_rng);
    if cfg.flags.spectral {
        policy.spectral_project();
    }
    let tags = run_tags(cfg);
    let mut learner = Learner {
        margins: MarginState::new(m, cfg.cusum),
        pid: MarginState::new(m, cfg.cusum),
        nu: vec![0.0; m],
    };
    let mut records = Vec::with_capacity(cfg.optimizer.iterations);
    let mut trace = ConstraintTrace::new(d.clone());
    let mut settlements = Vec::new();

    for k in 0..cfg.optimizer.iterations {
        let rec = (|| -> Result<IterationRecord> {
            let eval = oracle.evaluate(&policy)?;
            // The settlement commits to the model that produced its trades.
            let settles = k % cfg.eval.every == cfg.eval.every - 1 && !eval.trades.is_empty();
            let eval_model = settles.then(|| policy.to_bytes());
            let bundle = oracle.estimate(&policy, &mut rng)?;
            let e: Vec<f64> = bundle.j_c.iter().zip(&d).map(|(j, d)| j - d).collect();
            let mut cusum_reset = vec![false; m];
            if cfg.flags.margins && cfg.flags.algorithm == Algorithm::Foam {
                if cfg.regime_reset {
                    cusum_reset = learner.margins.regime_reset(&violation_energy(&bundle.j_c, &d));
                }
                learner.margins.update(&e, &cfg.gains);
            }
            let xi = learner.margins.xi.clone();
            let kappa: Vec<f64> = d
                .iter()
                .zip(&bundle.j_c)
                .zip(&xi)
                .map(|((d, j), x)| d - j - x)
                .collect();
            trace.push(eval.costs.clone(), xi.clone());

            let o = &cfg.optimizer;
            let step = match cfg.flags.algorithm {
                Algorithm::Foam => foam_step(cfg, &mut policy, &oracle, &bundle, &d, &xi, &kappa)?,
                Algorithm::Lagrangian => {
                    let (next, nu) = lagrangian_step(&policy, &bundle, &learner.nu, o.lr_theta, o.lr_nu, &d)?;
                    let kl = adopt(&mut policy, next, cfg.flags.spectral, &oracle)?;
                    learner.nu = nu;
                    StepResult {
                        kl,
                        ..StepResult::plain("lagrangian", learner.nu.clone())
                    }
                }
                Algorithm::PidLagrangian => {
                    let next = pid_lagrangian_step(
                        &policy,
                        &bundle,
                        &mut learner.pid,
                        &cfg.pid_lagrangian_gains,
                        o.lr_theta,
                        &d,
                    )?;
                    let kl = adopt(&mut policy, next, cfg.flags.spectral, &oracle)?;
                    StepResult {
                        kl,
                        ..StepResult::plain("pid_lagrangian", learner.pid.xi.clone())
                    }
                }
                Algorithm::Rule(_) => unreachable!("rule variants take the rule path"),
            };

            if let Some(model_bytes) = eval_model {
                settlements.push(SettlementBatch {
                    trades: eval.trades.clone(),
                    state_snapshot: eval.state_snapshot.clone(),
                    model_bytes,
                });
            }
            let w_max = oracle.disturbance();
            oracle.end_iteration();
            let rec = IterationRecord {
                iteration: k,
                j_r: bundle.j_r,
                j_c: bundle.j_c.clone(),
                d: d.clone(),
                xi,
                kappa,
                status: step.status,
                dual_solved: step.dual_solved,
                recovery_invoked: step.recovery_invoked,
                recovery_status: step.recovery_status,
                lambda: step.lambda,
                nu: step.nu,
                kl: step.kl,
                halvings: step.halvings,
                reverted: step.reverted,
                cusum_reset,
                w_max,
                eval_reward: eval.reward,
                eval_costs: eval.costs.clone(),
                tags: tags.clone(),
            };
            Ok(rec)
        })()
        .map_err(|err| err.at_iteration(k))?;
        records.push(rec);
    }

    let final_eval = oracle.evaluate(&policy)?;
    let mut metrics = RunMetrics::from_trace(&trace)?;
    metrics.final_reward = final_eval.reward;
    metrics.dp_gap = measured_dp_gap(&final_eval.dp_pairs);
    if !final_eval.market.is_empty() {
        metrics.mqs = compute_market_metrics(&final_eval.market, 0.0, &cfg.eval.mqs_ceilings)?.mqs;
    }
    let pairs = lipschitz_pairs(&final_eval.features, cfg.eval.lipschitz_pairs, cfg.seed);
    if !pairs.is_empty() {
        let rep = lipschitz_violation_rate(|x| policy.forward(x), &pairs, policy.lipschitz_budget())?;
        metrics.lip_viol_pct = rep.viol_pct;
        metrics.lip_max_exceedance = rep.max_exceedance;
    }
    Ok(RunOutput {
        config: cfg.clone(),
        records,
        trace,
        metrics,
        policy_bytes: Some(policy.to_bytes()),
        settlements,
        tags,
    })
}

/// State pairs around evaluation states: `(x, x + N(0, 0.1^2 I))`.
fn lipschitz_pairs(features: &[Vec<f64>], n: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    if features.is_empty() || n == 0 {
        return Vec::new();
    }
    let mut rng = rng_stream(seed, 2);
    let noise = Normal::new(0.0, 0.1).expect("finite std");
    (0..n)
        .map(|_| {
            let x = &features[rng.random_range(0..features.len())];
            let y = x.iter().map(|v| v + noise.sample(&mut rng)).collect();
            (x.clone(), y)
        })
        .collect()
}

/// Rule allocators have no parameters; each iteration advances the book by
/// one batch and evaluates the rule on a copy.
fn run_rule(cfg: &ExperimentConfig, kind: RuleKind) -> Result<RunOutput> {
    let mut env = Env::new(cfg.env.clone(), cfg.seed, cfg.regime)?;
    let m = env.num_constraints();
    let d = cfg.thresholds.clone();
    let o = &cfg.optimizer;
    let mut trace = ConstraintTrace::new(d.clone());
    let mut records = Vec::with_capacity(o.iterations);
    let mut final_eval = Evaluation::default();
    for k in 0..o.iterations {
        let rec = (|| -> Result<IterationRecord> {
            let eval = rule_episodes(&mut env.clone(), kind, cfg.eval.horizon, cfg)?;
            let batch = rule_episodes(&mut env, kind, o.batch_size, cfg)?;
            let xi = vec![0.0; m];
            let kappa: Vec<f64> = d.iter().zip(&batch.costs).map(|(d, j)| d - j).collect();
            trace.push(eval.costs.clone(), xi.clone());
            let rec = IterationRecord {
                iteration: k,
                j_r: batch.reward,
                j_c: batch.costs.clone(),
                d: d.clone(),
                xi,
                kappa,
                status: "rule".into(),
                dual_solved: false,
                recovery_invoked: false,
                recovery_status: None,
                lambda: None,
                nu: Vec::new(),
                kl: 0.0,
                halvings: 0,
                reverted: false,
                cusum_reset: vec![false; m],
                w_max: None,
                eval_reward: eval.reward,
                eval_costs: eval.costs.clone(),
                tags: Vec::new(),
            };
            final_eval = eval;
            Ok(rec)
        })()
        .map_err(|err| err.at_iteration(k))?;
        records.push(rec);
    }
    let mut metrics = RunMetrics::from_trace(&trace)?;
    metrics.final_reward = final_eval.reward;
    metrics.dp_gap = measured_dp_gap(&final_eval.dp_pairs);
    if !final_eval.market.is_empty() {
        metrics.mqs = compute_market_metrics(&final_eval.market, 0.0, &cfg.eval.mqs_ceilings)?.mqs;
    }
    Ok(RunOutput {
        config: cfg.clone(),
        records,
        trace,
        metrics,
        policy_bytes: None,
        settlements: Vec::new(),
        tags: Vec::new(),
    })
}

fn rule_episodes(env: &mut Env, kind: RuleKind, steps: usize, cfg: &ExperimentConfig) -> Result<Evaluation> {
    let mut ev = Evaluation::default();
    let mut rewards = Vec::with_capacity(steps);
    let mut costs = Vec::with_capacity(steps);
    for _ in 0..steps {
        let order = env.sample_arrival();
        let a = rule_allocate(kind, env.state(), &order);
        let out = env.step(&order, &a)?;
        ev.dp_pairs.push((order.group, out.fill_mass));
        ev.market.push(MarketSample {
            spread_bps: out.spread_bps,
            depth5: out.depth5,
            fill_mass: out.fill_mass,
            order_size: order.size,
        });
        rewards.push(out.reward);
        costs.push(out.costs);
    }
    let (r, c) = chunked_returns(&rewards, &costs, cfg.optimizer.episode_len, cfg.optimizer.gamma);
    ev.reward = r;
    ev.costs = c;
    Ok(ev)
}

impl RunOutput {
    /// Writes `config.json`, `log.jsonl`, `metrics.json`, `policy.bin` and,
    /// per settlement window `w`, `settlement_w.bin`, `commitment_w.bin` and
    /// `commitment_w.json`.
    pub fn write_artifacts(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("config.json"), self.config.to_json()?)?;
        let mut log = String::new();
        for r in &self.records {
            log.push_str(&serde_json::to_string(r)?);
            log.push('\n');
        }
        fs::write(dir.join("log.jsonl"), log)?;
        fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&self.metrics)?)?;
        if let Some(p) = &self.policy_bytes {
            fs::write(dir.join("policy.bin"), p)?;
        }
        for (w, batch) in self.settlements.iter().enumerate() {
            let c = commit(batch)?;
            fs::write(dir.join(format!("settlement_{w}.bin")), batch.to_bytes())?;
            fs::write(dir.join(format!("commitment_{w}.bin")), c.to_record()?)?;
            fs::write(
                dir.join(format!("commitment_{w}.json")),
                serde_json::to_string_pretty(&c.sidecar())?,
            )?;
        }
        Ok(())
    }
}

/// Reads a `log.jsonl` file.
pub fn read_log(path: &Path) -> Result<Vec<IterationRecord>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(FoamError::from))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::{make_variant, VariantName};

    fn bandit_cfg(testbed: Testbed) -> ExperimentConfig {
        let mut c = ExperimentConfig::desk();
        c.testbed = testbed;
        c.optimizer.episode_len = 1;
        c.optimizer.batch_size = 256;
        c.optimizer.iterations = 5;
        c.policy.hidden = vec![8];
        c.thresholds = vec![0.4, 0.4];
        c
    }

    #[test]
    fn budget_identity_holds_in_every_record() {
        let out = train(&bandit_cfg(Testbed::DriftBandit)).unwrap();
        assert_eq!(out.records.len(), 5);
        for r in &out.records {
            for i in 0..r.d.len() {
                assert!((r.kappa[i] + r.j_c[i] + r.xi[i] - r.d[i]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn routing_is_exclusive() {
        let out = train(&bandit_cfg(Testbed::AnalyticBandit)).unwrap();
        for r in &out.records {
            assert!(!(r.dual_solved && r.recovery_invoked));
            if r.status == "infeasible_recovery" {
                assert!(!r.dual_solved);
            }
            if r.status == "feasible" {
                assert!(!r.recovery_invoked);
            }
        }
    }

    #[test]
    fn unstable_gains_are_tagged() {
        let mut c = bandit_cfg(Testbed::AnalyticBandit);
        c.gains.ki = 0.0;
        c.gains.kd = 0.0;
        let out = train(&c).unwrap();
        assert!(out
            .records
            .iter()
            .all(|r| r.tags.iter().any(|t| t == UNSTABLE_GAINS_TAG)));
    }

    #[test]
    fn rules_need_the_book() {
        let c = make_variant(&bandit_cfg(Testbed::DriftBandit), VariantName::Fifo);
        assert!(matches!(train(&c), Err(FoamError::InvalidConfig(_))));
    }

    #[test]
    fn chunked_returns_discount_within_episodes() {
        let (r, c) = chunked_returns(&[1.0, 1.0, 1.0, 1.0], &vec![vec![2.0]; 4], 2, 0.5);
        assert_eq!(r, 1.5);
        assert_eq!(c, vec![3.0]);
    }
}
