//! Experiment configuration, presets and loading.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::baselines::{VariantFlags, VariantName};
use crate::env::{EnvConfig, MqsCeilings, RegimeConfig};
use crate::error::{FoamError, Result};
use crate::estimator::{DisturbanceConfig, EstimatorConfig};
use crate::fairness::ConstraintKind;
use crate::inner_loop::RecoveryConfig;
use crate::outer_loop::{validate_gains, CusumConfig, GainValidation, PidGains};
use crate::policy::PolicyArch;
use crate::testbed::BanditConfig;

/// Environment variable that overrides `seed`.
pub const SEED_ENV: &str = "FOAM_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    #[serde(rename = "desk")]
    Desk,
    #[serde(rename = "paper-scale")]
    PaperScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Testbed {
    /// Synthetic limit order book.
    Book,
    /// Contextual bandit with noisy samples and drifting cost offsets.
    DriftBandit,
    /// Contextual bandit with exact gradients.
    AnalyticBandit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub lipschitz: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub delta: f64,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub batch_size: usize,
    pub episode_len: usize,
    pub iterations: usize,
    /// Dirichlet temperature of the training policy.
    pub temperature: f64,
    pub estimator: EstimatorConfig,
    pub recovery: RecoveryConfig,
    pub disturbance: DisturbanceConfig,
    /// Confidence level of the disturbance bound.
    pub zeta: f64,
    /// Plain-gradient step size for the Lagrangian baselines and `foam_no_tr`.
    pub lr_theta: f64,
    pub lr_nu: f64,
    /// Penalty weight for `foam_no_tr`.
    pub penalty: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Mean-policy steps per evaluation on the sampled testbeds.
    pub horizon: usize,
    /// Iterations between evaluations; each evaluation emits a settlement
    /// batch.
    pub every: usize,
    pub lipschitz_pairs: usize,
    pub mqs_ceilings: MqsCeilings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub preset: Preset,
    pub seed: u64,
    pub variant: VariantName,
    pub testbed: Testbed,
    pub env: EnvConfig,
    pub regime: RegimeConfig,
    pub bandit: BanditConfig,
    pub thresholds: Vec<f64>,
    pub policy: PolicyConfig,
    pub optimizer: OptimizerConfig,
    pub gains: PidGains,
    /// Gains of the `pid_lagrangian` baseline's multiplier controller.
    pub pid_lagrangian_gains: PidGains,
    pub cusum: CusumConfig,
    pub regime_reset: bool,
    pub flags: VariantFlags,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    /// L=10, K=20, M=2, [32, 32], batch 512, 200 iterations.
    pub fn desk() -> Self {
        let env = EnvConfig {
            levels: 10,
            counterparties: 20,
            constraints: vec![ConstraintKind::DemographicParity, ConstraintKind::EqualizedOdds],
            ..EnvConfig::default()
        };
        Self {
            preset: Preset::Desk,
            seed: 0,
            variant: VariantName::Foam,
            testbed: Testbed::Book,
            env,
            regime: RegimeConfig::calm(),
            bandit: BanditConfig::default(),
            thresholds: vec![0.05, 0.05],
            policy: PolicyConfig {
                hidden: vec![32, 32],
                lipschitz: 10.0,
            },
            optimizer: OptimizerConfig {
                delta: 0.01,
                gamma: 0.99,
                gae_lambda: 0.95,
                batch_size: 512,
                episode_len: 64,
                iterations: 200,
                temperature: 0.1,
                estimator: EstimatorConfig::default(),
                recovery: RecoveryConfig::default(),
                disturbance: DisturbanceConfig::default(),
                zeta: 0.05,
                lr_theta: 0.1,
                lr_nu: 0.5,
                penalty: 10.0,
            },
            gains: PidGains::default(),
            pid_lagrangian_gains: PidGains {
                kp: 1.0,
                ki: 0.5,
                kd: 0.0,
            },
            cusum: CusumConfig::default(),
            regime_reset: true,
            flags: VariantFlags::default(),
            eval: EvalConfig {
                horizon: 512,
                every: 10,
                lipschitz_pairs: 1000,
                mqs_ceilings: MqsCeilings {
                    spread_bps: 1.0,
                    fill_rate: 1.0,
                    depth5: 100.0,
                },
            },
        }
    }

    /// Batch 4096, [256, 256, 128], K=50, M=3.
    pub fn paper_scale() -> Self {
        let mut c = Self::desk();
        c.preset = Preset::PaperScale;
        c.env = EnvConfig::default();
        c.thresholds = vec![0.05; c.env.constraints.len()];
        c.policy.hidden = vec![256, 256, 128];
        c.optimizer.batch_size = 4096;
        c.optimizer.iterations = 1000;
        c.optimizer.estimator.fisher_mode = crate::estimator::FisherMode::Exact;
        c
    }

    /// Desk preset on the drifting bandit: a constant per-iteration cost
    /// increase of 5e-4, below what one trust-region step can remove.
    /// The threshold sits just above the uniform policy's expected cost, so
    /// runs start feasible. `lr_theta` gives the Lagrangian baselines a
    /// median per-step KL close to `delta`.
    pub fn disturbance_testbed() -> Self {
        let mut c = Self::desk();
        c.testbed = Testbed::DriftBandit;
        c.optimizer.episode_len = 1;
        c.optimizer.lr_theta = 0.4;
        c.bandit.drift = vec![5e-4; c.bandit.constraints];
        c.thresholds = vec![0.55; c.bandit.constraints];
        c
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self::desk(),
            Preset::PaperScale => Self::paper_scale(),
        }
    }

    pub fn num_constraints(&self) -> usize {
        match self.testbed {
            Testbed::Book => self.env.constraints.len(),
            Testbed::DriftBandit | Testbed::AnalyticBandit => self.bandit.constraints,
        }
    }

    pub fn policy_arch(&self) -> PolicyArch {
        let (input, output) = match self.testbed {
            Testbed::Book => (self.env.feature_dim(), self.env.counterparties),
            Testbed::DriftBandit | Testbed::AnalyticBandit => (self.bandit.feature_dim, self.bandit.arms),
        };
        PolicyArch {
            input,
            hidden: self.policy.hidden.clone(),
            output,
            lipschitz: self.policy.lipschitz,
        }
    }

    /// Gain check; an unstable result tags the run but does not reject it.
    pub fn gain_validation(&self) -> GainValidation {
        validate_gains(&self.gains)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FoamError::InvalidConfig(m));
        let o = &self.optimizer;
        if !(o.delta > 0.0 && o.delta.is_finite()) {
            return bad(format!("delta = {} must be > 0", o.delta));
        }
        if !(o.gamma > 0.0 && o.gamma < 1.0) {
            return bad(format!("gamma = {} must lie in (0, 1)", o.gamma));
        }
        if !(0.0..=1.0).contains(&o.gae_lambda) {
            return bad(format!("gae_lambda = {} must lie in [0, 1]", o.gae_lambda));
        }
        if o.batch_size == 0 || o.episode_len == 0 || o.episode_len > o.batch_size {
            return bad("need 0 < episode_len <= batch_size".into());
        }
        if o.temperature <= 0.0 {
            return bad("temperature must be > 0".into());
        }
        if !(o.zeta > 0.0 && o.zeta < 1.0) {
            return bad("zeta must lie in (0, 1)".into());
        }
        if self.thresholds.len() != self.num_constraints() {
            return bad(format!(
                "{} thresholds for {} constraints",
                self.thresholds.len(),
                self.num_constraints()
            ));
        }
        if self.policy.lipschitz <= 0.0 || self.policy.hidden.contains(&0) {
            return bad("policy needs a positive Lipschitz budget and non-empty layers".into());
        }
        if self.eval.horizon == 0 || self.eval.every == 0 {
            return bad("eval horizon and interval must be positive".into());
        }
        match self.testbed {
            Testbed::Book => self.env.validate()?,
            Testbed::DriftBandit | Testbed::AnalyticBandit => {
                self.bandit.validate()?;
                if o.episode_len != 1 {
                    return bad("bandit testbeds use one-step episodes (episode_len = 1)".into());
                }
            }
        }
        self.regime.validate()
    }

    /// Parses JSON: the `preset` field selects the base, every other field
    /// overrides it recursively.
    pub fn from_json(text: &str) -> Result<Self> {
        let user: Value = serde_json::from_str(text).map_err(|e| FoamError::Serialization(e.to_string()))?;
        let preset = match user.get("preset") {
            None => Preset::Desk,
            Some(p) => {
                serde_json::from_value(p.clone()).map_err(|e| FoamError::InvalidConfig(format!("preset: {e}")))?
            }
        };
        let mut base =
            serde_json::to_value(Self::preset(preset)).map_err(|e| FoamError::Serialization(e.to_string()))?;
        merge(&mut base, user);
        let cfg: Self = serde_json::from_value(base).map_err(|e| FoamError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies [`SEED_ENV`].
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::from_json(&text)?;
        cfg.apply_env_overrides()?;
        Ok(cfg)
    }

    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| FoamError::InvalidConfig(format!("{SEED_ENV}={s} is not a u64")))?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| FoamError::Serialization(e.to_string()))
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
