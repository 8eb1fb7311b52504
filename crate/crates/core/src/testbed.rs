//! Synthetic constrained bandits: an analytic one with exact gradients and
//! Fisher, and a sampled one with a drifting cost offset.

use std::ops::AddAssign;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{FoamError, Result};
use crate::estimator::{Cmdp, Fisher, GradientBundle, Transition};
use crate::linalg::CgConfig;
use crate::policy::{concentration, Policy};

/// `psi_1(x)` by upward recurrence and the asymptotic series.
pub fn trigamma(x: f64) -> f64 {
    if x <= 0.0 || x.is_nan() {
        return f64::NAN;
    }
    let mut x = x;
    let mut acc = 0.0;
    while x < 20.0 {
        acc += 1.0 / (x * x);
        x += 1.0;
    }
    let x2 = 1.0 / (x * x);
    acc + 1.0 / x + x2 / 2.0 + x2 / x * (1.0 / 6.0 - x2 * (1.0 / 30.0 - x2 * (1.0 / 42.0 - x2 / 30.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BanditConfig {
    pub arms: usize,
    pub constraints: usize,
    pub contexts: usize,
    pub feature_dim: usize,
    /// Increase of each cost offset per iteration.
    pub drift: Vec<f64>,
    /// Per-sample noise on rewards.
    pub reward_noise: f64,
    /// Per-sample noise on costs.
    pub cost_noise: f64,
    /// Weight of the mean arm cost in the arm reward; the rest is uniform
    /// noise. Positive weights put reward and cost in tension.
    pub reward_cost_coupling: f64,
}

impl Default for BanditConfig {
    fn default() -> Self {
        Self {
            arms: 20,
            constraints: 2,
            contexts: 8,
            feature_dim: 8,
            drift: vec![0.002, 0.002],
            reward_noise: 0.05,
            cost_noise: 0.05,
            reward_cost_coupling: 0.7,
        }
    }
}

impl BanditConfig {
    pub fn validate(&self) -> Result<()> {
        if self.arms < 2 || self.contexts == 0 || self.feature_dim == 0 {
            return Err(FoamError::InvalidConfig(
                "bandit needs >= 2 arms, >= 1 context, >= 1 feature".into(),
            ));
        }
        if self.drift.len() != self.constraints {
            return Err(FoamError::InvalidConfig(format!(
                "drift has {} entries for {} constraints",
                self.drift.len(),
                self.constraints
            )));
        }
        if self.reward_noise < 0.0 || self.cost_noise < 0.0 {
            return Err(FoamError::InvalidConfig("noise levels must be non-negative".into()));
        }
        Ok(())
    }
}

/// Fixed arms and contexts drawn from a seed.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditInstance {
    pub contexts: Vec<Vec<f64>>,
    /// `mu[x][j]`
    pub mu: Vec<Vec<f64>>,
    /// `kappa[i][j]`
    pub kappa: Vec<Vec<f64>>,
    pub drift: Vec<f64>,
}

impl BanditInstance {
    pub fn generate(cfg: &BanditConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = cfg.arms;
        let contexts = (0..cfg.contexts)
            .map(|_| {
                (0..cfg.feature_dim)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        // Constraint costs share a common arm factor so cheap arms exist for
        // all constraints at once.
        let base: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let kappa: Vec<Vec<f64>> = (0..cfg.constraints)
            .map(|_| base.iter().map(|b| 0.7 * b + 0.3 * rng.random::<f64>()).collect())
            .collect();
        let w = cfg.reward_cost_coupling;
        let mu = (0..cfg.contexts)
            .map(|_| {
                (0..k)
                    .map(|j| {
                        let mean_cost = if kappa.is_empty() {
                            base[j]
                        } else {
                            kappa.iter().map(|row| row[j]).sum::<f64>() / kappa.len() as f64
                        };
                        w * mean_cost + (1.0 - w) * rng.random::<f64>()
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            contexts,
            mu,
            kappa,
            drift: cfg.drift.clone(),
        })
    }

    pub fn arms(&self) -> usize {
        self.mu[0].len()
    }

    pub fn feature_dim(&self) -> usize {
        self.contexts[0].len()
    }

    pub fn num_constraints(&self) -> usize {
        self.kappa.len()
    }

    fn check(&self, policy: &Policy) -> Result<()> {
        if policy.input_dim() != self.feature_dim() || policy.output_dim() != self.arms() {
            return Err(FoamError::DimensionMismatch {
                expected: self.arms(),
                actual: policy.output_dim(),
                context: "policy shape vs bandit",
            });
        }
        Ok(())
    }

    /// Expected reward and costs under the policy, with cost offsets after
    /// `elapsed` iterations of drift.
    pub fn expected(&self, policy: &Policy, elapsed: f64) -> Result<(f64, Vec<f64>)> {
        self.check(policy)?;
        let x_n = self.contexts.len() as f64;
        let mut r = 0.0;
        let mut c = vec![0.0; self.num_constraints()];
        for (x, mu) in self.contexts.iter().zip(&self.mu) {
            let pi = policy.forward(x)?;
            r += dot(&pi, mu) / x_n;
            for (ci, kap) in c.iter_mut().zip(&self.kappa) {
                *ci += dot(&pi, kap) / x_n;
            }
        }
        for (ci, w) in c.iter_mut().zip(&self.drift) {
            *ci += w * elapsed;
        }
        Ok((r, c))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Noise-free bandit: returns, gradients and Fisher are exact.
#[derive(Debug, Clone)]
pub struct AnalyticBandit {
    pub instance: BanditInstance,
    pub temperature: f64,
    pub iteration: usize,
}

impl AnalyticBandit {
    pub fn new(instance: BanditInstance, temperature: f64) -> Self {
        Self {
            instance,
            temperature,
            iteration: 0,
        }
    }

    pub fn expected(&self, policy: &Policy) -> Result<(f64, Vec<f64>)> {
        self.instance.expected(policy, self.iteration as f64)
    }

    pub fn advance(&mut self) {
        self.iteration += 1;
    }

    /// Exact gradients, with the Fisher
    /// `c^2 mean_x J_pi' diag(psi_1(alpha)) J_pi + damping I`, `c = K / T`.
    pub fn gradients(&self, policy: &Policy, damping: f64, cg: CgConfig) -> Result<GradientBundle> {
        let inst = &self.instance;
        let (j_r, j_c) = self.expected(policy)?;
        let n = policy.num_params();
        let k = inst.arms();
        let m = inst.num_constraints();
        let x_n = inst.contexts.len();
        let c = k as f64 / self.temperature;
        let mut g = DVector::zeros(n);
        let mut b = DMatrix::zeros(m, n);
        let mut scores = DMatrix::zeros(x_n * k, n);
        for (xi, (x, mu)) in inst.contexts.iter().zip(&inst.mu).enumerate() {
            g += policy.vjp_probs(x, mu)? / x_n as f64;
            for (i, kap) in inst.kappa.iter().enumerate() {
                let row = policy.vjp_probs(x, kap)? / x_n as f64;
                b.row_mut(i).add_assign(&row.transpose());
            }
            let pi = policy.forward(x)?;
            let alpha = concentration(&pi, self.temperature);
            for j in 0..k {
                let mut e = vec![0.0; k];
                e[j] = 1.0;
                let dpi = policy.vjp_probs(x, &e)?;
                let w = (k as f64).sqrt() * c * trigamma(alpha[j].max(1e-12)).sqrt();
                scores.set_row(xi * k + j, &(dpi * w).transpose());
            }
        }
        Ok(GradientBundle {
            g,
            g_se: DVector::zeros(n),
            b,
            j_r,
            j_c,
            fisher: Fisher::implicit(scores, damping, cg),
        })
    }

    /// Mean closed-form KL over the contexts.
    pub fn kl(&self, old: &Policy, new: &Policy) -> Result<f64> {
        let mut acc = 0.0;
        for x in &self.instance.contexts {
            acc += old.kl(new, x, self.temperature)?;
        }
        Ok(acc / self.instance.contexts.len() as f64)
    }
}

/// Sampled bandit whose cost offsets ramp by `drift` every
/// `steps_per_iteration` transitions.
#[derive(Debug, Clone)]
pub struct DriftBandit {
    pub instance: BanditInstance,
    pub steps_per_iteration: usize,
    reward_noise: f64,
    cost_noise: f64,
    steps: u64,
    current: usize,
    rng: ChaCha8Rng,
}

impl DriftBandit {
    pub fn new(instance: BanditInstance, cfg: &BanditConfig, steps_per_iteration: usize, seed: u64) -> Result<Self> {
        if steps_per_iteration == 0 {
            return Err(FoamError::InvalidConfig("steps_per_iteration must be >= 1".into()));
        }
        Ok(Self {
            instance,
            steps_per_iteration,
            reward_noise: cfg.reward_noise,
            cost_noise: cfg.cost_noise,
            steps: 0,
            current: 0,
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
        })
    }

    /// Iterations of drift elapsed so far.
    pub fn elapsed(&self) -> f64 {
        self.steps as f64 / self.steps_per_iteration as f64
    }

    /// Noise-free expected reward and costs at the current offsets.
    pub fn expected(&self, policy: &Policy) -> Result<(f64, Vec<f64>)> {
        self.instance.expected(policy, self.elapsed())
    }
}

impl Cmdp for DriftBandit {
    fn num_constraints(&self) -> usize {
        self.instance.num_constraints()
    }

    fn observe(&mut self) -> Vec<f64> {
        self.current = self.rng.random_range(0..self.instance.contexts.len());
        self.instance.contexts[self.current].clone()
    }

    fn act(&mut self, action: &[f64]) -> Result<Transition> {
        if action.len() != self.instance.arms() {
            return Err(FoamError::DimensionMismatch {
                expected: self.instance.arms(),
                actual: action.len(),
                context: "bandit action",
            });
        }
        let elapsed = self.elapsed();
        let rn = Normal::new(0.0, self.reward_noise.max(0.0)).map_err(|e| FoamError::InvalidConfig(e.to_string()))?;
        let cn = Normal::new(0.0, self.cost_noise.max(0.0)).map_err(|e| FoamError::InvalidConfig(e.to_string()))?;
        let reward = dot(action, &self.instance.mu[self.current]) + rn.sample(&mut self.rng);
        let costs = self
            .instance
            .kappa
            .iter()
            .zip(&self.instance.drift)
            .map(|(kap, w)| dot(action, kap) + w * elapsed + cn.sample(&mut self.rng))
            .collect();
        self.steps += 1;
        Ok(Transition {
            reward,
            costs,
            fill_mass: 1.0,
            group: (self.current % 2) as u8,
        })
    }
}
