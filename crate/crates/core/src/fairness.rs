//! Differentiable group-fairness cost surrogates and Lipschitz diagnostics.

use serde::{Deserialize, Serialize};

use crate::error::{FoamError, Result};

/// Lower bound applied to every group-rate estimate.
pub const EMA_FLOOR: f64 = 1e-4;

/// Exponential moving average of per-group arrival rates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRateEMA {
    pub mu_hat: [f64; 2],
    pub beta: f64,
}

impl GroupRateEMA {
    /// Fresh tracker with both rates at the floor; not warm until updated.
    pub fn new(beta: f64) -> Self {
        assert!((0.0..1.0).contains(&beta), "beta must lie in [0, 1)");
        Self {
            mu_hat: [EMA_FLOOR; 2],
            beta,
        }
    }

    pub fn update(&mut self, group: u8) {
        for g in 0..2 {
            let hit = if group as usize == g { 1.0 } else { 0.0 };
            self.mu_hat[g] = (self.beta * self.mu_hat[g] + (1.0 - self.beta) * hit).max(EMA_FLOOR);
        }
    }

    pub fn is_warm(&self, group: u8) -> bool {
        self.mu_hat[group as usize] > EMA_FLOOR
    }
}

/// Which surrogate a constraint slot carries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    DemographicParity,
    EqualizedOdds,
    Volatility,
}

impl ConstraintKind {
    pub fn label(&self) -> &'static str {
        match self {
            ConstraintKind::DemographicParity => "dp",
            ConstraintKind::EqualizedOdds => "eo",
            ConstraintKind::Volatility => "volatility",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostVector {
    pub values: Vec<f64>,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub d: Vec<f64>,
}

impl Thresholds {
    pub fn new(d: Vec<f64>) -> Result<Self> {
        if let Some(bad) = d.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(FoamError::InvalidConfig(format!("threshold {bad} must be positive")));
        }
        Ok(Self { d })
    }
}

/// `<a, m>`, the predicted fill fraction.
pub fn masked_mass(allocation: &[f64], mask: &[bool]) -> f64 {
    allocation.iter().zip(mask).filter(|(_, m)| **m).map(|(a, _)| a).sum()
}

fn signed_rate(group: u8, ema: &GroupRateEMA) -> Result<f64> {
    if group > 1 {
        return Err(FoamError::InvalidConfig(format!("group {group} is not binary")));
    }
    if !ema.is_warm(group) {
        return Err(FoamError::EmaNotWarm {
            group: group as usize,
            value: ema.mu_hat[group as usize],
        });
    }
    let mu = ema.mu_hat[group as usize];
    Ok(if group == 1 { 1.0 / mu } else { -1.0 / mu })
}

/// Squared rate-normalized fill disparity for one arrival:
/// `(1[g=1] <a,m>/mu_1 - 1[g=0] <a,m>/mu_0)^2`.
pub fn dp_cost(allocation: &[f64], mask: &[bool], group: u8, ema: &GroupRateEMA) -> Result<f64> {
    check_lengths(allocation, mask)?;
    let s = signed_rate(group, ema)?;
    let x = s * masked_mass(allocation, mask);
    Ok(x * x)
}

/// Gradient of [`dp_cost`] with respect to the allocation.
pub fn dp_cost_grad(allocation: &[f64], mask: &[bool], group: u8, ema: &GroupRateEMA) -> Result<Vec<f64>> {
    check_lengths(allocation, mask)?;
    let s = signed_rate(group, ema)?;
    let scale = 2.0 * s * s * masked_mass(allocation, mask);
    Ok(mask.iter().map(|m| if *m { scale } else { 0.0 }).collect())
}

/// An arrival is qualified when the feasible counterparties can absorb it.
pub fn is_qualified(mask: &[bool], volumes: &[f64], size: f64) -> bool {
    let avail: f64 = mask.iter().zip(volumes).filter(|(m, _)| **m).map(|(_, v)| v).sum();
    mask.iter().any(|m| *m) && avail >= size
}

/// Parity among qualified arrivals, measured against the qualified-arrival
/// rate tracker; zero for unqualified arrivals.
pub fn eo_cost(allocation: &[f64], mask: &[bool], group: u8, qualified: bool, ema_q: &GroupRateEMA) -> Result<f64> {
    check_lengths(allocation, mask)?;
    if !qualified {
        return Ok(0.0);
    }
    dp_cost(allocation, mask, group, ema_q)
}

fn check_lengths(allocation: &[f64], mask: &[bool]) -> Result<()> {
    if allocation.len() != mask.len() {
        return Err(FoamError::DimensionMismatch {
            expected: allocation.len(),
            actual: mask.len(),
            context: "mask length vs allocation",
        });
    }
    Ok(())
}

/// Result of a Lipschitz sweep over state pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzReport {
    /// Percentage of pairs whose ratio exceeds the bound.
    pub viol_pct: f64,
    /// `100 * max(0, max_ratio / L - 1)`.
    pub max_exceedance: f64,
    pub max_ratio: f64,
}

/// Measures `|pi(s) - pi(s')|_1 / |s - s'|_2` over the pairs.
pub fn lipschitz_violation_rate<F>(policy: F, pairs: &[(Vec<f64>, Vec<f64>)], bound: f64) -> Result<LipschitzReport>
where
    F: Fn(&[f64]) -> Result<Vec<f64>>,
{
    if pairs.is_empty() {
        return Err(FoamError::Empty("state pairs"));
    }
    let mut viol = 0usize;
    let mut max_ratio = 0.0f64;
    for (idx, (s, t)) in pairs.iter().enumerate() {
        let dist = s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dist == 0.0 {
            return Err(FoamError::DegeneratePair(idx));
        }
        let (ps, pt) = (policy(s)?, policy(t)?);
        let l1: f64 = ps.iter().zip(&pt).map(|(a, b)| (a - b).abs()).sum();
        let ratio = l1 / dist;
        if ratio > bound {
            viol += 1;
        }
        max_ratio = max_ratio.max(ratio);
    }
    Ok(LipschitzReport {
        viol_pct: 100.0 * viol as f64 / pairs.len() as f64,
        max_exceedance: 100.0 * (max_ratio / bound - 1.0).max(0.0),
        max_ratio,
    })
}
