//! Constraint-dynamics and fairness metrics over per-iteration traces.

use serde::{Deserialize, Serialize};

use crate::error::{FoamError, Result};

/// Per-iteration constraint estimates with their thresholds and margins.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstraintTrace {
    /// `j_c[k][i]`: estimate of constraint `i` at iteration `k`.
    pub j_c: Vec<Vec<f64>>,
    pub d: Vec<f64>,
    pub xi: Vec<Vec<f64>>,
}

impl ConstraintTrace {
    pub fn new(d: Vec<f64>) -> Self {
        Self {
            j_c: Vec::new(),
            d,
            xi: Vec::new(),
        }
    }

    pub fn push(&mut self, j_c: Vec<f64>, xi: Vec<f64>) {
        self.j_c.push(j_c);
        self.xi.push(xi);
    }

    pub fn len(&self) -> usize {
        self.j_c.len()
    }

    pub fn is_empty(&self) -> bool {
        self.j_c.is_empty()
    }

    pub fn num_constraints(&self) -> usize {
        self.d.len()
    }

    fn violated(&self, k: usize, i: usize) -> bool {
        self.j_c[k][i] > self.d[i]
    }
}

/// Percentage of iterations where any constraint exceeds its threshold.
pub fn cvf(trace: &ConstraintTrace) -> Result<f64> {
    if trace.is_empty() {
        return Err(FoamError::Empty("constraint trace"));
    }
    let m = trace.num_constraints();
    let hits = (0..trace.len())
        .filter(|&k| (0..m).any(|i| trace.violated(k, i)))
        .count();
    Ok(100.0 * hits as f64 / trace.len() as f64)
}

pub fn cvf_per_constraint(trace: &ConstraintTrace) -> Result<Vec<f64>> {
    if trace.is_empty() {
        return Err(FoamError::Empty("constraint trace"));
    }
    Ok((0..trace.num_constraints())
        .map(|i| {
            let hits = (0..trace.len()).filter(|&k| trace.violated(k, i)).count();
            100.0 * hits as f64 / trace.len() as f64
        })
        .collect())
}

/// Lengths of every violation episode, pooled over constraints. An episode
/// runs from the first iteration above threshold to the first iteration back
/// at or below it; an episode still open at the end counts its elapsed length.
pub fn violation_episodes(trace: &ConstraintTrace) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 0..trace.num_constraints() {
        let mut onset = None;
        for k in 0..trace.len() {
            match (onset, trace.violated(k, i)) {
                (None, true) => onset = Some(k),
                (Some(s), false) => {
                    out.push(k - s);
                    onset = None;
                }
                _ => {}
            }
        }
        if let Some(s) = onset {
            out.push(trace.len() - s);
        }
    }
    out
}

/// Mean episode length; 0 when there are no episodes.
pub fn transient_length(trace: &ConstraintTrace) -> f64 {
    let eps = violation_episodes(trace);
    if eps.is_empty() {
        0.0
    } else {
        eps.iter().sum::<usize>() as f64 / eps.len() as f64
    }
}

/// Peak relative exceedance `max (j - d)_+ / d`.
pub fn overshoot(trace: &ConstraintTrace) -> f64 {
    let mut peak = 0.0f64;
    for row in &trace.j_c {
        for (j, d) in row.iter().zip(&trace.d) {
            peak = peak.max((j - d).max(0.0) / d);
        }
    }
    peak
}

/// `sum_k sum_i (j - d)_+`.
pub fn violation_auc(trace: &ConstraintTrace) -> f64 {
    trace
        .j_c
        .iter()
        .flat_map(|row| row.iter().zip(&trace.d).map(|(j, d)| (j - d).max(0.0)))
        .sum()
}

/// Number of times constraint `i` changes between violated and satisfied.
pub fn threshold_crossings(trace: &ConstraintTrace, i: usize) -> usize {
    (1..trace.len())
        .filter(|&k| trace.violated(k, i) != trace.violated(k - 1, i))
        .count()
}

/// Crossings summed over constraints.
pub fn total_crossings(trace: &ConstraintTrace) -> usize {
    (0..trace.num_constraints())
        .map(|i| threshold_crossings(trace, i))
        .sum()
}

/// `|mean fill per group-1 arrival - mean fill per group-0 arrival|`.
pub fn measured_dp_gap(eval: &[(u8, f64)]) -> f64 {
    let mut sum = [0.0; 2];
    let mut n = [0usize; 2];
    for (g, f) in eval {
        sum[*g as usize] += f;
        n[*g as usize] += 1;
    }
    let mean = |g: usize| if n[g] > 0 { sum[g] / n[g] as f64 } else { 0.0 };
    (mean(1) - mean(0)).abs()
}

/// One-sided paired Wilcoxon signed-rank test of the alternative that `x`
/// tends to be smaller than `y`. Zero differences are dropped and tied
/// magnitudes get midranks. The p-value is exact: the null distribution of
/// the positive-rank sum is built over all sign assignments.
pub fn wilcoxon_less(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(FoamError::DimensionMismatch {
            expected: x.len(),
            actual: y.len(),
            context: "paired samples",
        });
    }
    let mut diffs: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - a).filter(|d| *d != 0.0).collect();
    if diffs.iter().any(|d| !d.is_finite()) {
        return Err(FoamError::NonFinite("paired difference"));
    }
    if diffs.is_empty() {
        return Ok(1.0);
    }
    diffs.sort_by(|a, b| a.abs().total_cmp(&b.abs()));
    // Doubled midranks are integers.
    let mut ranks2 = vec![0usize; diffs.len()];
    let mut i = 0;
    while i < diffs.len() {
        let mut j = i;
        while j + 1 < diffs.len() && diffs[j + 1].abs() == diffs[i].abs() {
            j += 1;
        }
        for r in &mut ranks2[i..=j] {
            *r = i + j + 2;
        }
        i = j + 1;
    }
    let observed: usize = diffs
        .iter()
        .zip(&ranks2)
        .filter(|(d, _)| **d > 0.0)
        .map(|(_, r)| r)
        .sum();
    let total: usize = ranks2.iter().sum();
    let mut dist = vec![0.0; total + 1];
    dist[0] = 1.0;
    for &r in &ranks2 {
        for s in (r..=total).rev() {
            dist[s] = 0.5 * dist[s] + 0.5 * dist[s - r];
        }
        for v in &mut dist[..r] {
            *v *= 0.5;
        }
    }
    Ok(dist[observed..].iter().sum::<f64>().min(1.0))
}

/// Flat per-run summary.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub cvf: f64,
    pub cvf_per_constraint: Vec<f64>,
    pub transient_length: f64,
    pub overshoot: f64,
    pub violation_auc: f64,
    pub crossings: usize,
    pub dp_gap: f64,
    pub mqs: f64,
    pub lip_viol_pct: f64,
    pub lip_max_exceedance: f64,
    pub final_reward: f64,
}

impl RunMetrics {
    pub fn from_trace(trace: &ConstraintTrace) -> Result<Self> {
        Ok(Self {
            cvf: cvf(trace)?,
            cvf_per_constraint: cvf_per_constraint(trace)?,
            transient_length: transient_length(trace),
            overshoot: overshoot(trace),
            violation_auc: violation_auc(trace),
            crossings: total_crossings(trace),
            ..Self::default()
        })
    }
}
