//! PID-controlled adaptive safety margins.
//!
//! Each constraint runs its own SISO loop; no state is shared between
//! constraints.

use serde::{Deserialize, Serialize};

use crate::control::closed_loop_poles;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PidGains {
    pub kp: f64,
    pub ki: f64,
    pub kd: f64,
}

impl Default for PidGains {
    fn default() -> Self {
        Self {
            kp: 0.5,
            ki: 0.1,
            kd: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum GainValidation {
    Stable,
    Unstable(String),
}

impl GainValidation {
    pub fn is_stable(&self) -> bool {
        matches!(self, GainValidation::Stable)
    }
}

/// Checks the gains against the closed-loop stability conditions.
///
/// With `kd == 0` the three PI inequalities (`ki > 0`, `kp < 1`,
/// `2 kp + ki < 4`) are checked and the two closed-loop poles must lie
/// strictly inside the unit circle; both must pass. With `kd != 0` only the
/// numerically computed poles of the third-order loop decide.
pub fn validate_gains(gains: &PidGains) -> GainValidation {
    let PidGains { kp, ki, kd } = *gains;
    if !(kp.is_finite() && ki.is_finite() && kd.is_finite()) {
        return GainValidation::Unstable("non-finite gain".into());
    }
    let poles = closed_loop_poles(kp, ki, kd);
    if kd == 0.0 {
        let mut reasons = Vec::new();
        if ki <= 0.0 {
            reasons.push(format!("ki = {ki} must be > 0"));
        }
        if kp >= 1.0 {
            reasons.push(format!("kp = {kp} must be < 1"));
        }
        if 2.0 * kp + ki >= 4.0 {
            reasons.push(format!("2kp + ki = {} must be < 4", 2.0 * kp + ki));
        }
        if !poles.is_stable() {
            reasons.push(format!("closed-loop spectral radius {:.6} >= 1", poles.spectral_radius));
        }
        if reasons.is_empty() {
            GainValidation::Stable
        } else {
            GainValidation::Unstable(reasons.join("; "))
        }
    } else if poles.is_stable() {
        GainValidation::Stable
    } else {
        GainValidation::Unstable(format!(
            "PID closed-loop spectral radius {:.6} >= 1",
            poles.spectral_radius
        ))
    }
}

/// Two-sided CUSUM detector settings, in units of the warm-up standard
/// deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CusumConfig {
    pub warmup: usize,
    pub drift_sigmas: f64,
    pub threshold_sigmas: f64,
}

impl Default for CusumConfig {
    fn default() -> Self {
        Self {
            warmup: 500,
            drift_sigmas: 0.5,
            threshold_sigmas: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cusum {
    cfg: CusumConfig,
    warm: Vec<f64>,
    mean: f64,
    sigma: f64,
    pos: f64,
    neg: f64,
}

impl Cusum {
    pub fn new(cfg: CusumConfig) -> Self {
        Self {
            cfg,
            warm: Vec::with_capacity(cfg.warmup),
            mean: 0.0,
            sigma: 0.0,
            pos: 0.0,
            neg: 0.0,
        }
    }

    pub fn is_calibrated(&self) -> bool {
        self.warm.len() >= self.cfg.warmup
    }

    pub fn statistic(&self) -> f64 {
        self.pos.max(self.neg)
    }

    pub fn reset_statistic(&mut self) {
        self.pos = 0.0;
        self.neg = 0.0;
    }

    /// Feeds one observation; returns `true` on alarm.
    pub fn observe(&mut self, x: f64) -> bool {
        if !self.is_calibrated() {
            self.warm.push(x);
            if self.is_calibrated() {
                let n = self.warm.len() as f64;
                self.mean = self.warm.iter().sum::<f64>() / n;
                let var = self.warm.iter().map(|v| (v - self.mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
                self.sigma = var.sqrt();
            }
            return false;
        }
        // A perfectly flat warm-up leaves no scale; any change then alarms.
        let sigma = if self.sigma > 0.0 {
            self.sigma
        } else {
            f64::MIN_POSITIVE
        };
        let drift = self.cfg.drift_sigmas * sigma;
        let h = self.cfg.threshold_sigmas * sigma;
        self.pos = (self.pos + x - self.mean - drift).max(0.0);
        self.neg = (self.neg + self.mean - x - drift).max(0.0);
        self.pos > h || self.neg > h
    }
}

/// Per-constraint PID memory.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginState {
    pub xi: Vec<f64>,
    pub integral: Vec<f64>,
    pub prev_error: Vec<f64>,
    pub cusum_stat: Vec<f64>,
    detectors: Vec<Cusum>,
}

impl MarginState {
    pub fn new(m: usize, cusum: CusumConfig) -> Self {
        Self {
            xi: vec![0.0; m],
            integral: vec![0.0; m],
            prev_error: vec![0.0; m],
            cusum_stat: vec![0.0; m],
            detectors: vec![Cusum::new(cusum); m],
        }
    }

    pub fn len(&self) -> usize {
        self.xi.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xi.is_empty()
    }

    /// Positional PID update with clamp at zero:
    ///
    /// `xi = [kp e + ki sum(e) + kd (e - e_prev)]_+`
    ///
    /// The integral is frozen while the output is clamped and the current
    /// error would push it further below zero.
    pub fn update(&mut self, errors: &[f64], gains: &PidGains) {
        assert_eq!(errors.len(), self.len(), "error vector length");
        for (i, &e) in errors.iter().enumerate() {
            update_single(
                &mut self.xi[i],
                &mut self.integral[i],
                &mut self.prev_error[i],
                e,
                gains,
            );
        }
    }

    /// Feeds one violation-energy sample per constraint to the regime
    /// detectors. Alarmed constraints get their integral (and CUSUM
    /// statistic) zeroed; `xi` is left as is.
    pub fn regime_reset(&mut self, energies: &[f64]) -> Vec<bool> {
        assert_eq!(energies.len(), self.len(), "energy vector length");
        let mut alarms = vec![false; self.len()];
        for i in 0..self.len() {
            if self.detectors[i].observe(energies[i]) {
                alarms[i] = true;
                self.integral[i] = 0.0;
                self.detectors[i].reset_statistic();
            }
            self.cusum_stat[i] = self.detectors[i].statistic();
        }
        alarms
    }

    /// Runs [`MarginState::regime_reset`] over a whole stream and returns the
    /// indices at which any constraint alarmed.
    pub fn regime_reset_stream(&mut self, stream: &[Vec<f64>]) -> Vec<usize> {
        stream
            .iter()
            .enumerate()
            .filter_map(|(k, e)| self.regime_reset(e).iter().any(|a| *a).then_some(k))
            .collect()
    }
}

fn update_single(xi: &mut f64, integral: &mut f64, prev: &mut f64, e: f64, g: &PidGains) {
    let candidate = *integral + e;
    let raw = g.kp * e + g.ki * candidate + g.kd * (e - *prev);
    if raw < 0.0 {
        *xi = 0.0;
        if e >= 0.0 {
            *integral = candidate;
        }
    } else {
        *xi = raw;
        *integral = candidate;
    }
    *prev = e;
}

/// Violation energy `0.5 (j - d)_+^2` per constraint.
pub fn violation_energy(j_c: &[f64], d: &[f64]) -> Vec<f64> {
    j_c.iter().zip(d).map(|(j, d)| 0.5 * (j - d).max(0.0).powi(2)).collect()
}
