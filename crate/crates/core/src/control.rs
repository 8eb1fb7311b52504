//! Linear closed-loop analysis of the margin controller.
//!
//! The optimizer is modelled as the plant `e[k+1] = -xi[k] + w[k]`, and the
//! safety margin follows the incremental PI(D) law
//!
//! ```text
//! xi[k+1] = xi[k] + kp (e[k+1] - e[k]) + ki e[k+1] + kd (e[k+1] - 2 e[k] + e[k-1])
//! ```
//!
//! Everything here is linear (no clamp) and independent of the RL machinery.

use nalgebra::{Complex, DMatrix};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{FoamError, Result};
use crate::outer_loop::PidGains;

/// Disturbance generator for [`simulate_closed_loop`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Disturbance {
    /// `w[k] = w_bar` for every k.
    Constant(f64),
    /// i.i.d. uniform on `[-w_max, w_max]`.
    Uniform(f64),
    /// `w[k] = rho w[k-1] + sigma eps[k]`, `eps ~ N(0, 1)`, `w[-1] = 0`.
    Ar1 { rho: f64, sigma: f64 },
}

impl Disturbance {
    fn sample<R: Rng + ?Sized>(&self, prev: f64, rng: &mut R) -> f64 {
        match *self {
            Disturbance::Constant(w) => w,
            Disturbance::Uniform(w_max) => {
                if w_max == 0.0 {
                    0.0
                } else {
                    rng.random_range(-w_max..=w_max)
                }
            }
            Disturbance::Ar1 { rho, sigma } => {
                let eps: f64 = Normal::new(0.0, 1.0).unwrap().sample(rng);
                rho * prev + sigma * eps
            }
        }
    }
}

/// Error, margin and disturbance sequences of one closed-loop run.
///
/// All three vectors have the same length and satisfy
/// `errors[k+1] == -margins[k] + disturbances[k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClosedLoopTrace {
    pub errors: Vec<f64>,
    pub margins: Vec<f64>,
    pub disturbances: Vec<f64>,
}

impl ClosedLoopTrace {
    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    /// Largest violation of the plant identity over the trace.
    pub fn plant_residual(&self) -> f64 {
        (0..self.len().saturating_sub(1))
            .map(|k| (self.errors[k + 1] + self.margins[k] - self.disturbances[k]).abs())
            .fold(0.0, f64::max)
    }
}

/// Iterates the linear plant/controller pair for `steps` samples starting
/// from `(e0, xi0)`.
pub fn simulate_closed_loop<R: Rng + ?Sized>(
    gains: &PidGains,
    disturbance: Disturbance,
    steps: usize,
    initial: (f64, f64),
    rng: &mut R,
) -> ClosedLoopTrace {
    let steps = steps.max(1);
    let mut errors = Vec::with_capacity(steps);
    let mut margins = Vec::with_capacity(steps);
    let mut disturbances = Vec::with_capacity(steps);

    let (mut e, mut xi) = initial;
    let mut e_prev = e;
    let mut w = disturbance.sample(0.0, rng);
    errors.push(e);
    margins.push(xi);
    disturbances.push(w);

    for _ in 1..steps {
        let e_next = -xi + w;
        let xi_next = xi + gains.kp * (e_next - e) + gains.ki * e_next + gains.kd * (e_next - 2.0 * e + e_prev);
        e_prev = e;
        e = e_next;
        xi = xi_next;
        w = disturbance.sample(w, rng);
        errors.push(e);
        margins.push(xi);
        disturbances.push(w);
    }

    ClosedLoopTrace {
        errors,
        margins,
        disturbances,
    }
}

/// Second-order Jury test on `D(z) = z^2 + (kp + ki - 1) z - kp`.
pub fn jury_stable(kp: f64, ki: f64) -> bool {
    let a1 = kp + ki - 1.0;
    let a0 = -kp;
    let d_at = |z: f64| z * z + a1 * z + a0;
    a0.abs() < 1.0 && d_at(1.0) > 0.0 && d_at(-1.0) > 0.0
}

/// The three PI gain inequalities as stated for the asymptotic-feasibility
/// result: `ki > 0`, `kp < 1`, `2 kp + ki < 4`.
pub fn stated_pi_conditions(kp: f64, ki: f64) -> bool {
    ki > 0.0 && kp < 1.0 && 2.0 * kp + ki < 4.0
}

/// Distance of `(kp, ki)` to the nearest boundary of either
/// [`jury_stable`] or [`stated_pi_conditions`].
pub fn boundary_distance(kp: f64, ki: f64) -> f64 {
    let a1 = kp + ki - 1.0;
    let a0 = -kp;
    [
        (a0.abs() - 1.0).abs(),
        (1.0 + a1 + a0).abs(),
        (1.0 - a1 + a0).abs(),
        ki.abs(),
        (kp - 1.0).abs(),
        (2.0 * kp + ki - 4.0).abs(),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min)
}

/// Closed-loop characteristic polynomial, highest power first.
///
/// Quadratic for `kd == 0`, otherwise the cubic obtained from the velocity
/// form PID: `z^3 + (kp+ki+kd-1) z^2 - (kp+2kd) z + kd`.
pub fn characteristic_polynomial(gains: &PidGains) -> Vec<f64> {
    let PidGains { kp, ki, kd } = *gains;
    if kd == 0.0 {
        vec![1.0, kp + ki - 1.0, -kp]
    } else {
        vec![1.0, kp + ki + kd - 1.0, -(kp + 2.0 * kd), kd]
    }
}

/// Closed-loop poles and their spectral radius.
#[derive(Debug, Clone, PartialEq)]
pub struct PoleReport {
    pub poles: Vec<Complex<f64>>,
    pub spectral_radius: f64,
}

impl PoleReport {
    pub fn is_stable(&self) -> bool {
        self.spectral_radius < 1.0
    }

    /// Steps needed for a mode of magnitude `spectral_radius` to decay by
    /// 1e-4; `None` for non-contracting loops.
    pub fn settle_steps(&self) -> Option<usize> {
        settling_horizon(self.spectral_radius)
    }
}

/// `ceil(ln(1e-4) / ln(rho))`.
pub fn settling_horizon(rho: f64) -> Option<usize> {
    // NaN is not settling either.
    if rho.is_nan() || rho >= 1.0 {
        return None;
    }
    if rho <= 0.0 {
        return Some(1);
    }
    Some(((1e-4f64).ln() / rho.ln()).ceil().max(1.0) as usize)
}

pub fn closed_loop_poles(kp: f64, ki: f64, kd: f64) -> PoleReport {
    let poly = characteristic_polynomial(&PidGains { kp, ki, kd });
    let poles = polynomial_roots(&poly);
    let spectral_radius = poles.iter().map(|p| p.norm()).fold(0.0, f64::max);
    PoleReport { poles, spectral_radius }
}

/// Roots of a monic-normalisable real polynomial given highest power first.
fn polynomial_roots(coeffs: &[f64]) -> Vec<Complex<f64>> {
    let lead = coeffs[0];
    let c: Vec<f64> = coeffs.iter().map(|v| v / lead).collect();
    let degree = c.len() - 1;
    match degree {
        0 => Vec::new(),
        1 => vec![Complex::new(-c[1], 0.0)],
        2 => {
            let (b, q) = (c[1], c[2]);
            let disc = b * b - 4.0 * q;
            if disc >= 0.0 {
                let s = disc.sqrt();
                // Numerically stable pairing of the two real roots.
                let t = -0.5 * (b + b.signum() * s);
                if t == 0.0 {
                    vec![Complex::new(0.0, 0.0), Complex::new(0.0, 0.0)]
                } else {
                    vec![Complex::new(t, 0.0), Complex::new(q / t, 0.0)]
                }
            } else {
                let s = (-disc).sqrt();
                vec![Complex::new(-b / 2.0, s / 2.0), Complex::new(-b / 2.0, -s / 2.0)]
            }
        }
        _ => {
            let mut companion = DMatrix::<f64>::zeros(degree, degree);
            for j in 0..degree {
                companion[(0, j)] = -c[j + 1];
            }
            for i in 1..degree {
                companion[(i, i - 1)] = 1.0;
            }
            companion.complex_eigenvalues().iter().copied().collect()
        }
    }
}

/// First `len` taps of the disturbance-to-error impulse response, obtained by
/// long division of `z^{n-1}(z - 1) / D(z)` in powers of `z^{-1}`.
pub fn impulse_response(gains: &PidGains, len: usize) -> Vec<f64> {
    let den = characteristic_polynomial(gains);
    // Numerator (1 - z^-1) padded to the denominator order.
    let mut num = vec![0.0; den.len()];
    num[0] = 1.0;
    num[1] = -1.0;
    let mut h = Vec::with_capacity(len);
    for k in 0..len {
        let mut v = if k < num.len() { num[k] } else { 0.0 };
        for j in 1..den.len() {
            if k >= j {
                v -= den[j] * h[k - j];
            }
        }
        h.push(v);
    }
    h
}

/// `sum_k |h_k|` over the first `len` taps.
pub fn impulse_gain_bound(gains: &PidGains, len: usize) -> f64 {
    impulse_response(gains, len).iter().map(|v| v.abs()).sum()
}

/// Empirical BIBO check result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiboReport {
    pub sup_e: f64,
    pub sup_xi: f64,
    pub gain_bound: f64,
    /// `gain_bound * w_max`.
    pub error_bound: f64,
}

/// Runs `trials` closed loops driven by i.i.d. uniform disturbances on
/// `[-w_max, w_max]` and reports the largest error and margin magnitudes
/// alongside the impulse-response bound.
pub fn empirical_bibo_bound<R: Rng + ?Sized>(
    gains: &PidGains,
    w_max: f64,
    steps: usize,
    trials: usize,
    rng: &mut R,
) -> Result<BiboReport> {
    let poles = closed_loop_poles(gains.kp, gains.ki, gains.kd);
    if !poles.is_stable() {
        return Err(FoamError::UnstableGains(format!(
            "spectral radius {:.6} >= 1",
            poles.spectral_radius
        )));
    }
    let gain_bound = impulse_gain_bound(gains, steps);
    let mut sup_e: f64 = 0.0;
    let mut sup_xi: f64 = 0.0;
    for _ in 0..trials {
        let trace = simulate_closed_loop(gains, Disturbance::Uniform(w_max), steps, (0.0, 0.0), rng);
        sup_e = trace.errors.iter().fold(sup_e, |m, v| m.max(v.abs()));
        sup_xi = trace.margins.iter().fold(sup_xi, |m, v| m.max(v.abs()));
    }
    Ok(BiboReport {
        sup_e,
        sup_xi,
        gain_bound,
        error_bound: gain_bound * w_max,
    })
}

/// One row of the stability grid export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityRow {
    pub kp: f64,
    pub ki: f64,
    pub jury: bool,
    pub spectral_radius: f64,
    pub settle_steps: Option<usize>,
}

/// Evaluates `jury_stable` and the pole radius over an evenly spaced grid
/// (endpoints included).
pub fn stability_grid(kp: (f64, f64, usize), ki: (f64, f64, usize)) -> Vec<StabilityRow> {
    let axis = |(lo, hi, n): (f64, f64, usize)| -> Vec<f64> {
        if n <= 1 {
            vec![lo]
        } else {
            (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
        }
    };
    let mut rows = Vec::new();
    for &p in &axis(kp) {
        for &i in &axis(ki) {
            let poles = closed_loop_poles(p, i, 0.0);
            rows.push(StabilityRow {
                kp: p,
                ki: i,
                jury: jury_stable(p, i),
                spectral_radius: poles.spectral_radius,
                settle_steps: poles.settle_steps(),
            });
        }
    }
    rows
}
