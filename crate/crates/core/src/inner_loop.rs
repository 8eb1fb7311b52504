//! Trust-region projection of the linearized constrained step, its dual,
//! infeasibility detection and the pure recovery step.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FoamError, Result};
use crate::estimator::{mean_kl, Fisher, TrajectoryBatch};
use crate::policy::Policy;

pub const LAMBDA_MIN: f64 = 1e-8;
pub const FEASIBILITY_TOL: f64 = 1e-8;
const MAX_NEWTON: usize = 50;
/// Subset enumeration is exponential in the number of constraints.
const MAX_ENUMERATED: usize = 16;

/// `max g'x  s.t.  Bx <= kappa,  x'Hx <= 2 delta`.
#[derive(Debug, Clone)]
pub struct SubproblemSpec<'a> {
    pub g: DVector<f64>,
    /// One row per constraint.
    pub b: DMatrix<f64>,
    pub fisher: &'a Fisher,
    pub kappa: Vec<f64>,
    pub delta: f64,
}

impl SubproblemSpec<'_> {
    pub fn num_constraints(&self) -> usize {
        self.kappa.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.g.len();
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(FoamError::InvalidConfig("trust radius must be positive".into()));
        }
        if self.fisher.dim() != n {
            return Err(FoamError::DimensionMismatch {
                expected: n,
                actual: self.fisher.dim(),
                context: "fisher dimension",
            });
        }
        if self.b.nrows() != self.kappa.len() || (self.b.nrows() > 0 && self.b.ncols() != n) {
            return Err(FoamError::DimensionMismatch {
                expected: self.kappa.len(),
                actual: self.b.nrows(),
                context: "constraint rows",
            });
        }
        if self.kappa.len() > MAX_ENUMERATED {
            return Err(FoamError::InvalidConfig(format!(
                "at most {MAX_ENUMERATED} constraints are supported"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DualStatus {
    Feasible,
    InfeasibleRecovery,
    /// Optimum lies inside the trust region; `lambda` is pinned at
    /// [`LAMBDA_MIN`].
    Degenerate,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub lambda: f64,
    pub nu: Vec<f64>,
    pub delta_theta: DVector<f64>,
    pub status: DualStatus,
    /// Optimal value of the subproblem, `g' delta_theta`.
    pub dual_value: f64,
    pub kkt_residual: f64,
    pub newton_steps: usize,
}

/// Low-dimensional projections of the subproblem through `H^{-1}`.
#[derive(Debug, Clone)]
struct Reduced {
    hg: DVector<f64>,
    hb: Vec<DVector<f64>>,
    /// `g' H^-1 g`
    q: f64,
    /// `B H^-1 g`
    r: DVector<f64>,
    /// `B H^-1 B'`
    s: DMatrix<f64>,
    kappa: DVector<f64>,
    delta: f64,
}

impl Reduced {
    fn new(spec: &SubproblemSpec<'_>) -> Result<Self> {
        spec.validate()?;
        let m = spec.num_constraints();
        let hg = spec.fisher.solve(&spec.g)?;
        let hb = (0..m)
            .map(|i| spec.fisher.solve(&spec.b.row(i).transpose()))
            .collect::<Result<Vec<_>>>()?;
        let q = spec.g.dot(&hg).max(0.0);
        let r = DVector::from_fn(m, |i, _| spec.b.row(i).transpose().dot(&hg));
        let mut s = DMatrix::from_fn(m, m, |i, j| spec.b.row(i).transpose().dot(&hb[j]));
        s = (&s + s.transpose()) * 0.5;
        Ok(Self {
            hg,
            hb,
            q,
            r,
            s,
            kappa: DVector::from_column_slice(&spec.kappa),
            delta: spec.delta,
        })
    }

    fn m(&self) -> usize {
        self.kappa.len()
    }

    fn quad(&self, nu: &DVector<f64>) -> f64 {
        (self.q - 2.0 * self.r.dot(nu) + nu.dot(&(&self.s * nu))).max(0.0)
    }

    fn phi(&self, nu: &DVector<f64>) -> f64 {
        (2.0 * self.delta * self.quad(nu)).sqrt() + self.kappa.dot(nu)
    }

    fn grad(&self, nu: &DVector<f64>) -> Option<DVector<f64>> {
        let qv = self.quad(nu);
        if qv <= 0.0 {
            return None;
        }
        let c = (2.0 * self.delta).sqrt() / qv.sqrt();
        Some((&self.s * nu - &self.r) * c + &self.kappa)
    }

    fn hessian(&self, nu: &DVector<f64>) -> Option<DMatrix<f64>> {
        let qv = self.quad(nu);
        if qv <= 0.0 {
            return None;
        }
        let v = &self.s * nu - &self.r;
        let c = (2.0 * self.delta).sqrt();
        Some((&self.s / qv.sqrt() - (&v * v.transpose()) / qv.powf(1.5)) * c)
    }

    fn sub(&self, idx: &[usize]) -> (DMatrix<f64>, DVector<f64>, DVector<f64>) {
        let k = idx.len();
        (
            DMatrix::from_fn(k, k, |a, b| self.s[(idx[a], idx[b])]),
            DVector::from_fn(k, |a, _| self.r[idx[a]]),
            DVector::from_fn(k, |a, _| self.kappa[idx[a]]),
        )
    }

    /// `H^-1 (g - B' nu)`.
    fn direction(&self, nu: &DVector<f64>) -> DVector<f64> {
        let mut d = self.hg.clone();
        for (i, hb) in self.hb.iter().enumerate() {
            if nu[i] != 0.0 {
                d.axpy(-nu[i], hb, 1.0);
            }
        }
        d
    }

    /// `min x'Hx / 2 s.t. Bx <= c`, by active-set enumeration. Infinite when
    /// the polytope is empty.
    fn min_norm_value(&self, c: &DVector<f64>) -> f64 {
        let m = self.m();
        let mut best = f64::INFINITY;
        for mask in 0u32..(1u32 << m) {
            let idx: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
            let (sa, _, _) = self.sub(&idx);
            let ca = DVector::from_fn(idx.len(), |a, _| c[idx[a]]);
            let nu_a = if idx.is_empty() {
                DVector::zeros(0)
            } else {
                match sa.clone().cholesky() {
                    Some(ch) => -ch.solve(&ca),
                    None => continue,
                }
            };
            if nu_a.iter().any(|v| *v < -1e-12) {
                continue;
            }
            let mut nu = DVector::zeros(m);
            for (a, &i) in idx.iter().enumerate() {
                nu[i] = nu_a[a].max(0.0);
            }
            // x = -H^-1 B' nu, so B x = -S nu.
            let bx = -(&self.s * &nu);
            let scale = 1.0 + c.amax();
            if (0..m).all(|j| bx[j] <= c[j] + 1e-10 * scale) {
                let value = 0.5 * nu.dot(&(&self.s * &nu));
                best = best.min(value);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    /// `min over the trust ellipsoid of max_i (b_i'x - kappa_i)`.
    pub phase_one: f64,
}

fn feasibility(red: &Reduced) -> FeasibilityReport {
    let m = red.m();
    if m == 0 || red.kappa.iter().all(|k| *k >= 0.0) {
        return FeasibilityReport {
            feasible: true,
            phase_one: if m == 0 { f64::NEG_INFINITY } else { -red.kappa.min() },
        };
    }
    let support = |i: usize| (2.0 * red.delta * red.s[(i, i)].max(0.0)).sqrt();
    if m == 1 {
        let t = -support(0) - red.kappa[0];
        return FeasibilityReport {
            feasible: t <= FEASIBILITY_TOL,
            phase_one: t,
        };
    }
    // At x = 0 the max is -min kappa; no x beats any single-row support bound.
    let mut hi = -red.kappa.min();
    let mut lo = (0..m)
        .map(|i| -support(i) - red.kappa[i])
        .fold(f64::NEG_INFINITY, f64::max);
    let reachable = |t: f64| red.min_norm_value(&red.kappa.add_scalar(t)) <= red.delta;
    for _ in 0..200 {
        if hi - lo <= 1e-14 * (1.0 + hi.abs()) {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if reachable(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    FeasibilityReport {
        feasible: hi <= FEASIBILITY_TOL,
        phase_one: hi,
    }
}

pub fn check_feasibility(spec: &SubproblemSpec<'_>) -> Result<FeasibilityReport> {
    Ok(feasibility(&Reduced::new(spec)?))
}

/// Exact dual minimizer over every active set; `None` when no candidate
/// exists (the subproblem is infeasible or numerically singular).
fn enumerate_dual(red: &Reduced) -> Option<(DVector<f64>, bool)> {
    let m = red.m();
    let mut best: Option<(f64, DVector<f64>, bool)> = None;
    for mask in 0u32..(1u32 << m) {
        let idx: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let (sa, ra, ka) = red.sub(&idx);
        let solve = |v: &DVector<f64>| -> Option<DVector<f64>> {
            if idx.is_empty() {
                Some(DVector::zeros(0))
            } else {
                sa.clone().cholesky().map(|ch| ch.solve(v))
            }
        };
        let (Some(sr), Some(sk)) = (solve(&ra), solve(&ka)) else {
            continue;
        };
        let num = red.q - ra.dot(&sr);
        let den = 2.0 * red.delta - ka.dot(&sk);
        let (nu_a, degenerate) = if num > 1e-13 * (1.0 + red.q) {
            if den <= 0.0 {
                continue;
            }
            let lam = (num / den).sqrt();
            (&sr - &sk * lam, false)
        } else {
            (sr, true)
        };
        if nu_a.iter().any(|v| *v < -1e-10 * (1.0 + v.abs())) {
            continue;
        }
        let mut nu = DVector::zeros(m);
        for (a, &i) in idx.iter().enumerate() {
            nu[i] = nu_a[a].max(0.0);
        }
        let val = red.phi(&nu);
        if best.as_ref().is_none_or(|(b, _, _)| val < *b - 1e-15 * (1.0 + b.abs())) {
            best = Some((val, nu, degenerate));
        }
    }
    best.map(|(_, nu, d)| (nu, d))
}

fn projected_grad_norm(nu: &DVector<f64>, grad: &DVector<f64>) -> f64 {
    nu.iter()
        .zip(grad.iter())
        .map(|(n, g)| if *n > 0.0 { g.abs() } else { (-g).max(0.0) })
        .fold(0.0, f64::max)
}

/// Projected Newton with Armijo backtracking and Levenberg regularization.
fn newton(red: &Reduced, mut nu: DVector<f64>) -> Result<(DVector<f64>, usize)> {
    let m = red.m();
    let tol = 1e-12 * (1.0 + red.kappa.amax() + red.q.sqrt());
    for step in 0..MAX_NEWTON {
        let (Some(grad), Some(hess)) = (red.grad(&nu), red.hessian(&nu)) else {
            return Ok((nu, step));
        };
        if projected_grad_norm(&nu, &grad) <= tol {
            return Ok((nu, step));
        }
        let free: Vec<usize> = (0..m).filter(|&i| !(nu[i] <= 1e-14 && grad[i] > 0.0)).collect();
        let mut dir = DVector::zeros(m);
        if !free.is_empty() {
            let hf = DMatrix::from_fn(free.len(), free.len(), |a, b| hess[(free[a], free[b])]);
            let gf = DVector::from_fn(free.len(), |a, _| grad[free[a]]);
            let mut mu = 0.0;
            let solved = loop {
                let mut reg = hf.clone();
                for i in 0..free.len() {
                    reg[(i, i)] += mu;
                }
                if let Some(ch) = reg.cholesky() {
                    break ch.solve(&gf);
                }
                mu = if mu == 0.0 {
                    1e-10 * (1.0 + hf.amax())
                } else {
                    mu * 10.0
                };
                if !mu.is_finite() {
                    return Err(FoamError::DualNonConvergence {
                        iterations: step,
                        residual: projected_grad_norm(&nu, &grad),
                    });
                }
            };
            for (a, &i) in free.iter().enumerate() {
                dir[i] = solved[a];
            }
        }
        let f0 = red.phi(&nu);
        let mut alpha = 1.0;
        let mut moved = false;
        while alpha > 1e-16 {
            let cand = (&nu - &dir * alpha).map(|v| v.max(0.0));
            let decrease = grad.dot(&(&nu - &cand));
            if red.phi(&cand) <= f0 - 1e-4 * decrease {
                moved = (&cand - &nu).amax() > 0.0;
                nu = cand;
                break;
            }
            alpha *= 0.5;
        }
        if !moved {
            return Ok((nu, step + 1));
        }
    }
    let grad = red.grad(&nu);
    match grad {
        Some(g) if projected_grad_norm(&nu, &g) > 1e-6 => Err(FoamError::DualNonConvergence {
            iterations: MAX_NEWTON,
            residual: projected_grad_norm(&nu, &g),
        }),
        _ => Ok((nu, MAX_NEWTON)),
    }
}

fn finish(
    red: &Reduced,
    spec: &SubproblemSpec<'_>,
    nu: DVector<f64>,
    steps: usize,
    degenerate_hint: bool,
) -> DualSolution {
    let m = red.m();
    let qv = red.quad(&nu);
    let lambda_star = (qv / (2.0 * red.delta)).sqrt();
    let degenerate = degenerate_hint || lambda_star < LAMBDA_MIN;
    let (lambda, delta_theta, status) = if degenerate {
        // Trust region inactive: smallest-norm point on the active faces.
        let idx: Vec<usize> = (0..m).filter(|&i| nu[i] > 0.0).collect();
        let (sa, _, ka) = red.sub(&idx);
        let mut x = DVector::zeros(spec.g.len());
        if let Some(ch) = (!idx.is_empty()).then(|| sa.cholesky()).flatten() {
            let w = ch.solve(&ka);
            for (a, &i) in idx.iter().enumerate() {
                x.axpy(w[a], &red.hb[i], 1.0);
            }
        }
        (LAMBDA_MIN, x, DualStatus::Degenerate)
    } else {
        (lambda_star, red.direction(&nu) / lambda_star, DualStatus::Feasible)
    };
    let bx = &spec.b * &delta_theta;
    let cs = (0..m).map(|i| nu[i] * (bx[i] - red.kappa[i]).abs()).fold(0.0, f64::max);
    let pg = match red.grad(&nu) {
        Some(g) if !degenerate => projected_grad_norm(&nu, &g),
        _ => {
            // Stationarity of the Lagrangian with lambda = 0: g = B' nu.
            let res = &spec.g - spec.b.transpose() * &nu;
            res.amax() / (1.0 + spec.g.amax())
        }
    };
    DualSolution {
        lambda,
        nu: nu.iter().copied().collect(),
        dual_value: spec.g.dot(&delta_theta),
        delta_theta,
        status,
        kkt_residual: pg.max(cs),
        newton_steps: steps,
    }
}

/// Solves the subproblem through its dual
/// `min_{nu >= 0} sqrt(2 delta Q(nu)) + kappa' nu`,
/// `Q(nu) = (g - B'nu)' H^-1 (g - B'nu)`, with `lambda = sqrt(Q / 2 delta)`
/// and `delta_theta = H^-1 (g - B'nu) / lambda`.
pub fn solve_dual(spec: &SubproblemSpec<'_>) -> Result<DualSolution> {
    let red = Reduced::new(spec)?;
    let feas = feasibility(&red);
    if !feas.feasible {
        return Ok(DualSolution {
            lambda: LAMBDA_MIN,
            nu: vec![0.0; red.m()],
            delta_theta: DVector::zeros(spec.g.len()),
            status: DualStatus::InfeasibleRecovery,
            dual_value: f64::NAN,
            kkt_residual: f64::NAN,
            newton_steps: 0,
        });
    }
    let (start, degenerate) = enumerate_dual(&red).unwrap_or((DVector::zeros(red.m()), false));
    if degenerate {
        return Ok(finish(&red, spec, start, 0, true));
    }
    let (nu, steps) = newton(&red, start)?;
    Ok(finish(&red, spec, nu, steps, false))
}

/// `1/2 sum_i (j_i - d_i)_+^2`.
pub fn total_violation_energy(j_c: &[f64], targets: &[f64]) -> f64 {
    0.5 * j_c
        .iter()
        .zip(targets)
        .map(|(j, d)| (j - d).max(0.0).powi(2))
        .sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryDirection {
    /// `-H^-1 grad L`, each gradient weighted by its exceedance.
    Weighted,
    /// `-H^-1` times the plain sum of violated-constraint gradients.
    Unweighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryScale {
    /// `eta` multiplies `p` directly.
    Raw,
    /// `eta = 1` puts `theta + eta p` on the trust-region boundary,
    /// `eta^2 p'Hp = 2 delta`.
    TrustRegion,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub eta0: f64,
    pub eta_min: f64,
    pub direction: RecoveryDirection,
    pub scale: RecoveryScale,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        Self {
            eta0: 1.0,
            eta_min: 1e-6,
            direction: RecoveryDirection::Weighted,
            scale: RecoveryScale::TrustRegion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryStatus {
    Accepted,
    /// Nothing is violated; `theta` is returned unchanged.
    NoViolation,
    /// No tried step size lowered the energy; `theta` is returned unchanged.
    NoDecrease,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryOutcome {
    pub theta: DVector<f64>,
    pub status: RecoveryStatus,
    pub eta: f64,
    pub energy_before: f64,
    pub energy_after: f64,
    /// `p' grad L`; negative whenever `grad L != 0`.
    pub directional_derivative: f64,
}

/// Gradient of the violation energy, `sum_i (j_i - d_i)_+ grad_i`.
pub fn energy_gradient(j_c: &[f64], targets: &[f64], grads: &DMatrix<f64>) -> DVector<f64> {
    let mut out = DVector::zeros(grads.ncols());
    for (i, (j, d)) in j_c.iter().zip(targets).enumerate() {
        let e = (j - d).max(0.0);
        if e > 0.0 {
            out.axpy(e, &grads.row(i).transpose(), 1.0);
        }
    }
    out
}

pub fn recovery_direction(
    j_c: &[f64],
    targets: &[f64],
    grads: &DMatrix<f64>,
    fisher: &Fisher,
    kind: RecoveryDirection,
) -> Result<DVector<f64>> {
    let sum = match kind {
        RecoveryDirection::Weighted => energy_gradient(j_c, targets, grads),
        RecoveryDirection::Unweighted => {
            let mut s = DVector::zeros(grads.ncols());
            for (i, (j, d)) in j_c.iter().zip(targets).enumerate() {
                if j > d {
                    s += grads.row(i).transpose();
                }
            }
            s
        }
    };
    Ok(-fisher.solve(&sum)?)
}

/// Backtracking descent on the violation energy. `evaluate` returns cost
/// estimates at a candidate parameter vector; `delta` is the trust radius
/// used by [`RecoveryScale::TrustRegion`].
#[allow(clippy::too_many_arguments)]
pub fn recovery_step<F>(
    theta: &DVector<f64>,
    j_c: &[f64],
    targets: &[f64],
    grads: &DMatrix<f64>,
    fisher: &Fisher,
    mut evaluate: F,
    delta: f64,
    cfg: &RecoveryConfig,
) -> Result<RecoveryOutcome>
where
    F: FnMut(&DVector<f64>) -> Result<Vec<f64>>,
{
    if j_c.len() != targets.len() || grads.nrows() != j_c.len() {
        return Err(FoamError::DimensionMismatch {
            expected: j_c.len(),
            actual: grads.nrows(),
            context: "recovery constraint count",
        });
    }
    let before = total_violation_energy(j_c, targets);
    let grad_l = energy_gradient(j_c, targets, grads);
    let unchanged = |status, dd| RecoveryOutcome {
        theta: theta.clone(),
        status,
        eta: 0.0,
        energy_before: before,
        energy_after: before,
        directional_derivative: dd,
    };
    if before == 0.0 || grad_l.amax() == 0.0 {
        return Ok(unchanged(RecoveryStatus::NoViolation, 0.0));
    }
    let p = recovery_direction(j_c, targets, grads, fisher, cfg.direction)?;
    let dd = p.dot(&grad_l);
    let unit = match cfg.scale {
        RecoveryScale::Raw => 1.0,
        RecoveryScale::TrustRegion => {
            let php = fisher.quad(&p);
            if php > 0.0 && delta > 0.0 {
                (2.0 * delta / php).sqrt()
            } else {
                1.0
            }
        }
    };
    // `eta_min` bounds the multiplier of `p` itself under either scale.
    let mut eta = cfg.eta0;
    while eta * unit >= cfg.eta_min {
        let cand = theta + &p * (eta * unit);
        let costs = evaluate(&cand)?;
        if costs.len() != targets.len() {
            return Err(FoamError::EnergyEvaluation(format!(
                "evaluator returned {} costs, expected {}",
                costs.len(),
                targets.len()
            )));
        }
        let after = total_violation_energy(&costs, targets);
        if !after.is_finite() {
            return Err(FoamError::EnergyEvaluation("non-finite energy".into()));
        }
        if after < before {
            return Ok(RecoveryOutcome {
                theta: cand,
                status: RecoveryStatus::Accepted,
                eta: eta * unit,
                energy_before: before,
                energy_after: after,
                directional_derivative: dd,
            });
        }
        eta *= 0.5;
    }
    Ok(unchanged(RecoveryStatus::NoDecrease, dd))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    pub kl: f64,
    pub halvings: usize,
    /// The full step was abandoned and the policy kept.
    pub reverted: bool,
}

pub const KL_SAFEGUARD: f64 = 1.5;
const MAX_HALVINGS: usize = 30;

/// `theta + delta_theta`, optionally projected, halved while `kl(old, new)`
/// exceeds `1.5 delta`.
pub fn apply_update<F>(
    policy: &mut Policy,
    delta_theta: &DVector<f64>,
    delta: f64,
    project: bool,
    kl: F,
) -> Result<UpdateReport>
where
    F: Fn(&Policy, &Policy) -> Result<f64>,
{
    if delta_theta.iter().any(|v| !v.is_finite()) {
        return Err(FoamError::InvalidConfig("non-finite update".into()));
    }
    let old = policy.clone();
    let theta = old.flat();
    let limit = KL_SAFEGUARD * delta;
    let mut step = delta_theta.clone();
    for halvings in 0..=MAX_HALVINGS {
        let mut cand = old.clone();
        cand.set_flat(&(&theta + &step))?;
        if project {
            cand.spectral_project();
        }
        let d = kl(&old, &cand)?;
        if d <= limit {
            *policy = cand;
            return Ok(UpdateReport {
                kl: d,
                halvings,
                reverted: false,
            });
        }
        step *= 0.5;
    }
    Ok(UpdateReport {
        kl: 0.0,
        halvings: MAX_HALVINGS,
        reverted: true,
    })
}

/// KL closure over the states of a batch.
pub fn batch_kl(batch: &TrajectoryBatch) -> impl Fn(&Policy, &Policy) -> Result<f64> + '_ {
    move |old, new| mean_kl(old, new, batch)
}
