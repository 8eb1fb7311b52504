//! Brute-force primal solver for small trust-region subproblems, and the
//! equivalence sweep that compares it with the dual solver.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::estimator::Fisher;
use crate::inner_loop::{check_feasibility, solve_dual, DualStatus, SubproblemSpec};

const FEAS_TOL: f64 = 1e-9;

/// `max g'x  s.t.  Bx <= kappa,  x'Hx <= 2 delta` with dense `H`.
#[derive(Debug, Clone, PartialEq)]
pub struct QpInstance {
    pub g: DVector<f64>,
    pub b: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub kappa: Vec<f64>,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrimalSolution {
    pub x: DVector<f64>,
    pub objective: f64,
}

impl QpInstance {
    pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize) -> Self {
        let mut normal = || -> f64 { StandardNormal.sample(rng) };
        let a = DMatrix::from_fn(n, n, |_, _| normal());
        let mut h = &a * a.transpose() / n as f64;
        for i in 0..n {
            h[(i, i)] += 0.1;
        }
        let g = DVector::from_fn(n, |_, _| normal());
        let b = DMatrix::from_fn(m, n, |_, _| normal());
        let kappa = (0..m).map(|_| rng.random_range(-0.15..0.4)).collect();
        let delta = rng.random_range(0.005..0.05);
        Self { g, b, h, kappa, delta }
    }

    /// Largest constraint violation of `x`, trust region included.
    pub fn violation(&self, x: &DVector<f64>) -> f64 {
        let tr = 0.5 * x.dot(&(&self.h * x)) - self.delta;
        let lin = (0..self.kappa.len())
            .map(|i| self.b.row(i).dot(&x.transpose()) - self.kappa[i])
            .fold(f64::NEG_INFINITY, f64::max);
        tr.max(lin)
    }
}

/// Enumerates active sets in whitened coordinates. For each set, the
/// candidates are the least-norm point of the active face and the maximizer
/// of the objective over the face's intersection with the trust sphere.
/// `None` when no candidate is feasible.
pub fn brute_force_primal(inst: &QpInstance) -> Option<PrimalSolution> {
    let n = inst.g.len();
    let m = inst.kappa.len();
    let l = inst.h.clone().cholesky()?.l();
    let c = l.solve_lower_triangular(&inst.g)?;
    // Rows of A are L^-1 b_i.
    let a = l.solve_lower_triangular(&inst.b.transpose())?.transpose();
    let r2 = 2.0 * inst.delta;
    let feasible = |y: &DVector<f64>| {
        y.norm_squared() <= r2 * (1.0 + FEAS_TOL)
            && (0..m).all(|i| a.row(i).dot(&y.transpose()) <= inst.kappa[i] + FEAS_TOL)
    };

    let mut best: Option<(f64, DVector<f64>)> = None;
    let mut offer = |y: DVector<f64>| {
        if feasible(&y) {
            let v = c.dot(&y);
            if best.as_ref().is_none_or(|(b, _)| v > *b) {
                best = Some((v, y));
            }
        }
    };
    for mask in 0u32..(1 << m) {
        let rows: Vec<usize> = (0..m).filter(|i| mask >> i & 1 == 1).collect();
        if rows.len() > n {
            continue;
        }
        let (y0, proj) = if rows.is_empty() {
            (DVector::zeros(n), DMatrix::identity(n, n))
        } else {
            let a_s = DMatrix::from_fn(rows.len(), n, |r, j| a[(rows[r], j)]);
            let k_s = DVector::from_iterator(rows.len(), rows.iter().map(|&i| inst.kappa[i]));
            let Some(gram_inv) = (&a_s * a_s.transpose()).try_inverse() else {
                continue;
            };
            let pinv = a_s.transpose() * gram_inv;
            (&pinv * k_s, DMatrix::identity(n, n) - &pinv * a_s)
        };
        let slack = r2 - y0.norm_squared();
        if slack < 0.0 {
            continue;
        }
        let pc = &proj * &c;
        if pc.norm() > 1e-12 {
            offer(&y0 + &pc * (slack.sqrt() / pc.norm()));
        } else {
            // Objective is flat on the face; its sphere endpoints along the
            // face directions are candidates too.
            for j in 0..n {
                let u = proj.column(j).into_owned();
                if u.norm() > 1e-12 {
                    let u = u.normalize() * slack.sqrt();
                    offer(&y0 + &u);
                    offer(&y0 - &u);
                }
            }
        }
        offer(y0);
    }
    let (objective, y) = best?;
    let x = l.tr_solve_lower_triangular(&y)?;
    Some(PrimalSolution { x, objective })
}

/// `sqrt(2 delta / g'H^-1 g) H^-1 g`.
pub fn natural_gradient_step(inst: &QpInstance) -> Option<DVector<f64>> {
    let hg = inst.h.clone().cholesky()?.solve(&inst.g);
    let q = inst.g.dot(&hg);
    Some(hg * (2.0 * inst.delta / q).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquivalenceReport {
    pub instances: usize,
    pub failures: Vec<String>,
    pub max_objective_gap: f64,
    pub max_violation: f64,
    pub max_natural_gap: f64,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares the dual solver with the brute-force primal on random
/// instances with `N <= 6`, `M <= 2`.
pub fn run_equivalence(instances: usize, seed: u64, tol: f64, natural_tol: f64) -> Result<EquivalenceReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = EquivalenceReport {
        instances,
        failures: Vec::new(),
        max_objective_gap: 0.0,
        max_violation: 0.0,
        max_natural_gap: 0.0,
    };
    for k in 0..instances {
        let n = rng.random_range(1..=6);
        let m = rng.random_range(0..=2);
        let inst = QpInstance::random(&mut rng, n, m);
        let fisher = Fisher::Dense(inst.h.clone());
        let spec = SubproblemSpec {
            g: inst.g.clone(),
            b: inst.b.clone(),
            fisher: &fisher,
            kappa: inst.kappa.clone(),
            delta: inst.delta,
        };
        let oracle = brute_force_primal(&inst);
        let feasible = check_feasibility(&spec)?.feasible;
        match (feasible, oracle) {
            (false, None) => {}
            (true, Some(opt)) => {
                let sol = solve_dual(&spec)?;
                if sol.status == DualStatus::InfeasibleRecovery {
                    rep.failures.push(format!("instance {k}: solver reported infeasible"));
                    continue;
                }
                let gap = (inst.g.dot(&sol.delta_theta) - opt.objective).abs();
                let viol = inst.violation(&sol.delta_theta).max(0.0);
                rep.max_objective_gap = rep.max_objective_gap.max(gap);
                rep.max_violation = rep.max_violation.max(viol);
                if gap > tol || viol > tol {
                    rep.failures
                        .push(format!("instance {k} (n={n}, m={m}): gap {gap:e}, violation {viol:e}"));
                }
                if m == 0 {
                    if let Some(x) = natural_gradient_step(&inst) {
                        let d = (&sol.delta_theta - x).amax();
                        rep.max_natural_gap = rep.max_natural_gap.max(d);
                        if d > natural_tol {
                            rep.failures.push(format!("instance {k}: natural-gradient gap {d:e}"));
                        }
                    }
                }
            }
            (f, o) => rep.failures.push(format!(
                "instance {k}: feasibility check says {f}, brute force found {}",
                if o.is_some() { "a solution" } else { "none" }
            )),
        }
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unconstrained_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inst = QpInstance::random(&mut rng, 4, 0);
        let p = brute_force_primal(&inst).unwrap();
        let x = natural_gradient_step(&inst).unwrap();
        assert!((p.x - x).amax() < 1e-10);
    }

    #[test]
    fn halfspace_cut_in_two_dimensions() {
        // H = I: the cut x1 <= 0.05 binds inside the disc of radius 0.2.
        let inst = QpInstance {
            g: DVector::from_vec(vec![1.0, 0.0]),
            b: DMatrix::from_row_slice(1, 2, &[1.0, 0.0]),
            h: DMatrix::identity(2, 2),
            kappa: vec![0.05],
            delta: 0.02,
        };
        let p = brute_force_primal(&inst).unwrap();
        assert!((p.objective - 0.05).abs() < 1e-12);
    }

    #[test]
    fn empty_feasible_set() {
        let inst = QpInstance {
            g: DVector::from_vec(vec![1.0]),
            b: DMatrix::from_row_slice(1, 1, &[1.0]),
            h: DMatrix::identity(1, 1),
            kappa: vec![-1.0],
            delta: 0.01,
        };
        assert!(brute_force_primal(&inst).is_none());
    }

    #[test]
    fn small_sweep_agrees() {
        let rep = run_equivalence(60, 11, 1e-5, 1e-10).unwrap();
        assert!(rep.passed(), "{:?}", rep.failures);
    }
}
