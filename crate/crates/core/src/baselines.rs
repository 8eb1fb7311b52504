//! Rule-based allocators, Lagrangian optimizers and the ablation variants.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::env::{BookState, IncomingOrder};
use crate::error::{FoamError, Result};
use crate::estimator::GradientBundle;
use crate::outer_loop::{MarginState, PidGains};
use crate::policy::Policy;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantName {
    Fifo,
    ProRata,
    SizeTime,
    Unconstrained,
    Lagrangian,
    PidLagrangian,
    VanillaCpo,
    Foam,
    FoamNoPid,
    FoamNoTr,
    FoamNoSpecnorm,
    FoamPOnly,
    FoamPiOnly,
    FoamNoRecovery,
}

impl VariantName {
    pub const ALL: [VariantName; 14] = [
        VariantName::Fifo,
        VariantName::ProRata,
        VariantName::SizeTime,
        VariantName::Unconstrained,
        VariantName::Lagrangian,
        VariantName::PidLagrangian,
        VariantName::VanillaCpo,
        VariantName::Foam,
        VariantName::FoamNoPid,
        VariantName::FoamNoTr,
        VariantName::FoamNoSpecnorm,
        VariantName::FoamPOnly,
        VariantName::FoamPiOnly,
        VariantName::FoamNoRecovery,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            VariantName::Fifo => "fifo",
            VariantName::ProRata => "pro_rata",
            VariantName::SizeTime => "size_time",
            VariantName::Unconstrained => "unconstrained",
            VariantName::Lagrangian => "lagrangian",
            VariantName::PidLagrangian => "pid_lagrangian",
            VariantName::VanillaCpo => "vanilla_cpo",
            VariantName::Foam => "foam",
            VariantName::FoamNoPid => "foam_no_pid",
            VariantName::FoamNoTr => "foam_no_tr",
            VariantName::FoamNoSpecnorm => "foam_no_specnorm",
            VariantName::FoamPOnly => "foam_p_only",
            VariantName::FoamPiOnly => "foam_pi_only",
            VariantName::FoamNoRecovery => "foam_no_recovery",
        }
    }
}

impl fmt::Display for VariantName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantName {
    type Err = FoamError;

    fn from_str(s: &str) -> Result<Self> {
        VariantName::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| FoamError::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleKind {
    Fifo,
    ProRata,
    /// Equal blend of pro-rata and FIFO.
    SizeTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    Foam,
    Lagrangian,
    PidLagrangian,
    Rule(RuleKind),
}

/// Switches that distinguish the variants of one trainer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariantFlags {
    pub algorithm: Algorithm,
    /// PID margins; when off, `xi` stays 0.
    pub margins: bool,
    /// Dual trust-region solve; when off, a penalized gradient step.
    pub trust_region: bool,
    pub spectral: bool,
    pub recovery: bool,
    /// When off, the optimizer sees no constraints.
    pub constrained: bool,
}

impl Default for VariantFlags {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::Foam,
            margins: true,
            trust_region: true,
            spectral: true,
            recovery: true,
            constrained: true,
        }
    }
}

/// Pure config transform for one variant.
pub fn make_variant(base: &ExperimentConfig, name: VariantName) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.variant = name;
    let mut flags = VariantFlags::default();
    match name {
        VariantName::Fifo => flags.algorithm = Algorithm::Rule(RuleKind::Fifo),
        VariantName::ProRata => flags.algorithm = Algorithm::Rule(RuleKind::ProRata),
        VariantName::SizeTime => flags.algorithm = Algorithm::Rule(RuleKind::SizeTime),
        VariantName::Unconstrained => {
            flags.constrained = false;
            flags.margins = false;
        }
        VariantName::Lagrangian => flags.algorithm = Algorithm::Lagrangian,
        VariantName::PidLagrangian => flags.algorithm = Algorithm::PidLagrangian,
        VariantName::VanillaCpo | VariantName::FoamNoPid => flags.margins = false,
        VariantName::Foam => {}
        VariantName::FoamNoTr => flags.trust_region = false,
        VariantName::FoamNoSpecnorm => flags.spectral = false,
        VariantName::FoamPOnly => {
            cfg.gains.ki = 0.0;
            cfg.gains.kd = 0.0;
        }
        VariantName::FoamPiOnly => cfg.gains.kd = 0.0,
        VariantName::FoamNoRecovery => flags.recovery = false,
    }
    cfg.flags = flags;
    cfg
}

/// Same trainer up to the variant label.
pub fn same_trainer(a: &ExperimentConfig, b: &ExperimentConfig) -> bool {
    let mut a = a.clone();
    let mut b = b.clone();
    a.variant = VariantName::Foam;
    b.variant = VariantName::Foam;
    a == b
}

fn uniform(k: usize) -> Vec<f64> {
    vec![1.0 / k as f64; k]
}

/// Feasible counterparties resting at the best (lowest-index) level.
fn best_level(state: &BookState, order: &IncomingOrder) -> Vec<usize> {
    let mask = state.mask(order.side);
    let best = state
        .counterparties
        .iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .map(|(c, _)| c.level)
        .min();
    match best {
        None => Vec::new(),
        Some(level) => (0..mask.len())
            .filter(|&j| mask[j] && state.counterparties[j].level == level)
            .collect(),
    }
}

/// All mass on the earliest arrival at the best price, split evenly over
/// ties; uniform when nothing is feasible.
pub fn fifo_allocate(state: &BookState, order: &IncomingOrder) -> Vec<f64> {
    let k = state.counterparties.len();
    let best = best_level(state, order);
    let Some(first) = best.iter().map(|&j| state.counterparties[j].arrival_rank).min() else {
        return uniform(k);
    };
    let winners: Vec<usize> = best
        .into_iter()
        .filter(|&j| state.counterparties[j].arrival_rank == first)
        .collect();
    let mut a = vec![0.0; k];
    for &j in &winners {
        a[j] = 1.0 / winners.len() as f64;
    }
    a
}

/// Mass proportional to resting volume at the best price.
pub fn pro_rata_allocate(state: &BookState, order: &IncomingOrder) -> Vec<f64> {
    let k = state.counterparties.len();
    let best = best_level(state, order);
    let total: f64 = best.iter().map(|&j| state.counterparties[j].volume).sum();
    if best.is_empty() || total <= 0.0 {
        return uniform(k);
    }
    let mut a = vec![0.0; k];
    for &j in &best {
        a[j] = state.counterparties[j].volume / total;
    }
    a
}

pub const SIZE_TIME_WEIGHT: f64 = 0.5;

/// `w pro_rata + (1 - w) fifo`.
pub fn size_time_allocate(state: &BookState, order: &IncomingOrder) -> Vec<f64> {
    let p = pro_rata_allocate(state, order);
    let f = fifo_allocate(state, order);
    p.iter()
        .zip(&f)
        .map(|(a, b)| SIZE_TIME_WEIGHT * a + (1.0 - SIZE_TIME_WEIGHT) * b)
        .collect()
}

pub fn rule_allocate(kind: RuleKind, state: &BookState, order: &IncomingOrder) -> Vec<f64> {
    match kind {
        RuleKind::Fifo => fifo_allocate(state, order),
        RuleKind::ProRata => pro_rata_allocate(state, order),
        RuleKind::SizeTime => size_time_allocate(state, order),
    }
}

fn penalized_direction(bundle: &GradientBundle, weights: &[f64]) -> Result<DVector<f64>> {
    if weights.len() != bundle.b.nrows() {
        return Err(FoamError::DimensionMismatch {
            expected: bundle.b.nrows(),
            actual: weights.len(),
            context: "penalty weights vs constraints",
        });
    }
    let mut dir = bundle.g.clone();
    for (i, w) in weights.iter().enumerate() {
        if *w != 0.0 {
            dir.axpy(-w, &bundle.b.row(i).transpose(), 1.0);
        }
    }
    Ok(dir)
}

fn stepped(policy: &Policy, dir: &DVector<f64>, lr: f64) -> Result<Policy> {
    let mut next = policy.clone();
    next.set_flat(&(policy.flat() + dir * lr))?;
    Ok(next)
}

/// `theta + lr_theta (g - B' nu)`, then `nu <- [nu + lr_nu (J_C - d)]_+`.
pub fn lagrangian_step(
    policy: &Policy,
    bundle: &GradientBundle,
    nu: &[f64],
    lr_theta: f64,
    lr_nu: f64,
    d: &[f64],
) -> Result<(Policy, Vec<f64>)> {
    let dir = penalized_direction(bundle, nu)?;
    let next = stepped(policy, &dir, lr_theta)?;
    let nu_next = nu
        .iter()
        .zip(bundle.j_c.iter().zip(d))
        .map(|(n, (j, d))| (n + lr_nu * (j - d)).max(0.0))
        .collect();
    Ok((next, nu_next))
}

/// Multipliers `nu = [kp e + ki sum(e) + kd de]_+` from `state`, applied as
/// penalty weights in a plain gradient step.
pub fn pid_lagrangian_step(
    policy: &Policy,
    bundle: &GradientBundle,
    state: &mut MarginState,
    gains: &PidGains,
    lr_theta: f64,
    d: &[f64],
) -> Result<Policy> {
    if d.len() != state.len() || bundle.j_c.len() != d.len() {
        return Err(FoamError::DimensionMismatch {
            expected: state.len(),
            actual: d.len(),
            context: "pid-lagrangian constraint count",
        });
    }
    let e: Vec<f64> = bundle.j_c.iter().zip(d).map(|(j, d)| j - d).collect();
    state.update(&e, gains);
    let dir = penalized_direction(bundle, &state.xi)?;
    stepped(policy, &dir, lr_theta)
}

/// Plain gradient step penalizing tightened exceedances,
/// `g - c sum_i (J_i - d_i + xi_i)_+ b_i`.
pub fn penalized_step(
    policy: &Policy,
    bundle: &GradientBundle,
    d: &[f64],
    xi: &[f64],
    penalty: f64,
    lr_theta: f64,
) -> Result<Policy> {
    let w: Vec<f64> = bundle
        .j_c
        .iter()
        .zip(d.iter().zip(xi))
        .map(|(j, (d, x))| penalty * (j - d + x).max(0.0))
        .collect();
    let dir = penalized_direction(bundle, &w)?;
    stepped(policy, &dir, lr_theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{RestingOrder, Side, Telemetry};
    use crate::estimator::Fisher;
    use crate::outer_loop::CusumConfig;
    use crate::policy::PolicyArch;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(cps: &[(Side, usize, f64, u32)]) -> BookState {
        BookState {
            bid_prices: vec![0.0; 3],
            ask_prices: vec![0.0; 3],
            bid_volumes: vec![0.0; 3],
            ask_volumes: vec![0.0; 3],
            flow_imbalance: 0.0,
            telemetry: Telemetry::new(4),
            mid_bps: 0.0,
            tick_bps: 1.0,
            counterparties: cps
                .iter()
                .map(|&(side, level, volume, arrival_rank)| RestingOrder {
                    side,
                    level,
                    volume,
                    arrival_rank,
                })
                .collect(),
            background_bid: vec![0.0; 3],
            background_ask: vec![0.0; 3],
        }
    }

    fn buy() -> IncomingOrder {
        IncomingOrder {
            side: Side::Buy,
            size: 10.0,
            group: 0,
            arrival_time: 0,
            latency_rank: 0,
            inter_arrival: 1.0,
        }
    }

    #[test]
    fn fifo_examples() {
        let s = state(&[(Side::Sell, 0, 5.0, 1), (Side::Buy, 0, 5.0, 0)]);
        assert_eq!(fifo_allocate(&s, &buy()), vec![1.0, 0.0]);
        let s = state(&[
            (Side::Sell, 0, 5.0, 7),
            (Side::Sell, 0, 5.0, 3),
            (Side::Sell, 1, 5.0, 0),
        ]);
        assert_eq!(fifo_allocate(&s, &buy()), vec![0.0, 1.0, 0.0]);
        let s = state(&[(Side::Buy, 0, 5.0, 1), (Side::Buy, 0, 5.0, 2)]);
        assert_eq!(fifo_allocate(&s, &buy()), vec![0.5, 0.5]);
    }

    #[test]
    fn pro_rata_examples() {
        let s = state(&[(Side::Sell, 0, 100.0, 1), (Side::Sell, 0, 300.0, 2)]);
        assert_eq!(pro_rata_allocate(&s, &buy()), vec![0.25, 0.75]);
        let s = state(&[(Side::Sell, 0, 4.0, 1), (Side::Sell, 0, 4.0, 2)]);
        assert_eq!(pro_rata_allocate(&s, &buy()), vec![0.5, 0.5]);
        let s = state(&[(Side::Sell, 0, 0.0, 1), (Side::Sell, 0, 4.0, 2)]);
        assert_eq!(pro_rata_allocate(&s, &buy()), vec![0.0, 1.0]);
    }

    #[test]
    fn size_time_blends() {
        let s = state(&[(Side::Sell, 0, 100.0, 1), (Side::Sell, 0, 300.0, 2)]);
        assert_eq!(size_time_allocate(&s, &buy()), vec![0.625, 0.375]);
    }

    proptest! {
        #[test]
        fn rules_return_simplex_points(
            cps in prop::collection::vec((any::<bool>(), 0usize..3, 0.0f64..50.0, 0u32..10), 1..12)
        ) {
            let cps: Vec<_> = cps
                .into_iter()
                .map(|(b, l, v, r)| (if b { Side::Buy } else { Side::Sell }, l, v, r))
                .collect();
            let s = state(&cps);
            for kind in [RuleKind::Fifo, RuleKind::ProRata, RuleKind::SizeTime] {
                let a = rule_allocate(kind, &s, &buy());
                prop_assert!(crate::env::check_simplex(&a).is_ok());
            }
        }
    }

    fn bundle(n: usize, j_c: Vec<f64>) -> GradientBundle {
        let m = j_c.len();
        GradientBundle {
            g: DVector::from_element(n, 1.0),
            g_se: DVector::zeros(n),
            b: DMatrix::from_element(m, n, 0.5),
            j_r: 0.0,
            j_c,
            fisher: Fisher::identity(n),
        }
    }

    fn tiny_policy() -> Policy {
        let arch = PolicyArch {
            input: 2,
            hidden: vec![],
            output: 2,
            lipschitz: 100.0,
        };
        Policy::new(&arch, &mut ChaCha8Rng::seed_from_u64(0))
    }

    #[test]
    fn lagrangian_pure_ascent_without_multipliers() {
        let p = tiny_policy();
        let n = p.num_params();
        let (q, nu) = lagrangian_step(&p, &bundle(n, vec![0.1]), &[0.0], 0.1, 1.0, &[0.2]).unwrap();
        assert_eq!(nu, vec![0.0]);
        assert!(((q.flat() - p.flat()) - DVector::from_element(n, 0.1)).amax() < 1e-12);
    }

    #[test]
    fn lagrangian_multiplier_grows_linearly_under_violation() {
        let p = tiny_policy();
        let n = p.num_params();
        let b = bundle(n, vec![0.3]);
        let mut nu = vec![0.0];
        for k in 1..=5 {
            nu = lagrangian_step(&p, &b, &nu, 0.0, 0.5, &[0.2]).unwrap().1;
            assert!((nu[0] - 0.05 * k as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn pid_lagrangian_proportional_reduction() {
        let p = tiny_policy();
        let n = p.num_params();
        let mut st = MarginState::new(1, CusumConfig::default());
        let gains = PidGains {
            kp: 2.0,
            ki: 0.0,
            kd: 0.0,
        };
        let q = pid_lagrangian_step(&p, &bundle(n, vec![0.3]), &mut st, &gains, 1.0, &[0.2]).unwrap();
        assert!((st.xi[0] - 0.2).abs() < 1e-12);
        // g - 0.2 * 0.5 = 0.9 per coordinate.
        assert!(((q.flat() - p.flat()) - DVector::from_element(n, 0.9)).amax() < 1e-12);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in VariantName::ALL {
            assert_eq!(v.as_str().parse::<VariantName>().unwrap(), v);
        }
        assert!(matches!(
            "foam_no_kl".parse::<VariantName>(),
            Err(FoamError::UnknownVariant(_))
        ));
    }

    #[test]
    fn variant_transforms() {
        let base = ExperimentConfig::desk();
        let p = make_variant(&base, VariantName::FoamPOnly);
        assert_eq!((p.gains.ki, p.gains.kd), (0.0, 0.0));
        assert_eq!(p.gains.kp, base.gains.kp);
        assert!(same_trainer(
            &make_variant(&base, VariantName::VanillaCpo),
            &make_variant(&base, VariantName::FoamNoPid)
        ));
        assert!(!same_trainer(
            &make_variant(&base, VariantName::Foam),
            &make_variant(&base, VariantName::FoamNoPid)
        ));
        assert!(!make_variant(&base, VariantName::FoamNoSpecnorm).flags.spectral);
        assert!(!make_variant(&base, VariantName::FoamNoTr).flags.trust_region);
        assert!(!make_variant(&base, VariantName::FoamNoRecovery).flags.recovery);
        assert!(!make_variant(&base, VariantName::Unconstrained).flags.constrained);
    }
}
