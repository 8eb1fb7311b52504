//! Rollouts, return and gradient estimation, Fisher information and
//! disturbance diagnostics.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Env, IncomingOrder};
use crate::error::{FoamError, Result};
use crate::linalg::{conjugate_gradient, CgConfig};
use crate::policy::Policy;

const BATCH_MAGIC: &[u8; 8] = b"FOAMTB1\0";

/// Environment surface needed by the estimator.
pub trait Cmdp {
    fn num_constraints(&self) -> usize;
    /// Features of the current decision point.
    fn observe(&mut self) -> Vec<f64>;
    /// Applies an action at the current decision point.
    fn act(&mut self, action: &[f64]) -> Result<Transition>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub reward: f64,
    pub costs: Vec<f64>,
    pub fill_mass: f64,
    pub group: u8,
}

/// The order book as a [`Cmdp`]: `observe` draws the next arrival.
#[derive(Debug, Clone)]
pub struct BookCmdp {
    pub env: Env,
    pending: Option<IncomingOrder>,
}

impl BookCmdp {
    pub fn new(env: Env) -> Self {
        Self { env, pending: None }
    }

    pub fn pending(&self) -> Option<&IncomingOrder> {
        self.pending.as_ref()
    }
}

impl Cmdp for BookCmdp {
    fn num_constraints(&self) -> usize {
        self.env.num_constraints()
    }

    fn observe(&mut self) -> Vec<f64> {
        let order = self.env.sample_arrival();
        let f = self.env.features(&order);
        self.pending = Some(order);
        f
    }

    fn act(&mut self, action: &[f64]) -> Result<Transition> {
        let order = self.pending.take().ok_or(FoamError::Empty("pending order"))?;
        let out = self.env.step(&order, action)?;
        Ok(Transition {
            reward: out.reward,
            costs: out.costs,
            fill_mass: out.fill_mass,
            group: order.group,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryBatch {
    pub features: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    pub log_actions: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub costs: Vec<Vec<f64>>,
    pub fill_mass: Vec<f64>,
    pub groups: Vec<u8>,
    /// Index of the first transition of every episode, ascending, starting
    /// at 0.
    pub episode_starts: Vec<usize>,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub temperature: f64,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn num_constraints(&self) -> usize {
        self.costs.first().map_or(0, |c| c.len())
    }

    pub fn episodes(&self) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(self.episode_starts.len());
        for (i, &s) in self.episode_starts.iter().enumerate() {
            let e = self.episode_starts.get(i + 1).copied().unwrap_or(self.len());
            if e > s {
                out.push(s..e);
            }
        }
        out
    }

    /// Cost samples of constraint `i` in time order.
    pub fn cost_column(&self, i: usize) -> Vec<f64> {
        self.costs.iter().map(|c| c[i]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let lens = [
            self.features.len(),
            self.actions.len(),
            self.log_actions.len(),
            self.log_probs.len(),
            self.costs.len(),
            self.fill_mass.len(),
            self.groups.len(),
        ];
        if let Some(bad) = lens.iter().find(|l| **l != t) {
            return Err(FoamError::DimensionMismatch {
                expected: t,
                actual: *bad,
                context: "batch column length",
            });
        }
        let m = self.num_constraints();
        if self.costs.iter().any(|c| c.len() != m) {
            return Err(FoamError::InvalidConfig("cost vectors differ in length".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(FoamError::InvalidConfig("gamma must lie in (0, 1)".into()));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(FoamError::InvalidConfig("non-finite reward".into()));
        }
        if t > 0 && self.episode_starts.first() != Some(&0) {
            return Err(FoamError::InvalidConfig("first episode must start at 0".into()));
        }
        if self.episode_starts.windows(2).any(|w| w[1] <= w[0])
            || self.episode_starts.last().is_some_and(|s| *s >= t.max(1))
        {
            return Err(FoamError::InvalidConfig(
                "episode starts must increase within the batch".into(),
            ));
        }
        Ok(())
    }

    /// Columnar binary form: magic, then each column as a big-endian `u64`
    /// length followed by big-endian `f64` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let fd = self.features.first().map_or(0, |f| f.len());
        let k = self.actions.first().map_or(0, |a| a.len());
        let m = self.num_constraints();
        let meta = vec![
            self.gamma,
            self.gae_lambda,
            self.temperature,
            fd as f64,
            k as f64,
            m as f64,
        ];
        let flat = |rows: &Vec<Vec<f64>>| rows.iter().flatten().copied().collect::<Vec<f64>>();
        let cols: Vec<Vec<f64>> = vec![
            meta,
            flat(&self.features),
            flat(&self.actions),
            flat(&self.log_actions),
            self.log_probs.clone(),
            self.rewards.clone(),
            flat(&self.costs),
            self.fill_mass.clone(),
            self.groups.iter().map(|g| *g as f64).collect(),
            self.episode_starts.iter().map(|s| *s as f64).collect(),
        ];
        let mut out = Vec::new();
        out.extend_from_slice(BATCH_MAGIC);
        for c in cols {
            out.extend_from_slice(&(c.len() as u64).to_be_bytes());
            for v in c {
                out.extend_from_slice(&v.to_be_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| FoamError::Serialization(m.to_string());
        if bytes.len() < 8 || &bytes[..8] != BATCH_MAGIC {
            return Err(bad("bad batch magic"));
        }
        let mut pos = 8;
        let mut cols = Vec::with_capacity(10);
        for _ in 0..10 {
            let len_bytes = bytes.get(pos..pos + 8).ok_or_else(|| bad("truncated batch"))?;
            let n = u64::from_be_bytes(len_bytes.try_into().expect("8 bytes")) as usize;
            pos += 8;
            let need = n.checked_mul(8).ok_or_else(|| bad("column length overflow"))?;
            let body = bytes.get(pos..pos + need).ok_or_else(|| bad("truncated batch"))?;
            cols.push(
                body.chunks_exact(8)
                    .map(|c| f64::from_be_bytes(c.try_into().expect("8 bytes")))
                    .collect::<Vec<f64>>(),
            );
            pos += need;
        }
        if pos != bytes.len() {
            return Err(bad("trailing bytes after batch"));
        }
        let meta = &cols[0];
        if meta.len() != 6 {
            return Err(bad("batch meta column must hold 6 values"));
        }
        let as_count = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && v < 1e12 {
                Ok(v as usize)
            } else {
                Err(bad("invalid count in batch"))
            }
        };
        let (fd, k, m) = (as_count(meta[3])?, as_count(meta[4])?, as_count(meta[5])?);
        let t = cols[5].len();
        let split = |v: &Vec<f64>, w: usize| -> Result<Vec<Vec<f64>>> {
            if v.len() != t * w {
                return Err(bad("column size does not match batch length"));
            }
            if w == 0 {
                return Ok(vec![Vec::new(); t]);
            }
            Ok(v.chunks_exact(w).map(|c| c.to_vec()).collect())
        };
        let groups = cols[8]
            .iter()
            .map(|g| match *g {
                0.0 => Ok(0u8),
                1.0 => Ok(1u8),
                _ => Err(bad("group must be 0 or 1")),
            })
            .collect::<Result<Vec<u8>>>()?;
        let batch = Self {
            features: split(&cols[1], fd)?,
            actions: split(&cols[2], k)?,
            log_actions: split(&cols[3], k)?,
            log_probs: cols[4].clone(),
            rewards: cols[5].clone(),
            costs: split(&cols[6], m)?,
            fill_mass: cols[7].clone(),
            groups,
            episode_starts: cols[9].iter().map(|s| as_count(*s)).collect::<Result<Vec<usize>>>()?,
            gamma: meta[0],
            gae_lambda: meta[1],
            temperature: meta[2],
        };
        batch.validate().map_err(|e| bad(&e.to_string()))?;
        Ok(batch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RolloutConfig {
    pub horizon: usize,
    pub episode_len: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub temperature: f64,
}

/// Collects `horizon` transitions with sampled actions.
pub fn rollout<C: Cmdp, R: Rng + ?Sized>(
    policy: &Policy,
    cmdp: &mut C,
    cfg: &RolloutConfig,
    rng: &mut R,
) -> Result<TrajectoryBatch> {
    if cfg.horizon == 0 || cfg.episode_len == 0 {
        return Err(FoamError::InvalidConfig("horizon and episode_len must be >= 1".into()));
    }
    let mut b = TrajectoryBatch {
        gamma: cfg.gamma,
        gae_lambda: cfg.gae_lambda,
        temperature: cfg.temperature,
        ..Default::default()
    };
    for t in 0..cfg.horizon {
        if t % cfg.episode_len == 0 {
            b.episode_starts.push(t);
        }
        let x = cmdp.observe();
        let s = policy.sample_action(&x, rng, cfg.temperature)?;
        let tr = cmdp.act(&s.action)?;
        b.features.push(x);
        b.actions.push(s.action);
        b.log_actions.push(s.log_action);
        b.log_probs.push(s.log_prob);
        b.rewards.push(tr.reward);
        b.costs.push(tr.costs);
        b.fill_mass.push(tr.fill_mass);
        b.groups.push(tr.group);
    }
    b.validate()?;
    Ok(b)
}

fn discounted_sum(xs: &[f64], gamma: f64) -> f64 {
    xs.iter().rev().fold(0.0, |acc, x| x + gamma * acc)
}

/// Discounted episode sums averaged over episodes.
pub fn estimate_returns(batch: &TrajectoryBatch) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(FoamError::Empty("trajectory batch"));
    }
    let eps = batch.episodes();
    let e = eps.len() as f64;
    let m = batch.num_constraints();
    let mut jr = 0.0;
    let mut jc = vec![0.0; m];
    for ep in &eps {
        jr += discounted_sum(&batch.rewards[ep.clone()], batch.gamma);
        for (i, acc) in jc.iter_mut().enumerate() {
            let col: Vec<f64> = batch.costs[ep.clone()].iter().map(|c| c[i]).collect();
            *acc += discounted_sum(&col, batch.gamma);
        }
    }
    Ok((jr / e, jc.into_iter().map(|v| v / e).collect()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FisherMode {
    Diagonal,
    /// Mean outer product of scores, applied implicitly through the score
    /// matrix.
    Exact,
    /// Same matrix as `Exact`, materialized.
    Dense,
    /// Per-layer dense blocks.
    Block,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostBaseline {
    None,
    /// Mean cost-to-go at the same in-episode time index.
    TimeMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    pub fisher_mode: FisherMode,
    pub damping: f64,
    pub cost_baseline: CostBaseline,
    /// Use a ridge-regressed linear critic for reward GAE; otherwise the
    /// critic is zero and GAE reduces to discounted reward-to-go.
    pub linear_critic: bool,
    pub cg: CgConfigSerde,
}

/// Serializable mirror of [`CgConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CgConfigSerde {
    pub max_iter: usize,
    pub tol: f64,
}

impl From<CgConfigSerde> for CgConfig {
    fn from(c: CgConfigSerde) -> Self {
        CgConfig {
            max_iter: c.max_iter,
            tol: c.tol,
        }
    }
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            fisher_mode: FisherMode::Exact,
            damping: 1e-3,
            cost_baseline: CostBaseline::TimeMean,
            linear_critic: true,
            cg: CgConfigSerde {
                max_iter: 200,
                tol: 1e-10,
            },
        }
    }
}

/// Lower Cholesky factor of the smaller of the two Gram forms of an
/// implicit Fisher.
#[derive(Debug, Clone, PartialEq)]
pub enum ImplicitFactor {
    /// `damping I + S S' / T`, for `T <= N`.
    Gram(DMatrix<f64>),
    /// `S'S / T + damping I`, for `T > N`.
    Normal(DMatrix<f64>),
}

/// Fisher information after damping.
#[derive(Debug, Clone, PartialEq)]
pub enum Fisher {
    Diagonal(DVector<f64>),
    Implicit {
        /// One score per row.
        scores: DMatrix<f64>,
        damping: f64,
        cg: CgConfig,
        /// Cached factorization; conjugate gradients run without one.
        factor: Option<ImplicitFactor>,
    },
    Dense(DMatrix<f64>),
    Block(Vec<(Range<usize>, DMatrix<f64>)>),
}

impl Fisher {
    pub fn dim(&self) -> usize {
        match self {
            Fisher::Diagonal(d) => d.len(),
            Fisher::Implicit { scores, .. } => scores.ncols(),
            Fisher::Dense(m) => m.nrows(),
            Fisher::Block(bs) => bs.last().map_or(0, |(r, _)| r.end),
        }
    }

    /// `S'S / T + damping I`. Solves go through the Woodbury identity when
    /// `T <= N` and a direct factorization otherwise; conjugate gradients
    /// are the fallback when factorization fails.
    pub fn implicit(scores: DMatrix<f64>, damping: f64, cg: CgConfig) -> Self {
        let (t, n) = scores.shape();
        let shifted = |mut g: DMatrix<f64>| {
            for i in 0..g.nrows() {
                g[(i, i)] += damping;
            }
            g.cholesky().map(|c| c.l())
        };
        let factor = if t == 0 || damping <= 0.0 {
            None
        } else if t <= n {
            shifted(&scores * scores.transpose() / t as f64).map(ImplicitFactor::Gram)
        } else {
            shifted(scores.tr_mul(&scores) / t as f64).map(ImplicitFactor::Normal)
        };
        Fisher::Implicit {
            scores,
            damping,
            cg,
            factor,
        }
    }

    pub fn identity(n: usize) -> Self {
        Fisher::Dense(DMatrix::identity(n, n))
    }

    pub fn matvec(&self, v: &DVector<f64>) -> DVector<f64> {
        match self {
            Fisher::Diagonal(d) => d.component_mul(v),
            Fisher::Implicit { scores, damping, .. } => {
                let t = scores.nrows().max(1) as f64;
                let sv = scores * v;
                scores.tr_mul(&sv) / t + v * *damping
            }
            Fisher::Dense(m) => m * v,
            Fisher::Block(bs) => {
                let mut out = DVector::zeros(v.len());
                for (r, m) in bs {
                    let seg = m * v.rows(r.start, r.len());
                    out.rows_mut(r.start, r.len()).copy_from(&seg);
                }
                out
            }
        }
    }

    /// `H^{-1} b`.
    pub fn solve(&self, b: &DVector<f64>) -> Result<DVector<f64>> {
        match self {
            Fisher::Diagonal(d) => Ok(b.component_div(d)),
            Fisher::Implicit {
                scores,
                damping,
                factor: Some(f),
                ..
            } => match f {
                // H^-1 b = (b - U' (damping I + U U')^-1 U b) / damping, U = S / sqrt(T).
                ImplicitFactor::Gram(l) => {
                    let z = chol_factor_solve(l, &(scores * b / scores.nrows() as f64))?;
                    Ok((b - scores.tr_mul(&z)) / *damping)
                }
                ImplicitFactor::Normal(l) => chol_factor_solve(l, b),
            },
            Fisher::Implicit { cg, .. } => conjugate_gradient(|v| self.matvec(v), b, *cg),
            Fisher::Dense(m) => chol_solve(m, b),
            Fisher::Block(bs) => {
                let mut out = DVector::zeros(b.len());
                for (r, m) in bs {
                    let seg = chol_solve(m, &b.rows(r.start, r.len()).into_owned())?;
                    out.rows_mut(r.start, r.len()).copy_from(&seg);
                }
                Ok(out)
            }
        }
    }

    pub fn quad(&self, v: &DVector<f64>) -> f64 {
        v.dot(&self.matvec(v))
    }

    /// Smallest diagonal entry.
    pub fn min_diagonal(&self) -> f64 {
        match self {
            Fisher::Diagonal(d) => d.min(),
            Fisher::Implicit { scores, damping, .. } => {
                let t = scores.nrows().max(1) as f64;
                (0..scores.ncols())
                    .map(|j| scores.column(j).norm_squared() / t + damping)
                    .fold(f64::INFINITY, f64::min)
            }
            Fisher::Dense(m) => m.diagonal().min(),
            Fisher::Block(bs) => bs.iter().map(|(_, m)| m.diagonal().min()).fold(f64::INFINITY, f64::min),
        }
    }

    /// Dense form; intended for small problems and tests.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.dim();
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            m.set_column(j, &self.matvec(&e));
        }
        m
    }
}

/// `(L L')^-1 b` for a lower-triangular `L`.
fn chol_factor_solve(l: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    l.solve_lower_triangular(b)
        .and_then(|w| l.tr_solve_lower_triangular(&w))
        .ok_or(FoamError::CgNonConvergence {
            iterations: 0,
            residual: f64::NAN,
        })
}

fn chol_solve(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let chol = m.clone().cholesky().ok_or(FoamError::CgNonConvergence {
        iterations: 0,
        residual: f64::NAN,
    })?;
    Ok(chol.solve(b))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub g: DVector<f64>,
    /// Per-component standard error of `g` across episodes.
    pub g_se: DVector<f64>,
    /// Cost Jacobian, one row per constraint.
    pub b: DMatrix<f64>,
    pub j_r: f64,
    pub j_c: Vec<f64>,
    pub fisher: Fisher,
}

/// Per-transition weights `gamma^t / E` and advantages.
struct Advantages {
    weight: Vec<f64>,
    reward: Vec<f64>,
    costs: Vec<Vec<f64>>,
}

fn reward_to_go(xs: &[f64], gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; xs.len()];
    let mut acc = 0.0;
    for t in (0..xs.len()).rev() {
        acc = xs[t] + gamma * acc;
        out[t] = acc;
    }
    out
}

fn fit_linear_critic(batch: &TrajectoryBatch, targets: &[f64]) -> Vec<f64> {
    let t = batch.len();
    let fd = batch.features.first().map_or(0, |f| f.len());
    let x = DMatrix::from_fn(t, fd + 1, |r, c| if c < fd { batch.features[r][c] } else { 1.0 });
    let y = DVector::from_column_slice(targets);
    let mut xtx = x.tr_mul(&x);
    let ridge = 1e-3 * (xtx.trace() / (fd + 1) as f64).max(1e-8);
    for i in 0..=fd {
        xtx[(i, i)] += ridge;
    }
    match xtx.cholesky() {
        Some(ch) => {
            let beta = ch.solve(&x.tr_mul(&y));
            (&x * beta).as_slice().to_vec()
        }
        None => vec![0.0; t],
    }
}

fn advantages(batch: &TrajectoryBatch, cfg: &EstimatorConfig) -> Advantages {
    let t_len = batch.len();
    let eps = batch.episodes();
    let e = eps.len() as f64;
    let gamma = batch.gamma;
    let mut weight = vec![0.0; t_len];
    let mut rtg = vec![0.0; t_len];
    for ep in &eps {
        let r = reward_to_go(&batch.rewards[ep.clone()], gamma);
        for (k, t) in ep.clone().enumerate() {
            weight[t] = gamma.powi(k as i32) / e;
            rtg[t] = r[k];
        }
    }
    let values = if cfg.linear_critic {
        fit_linear_critic(batch, &rtg)
    } else {
        vec![0.0; t_len]
    };
    let mut reward = vec![0.0; t_len];
    for ep in &eps {
        let mut acc = 0.0;
        for t in ep.clone().rev() {
            let next_v = if t + 1 < ep.end { values[t + 1] } else { 0.0 };
            let delta = batch.rewards[t] + gamma * next_v - values[t];
            acc = delta + gamma * batch.gae_lambda * acc;
            reward[t] = acc;
        }
    }

    let m = batch.num_constraints();
    let max_len = eps.iter().map(|r| r.len()).max().unwrap_or(0);
    let mut costs = vec![vec![0.0; m]; t_len];
    for i in 0..m {
        let mut ctg = vec![0.0; t_len];
        let mut sum_by_k = vec![0.0; max_len];
        let mut n_by_k = vec![0usize; max_len];
        for ep in &eps {
            let col: Vec<f64> = batch.costs[ep.clone()].iter().map(|c| c[i]).collect();
            let c = reward_to_go(&col, gamma);
            for (k, t) in ep.clone().enumerate() {
                ctg[t] = c[k];
                sum_by_k[k] += c[k];
                n_by_k[k] += 1;
            }
        }
        for ep in &eps {
            for (k, t) in ep.clone().enumerate() {
                let base = match cfg.cost_baseline {
                    CostBaseline::None => 0.0,
                    CostBaseline::TimeMean if n_by_k[k] > 1 => sum_by_k[k] / n_by_k[k] as f64,
                    CostBaseline::TimeMean => 0.0,
                };
                costs[t][i] = ctg[t] - base;
            }
        }
    }
    Advantages { weight, reward, costs }
}

/// Score-function gradients of the reward and cost returns, plus the Fisher.
pub fn estimate_gradients(policy: &Policy, batch: &TrajectoryBatch, cfg: &EstimatorConfig) -> Result<GradientBundle> {
    if batch.is_empty() {
        return Err(FoamError::Empty("trajectory batch"));
    }
    batch.validate()?;
    if batch.features[0].len() != policy.input_dim() {
        return Err(FoamError::DimensionMismatch {
            expected: policy.input_dim(),
            actual: batch.features[0].len(),
            context: "batch features vs policy input",
        });
    }
    if batch.actions[0].len() != policy.output_dim() {
        return Err(FoamError::DimensionMismatch {
            expected: policy.output_dim(),
            actual: batch.actions[0].len(),
            context: "batch actions vs policy output",
        });
    }
    let n = policy.num_params();
    let t_len = batch.len();
    let m = batch.num_constraints();
    let adv = advantages(batch, cfg);
    let (j_r, j_c) = estimate_returns(batch)?;

    let mut scores = DMatrix::zeros(t_len, n);
    for t in 0..t_len {
        let s = policy.score(&batch.features[t], &batch.log_actions[t], batch.temperature)?;
        scores.set_row(t, &s.transpose());
    }

    let mut g = DVector::zeros(n);
    // Transposed Jacobian, one column per constraint.
    let mut bt = DMatrix::zeros(n, m);
    let eps = batch.episodes();
    let e = eps.len() as f64;
    let mut sum_sq = DVector::zeros(n);
    for ep in &eps {
        let mut g_ep = DVector::zeros(n);
        for t in ep.clone() {
            let row = scores.row(t).transpose();
            g_ep.axpy(adv.weight[t] * adv.reward[t], &row, 1.0);
            for i in 0..m {
                let w = adv.weight[t] * adv.costs[t][i];
                bt.column_mut(i).axpy(w, &row, 1.0);
            }
        }
        g += &g_ep;
        // g_ep carries a 1/E factor; e * g_ep is this episode's estimate.
        sum_sq += (&g_ep * e).map(|v| v * v);
    }
    let mean = &g;
    let g_se = if e > 1.0 {
        DVector::from_iterator(
            n,
            sum_sq
                .iter()
                .zip(mean.iter())
                .map(|(s2, mu)| ((s2 / e - mu * mu).max(0.0) * e / (e - 1.0) / e).sqrt()),
        )
    } else {
        DVector::from_element(n, f64::INFINITY)
    };

    let mu = cfg.damping;
    let tf = t_len as f64;
    let fisher = match cfg.fisher_mode {
        FisherMode::Diagonal => Fisher::Diagonal(DVector::from_iterator(
            n,
            (0..n).map(|j| scores.column(j).norm_squared() / tf + mu),
        )),
        FisherMode::Exact => Fisher::implicit(scores, mu, cfg.cg.into()),
        FisherMode::Dense => {
            let mut f = scores.tr_mul(&scores) / tf;
            for i in 0..n {
                f[(i, i)] += mu;
            }
            Fisher::Dense(f)
        }
        FisherMode::Block => {
            let blocks = policy
                .layer_ranges()
                .into_iter()
                .map(|r| {
                    let s = scores.columns(r.start, r.len());
                    let mut f = s.tr_mul(&s) / tf;
                    for i in 0..r.len() {
                        f[(i, i)] += mu;
                    }
                    (r, f)
                })
                .collect();
            Fisher::Block(blocks)
        }
    };
    Ok(GradientBundle {
        g,
        g_se,
        b: bt.transpose(),
        j_r,
        j_c,
        fisher,
    })
}

/// First-order off-policy estimate of cost returns under `candidate` from a
/// batch collected by the behavior policy:
/// `J_C + (1/E) sum_t gamma^t (rho_t - 1) A_t`.
pub fn surrogate_costs(candidate: &Policy, batch: &TrajectoryBatch, cfg: &EstimatorConfig) -> Result<Vec<f64>> {
    let (_, j_c) = estimate_returns(batch)?;
    let adv = advantages(batch, cfg);
    let mut out = j_c;
    for t in 0..batch.len() {
        let lp = candidate.log_prob(&batch.features[t], &batch.log_actions[t], batch.temperature)?;
        let rho = (lp - batch.log_probs[t]).exp();
        if !rho.is_finite() {
            return Err(FoamError::EnergyEvaluation(format!(
                "importance ratio overflow at t={t}"
            )));
        }
        for (i, o) in out.iter_mut().enumerate() {
            *o += adv.weight[t] * (rho - 1.0) * adv.costs[t][i];
        }
    }
    Ok(out)
}

/// Mean closed-form KL between the two policies over the batch states.
pub fn mean_kl(old: &Policy, new: &Policy, batch: &TrajectoryBatch) -> Result<f64> {
    if batch.is_empty() {
        return Err(FoamError::Empty("trajectory batch"));
    }
    let mut acc = 0.0;
    for x in &batch.features {
        acc += old.kl(new, x, batch.temperature)?;
    }
    Ok(acc / batch.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceConfig {
    /// Hessian bound used by the model-error diagnostic.
    pub l_h: f64,
    pub damping: f64,
    pub eps_smooth: f64,
    /// Multiplier in the estimation-error term.
    pub est_constant: f64,
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        Self {
            l_h: 10.0,
            damping: 1e-3,
            eps_smooth: 0.0,
            est_constant: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceBound {
    pub eps_model: f64,
    pub eps_est: f64,
    pub eps_smooth: f64,
    pub w_max: f64,
    pub tau_mix: f64,
    pub sigma_hat: f64,
}

/// Integrated autocorrelation time by the initial positive sequence: pairs
/// `rho_{2m} + rho_{2m+1}` are summed while positive, and
/// `tau = -1 + 2 sum_m (rho_{2m} + rho_{2m+1})`.
pub fn integrated_autocorr(xs: &[f64]) -> Result<f64> {
    const MIN_LEN: usize = 4;
    if xs.len() < MIN_LEN {
        return Err(FoamError::BatchTooShort {
            len: xs.len(),
            needed: MIN_LEN,
        });
    }
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = xs.iter().map(|x| x - mean).collect();
    let c0 = c.iter().map(|v| v * v).sum::<f64>() / n as f64;
    if c0 == 0.0 {
        return Ok(1.0);
    }
    let rho = |k: usize| -> f64 { c[..n - k].iter().zip(&c[k..]).map(|(a, b)| a * b).sum::<f64>() / n as f64 / c0 };
    let mut tau = -1.0;
    let mut m = 0;
    while 2 * m + 1 < n / 2 {
        let pair = rho(2 * m) + rho(2 * m + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        m += 1;
    }
    Ok(tau.max(1.0 / n as f64))
}

/// `c * sigma * sqrt(tau ln(1/zeta) / T)`.
pub fn eps_est(sigma: f64, tau: f64, zeta: f64, t: usize, c: f64) -> f64 {
    c * sigma * (tau * (1.0 / zeta).ln() / t as f64).sqrt()
}

/// Disturbance diagnostic from a stream of cost samples.
pub fn disturbance_bound_from_samples(
    samples: &[f64],
    delta: f64,
    zeta: f64,
    cfg: &DisturbanceConfig,
) -> Result<DisturbanceBound> {
    let tau = integrated_autocorr(samples)?;
    let needed = (10.0 * tau).ceil() as usize;
    if samples.len() < needed {
        return Err(FoamError::BatchTooShort {
            len: samples.len(),
            needed,
        });
    }
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let sigma = (samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let eps_model = cfg.l_h / cfg.damping * delta;
    let est = eps_est(sigma, tau, zeta, samples.len(), cfg.est_constant);
    Ok(DisturbanceBound {
        eps_model,
        eps_est: est,
        eps_smooth: cfg.eps_smooth,
        w_max: eps_model + cfg.eps_smooth + est,
        tau_mix: tau,
        sigma_hat: sigma,
    })
}

/// Worst case over the batch's constraints.
pub fn disturbance_bound(
    batch: &TrajectoryBatch,
    delta: f64,
    zeta: f64,
    cfg: &DisturbanceConfig,
) -> Result<DisturbanceBound> {
    let m = batch.num_constraints();
    if m == 0 {
        return Err(FoamError::Empty("cost columns"));
    }
    let mut worst: Option<DisturbanceBound> = None;
    for i in 0..m {
        let d = disturbance_bound_from_samples(&batch.cost_column(i), delta, zeta, cfg)?;
        if worst.is_none_or(|w| d.w_max > w.w_max) {
            worst = Some(d);
        }
    }
    Ok(worst.expect("at least one constraint"))
}
