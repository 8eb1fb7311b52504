//! Softmax MLP allocation policy with a Dirichlet exploration head and
//! per-layer spectral-norm caps.

use std::ops::Range;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{FoamError, Result};

const POLICY_MAGIC: &[u8; 8] = b"FOAMPOL1";

/// Network shape and Lipschitz budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyArch {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
    /// Global budget `L`; split uniformly across layers.
    pub lipschitz: f64,
}

impl PolicyArch {
    pub fn depth(&self) -> usize {
        self.hidden.len() + 1
    }

    /// `sigma_l = (L / sqrt(K))^(1/D)`.
    pub fn uniform_cap(&self) -> f64 {
        (self.lipschitz / (self.output as f64).sqrt()).powf(1.0 / self.depth() as f64)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub layers: Vec<Layer>,
    pub sigma_caps: Vec<f64>,
}

/// Output of the stochastic head.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledAction {
    pub action: Vec<f64>,
    /// Log of each action component; finite even when the component
    /// underflows to zero.
    pub log_action: Vec<f64>,
    pub log_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub params: PolicyParams,
    /// Persistent power-iteration vectors, one per layer.
    power_v: Vec<DVector<f64>>,
    pub n_power: usize,
}

struct ForwardCache {
    /// Inputs to each layer (post-activation of the previous one).
    inputs: Vec<DVector<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<DVector<f64>>,
    probs: DVector<f64>,
}

impl Policy {
    /// Gaussian fan-in initialization followed by a full projection. The
    /// output layer starts small so the initial allocation is near uniform.
    pub fn new<R: Rng + ?Sized>(arch: &PolicyArch, rng: &mut R) -> Self {
        let mut dims = vec![arch.input];
        dims.extend(&arch.hidden);
        dims.push(arch.output);
        let cap = arch.uniform_cap();
        let depth = dims.len() - 1;
        let mut layers = Vec::with_capacity(depth);
        for l in 0..depth {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let scale = if l + 1 == depth {
                0.01
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            let n = Normal::new(0.0, scale).expect("positive scale");
            let w = DMatrix::from_fn(fan_out, fan_in, |_, _| n.sample(rng));
            layers.push(Layer {
                w,
                b: DVector::zeros(fan_out),
            });
        }
        let params = PolicyParams {
            layers,
            sigma_caps: vec![cap; depth],
        };
        let mut p = Self::from_params(params, rng);
        p.certify();
        p
    }

    /// Wraps existing parameters, seeding fresh power vectors.
    pub fn from_params<R: Rng + ?Sized>(params: PolicyParams, rng: &mut R) -> Self {
        let power_v = params.layers.iter().map(|l| random_unit(l.w.ncols(), rng)).collect();
        Self {
            params,
            power_v,
            n_power: 3,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.params.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.params.layers.last().expect("at least one layer").w.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.params.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Flat-vector ranges owned by each layer (weights then bias).
    pub fn layer_ranges(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.params
            .layers
            .iter()
            .map(|l| {
                let n = l.w.len() + l.b.len();
                let r = start..start + n;
                start += n;
                r
            })
            .collect()
    }

    /// Parameters as one vector: per layer, `W` row-major then `b`.
    pub fn flat(&self) -> DVector<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.params.layers {
            for r in 0..l.w.nrows() {
                for c in 0..l.w.ncols() {
                    out.push(l.w[(r, c)]);
                }
            }
            out.extend(l.b.iter());
        }
        DVector::from_vec(out)
    }

    pub fn set_flat(&mut self, theta: &DVector<f64>) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(FoamError::DimensionMismatch {
                expected: self.num_params(),
                actual: theta.len(),
                context: "flat parameter vector",
            });
        }
        let mut i = 0;
        for l in &mut self.params.layers {
            for r in 0..l.w.nrows() {
                for c in 0..l.w.ncols() {
                    l.w[(r, c)] = theta[i];
                    i += 1;
                }
            }
            for b in l.b.iter_mut() {
                *b = theta[i];
                i += 1;
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(FoamError::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.len(),
                context: "state features vs first layer",
            });
        }
        Ok(())
    }

    fn run(&self, x: &[f64]) -> ForwardCache {
        let depth = self.params.layers.len();
        let mut inputs = Vec::with_capacity(depth);
        let mut pre = Vec::with_capacity(depth);
        let mut h = DVector::from_column_slice(x);
        for (l, layer) in self.params.layers.iter().enumerate() {
            let z = &layer.w * &h + &layer.b;
            inputs.push(h);
            h = if l + 1 < depth {
                z.map(|v| v.max(0.0))
            } else {
                z.clone()
            };
            pre.push(z);
        }
        let probs = softmax(&h);
        ForwardCache { inputs, pre, probs }
    }

    /// Deterministic allocation `softmax(f(x))`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.run(x).probs.as_slice().to_vec())
    }

    pub fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.run(x).pre.last().expect("layer").as_slice().to_vec())
    }

    /// Draws `a ~ Dir(K pi(x) / temperature)`.
    pub fn sample_action<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R, temperature: f64) -> Result<SampledAction> {
        check_temperature(temperature)?;
        let mean = self.forward(x)?;
        let alpha = concentration(&mean, temperature);
        let log_x: Vec<f64> = alpha.iter().map(|a| log_gamma_sample(*a, rng)).collect();
        let lse = log_sum_exp(&log_x);
        let log_action: Vec<f64> = log_x.iter().map(|v| v - lse).collect();
        let action = log_action.iter().map(|v| v.exp()).collect();
        let log_prob = dirichlet_log_density(&alpha, &log_action);
        Ok(SampledAction {
            action,
            log_action,
            log_prob,
        })
    }

    pub fn log_prob(&self, x: &[f64], log_action: &[f64], temperature: f64) -> Result<f64> {
        check_temperature(temperature)?;
        let mean = self.forward(x)?;
        self.check_action(log_action)?;
        Ok(dirichlet_log_density(&concentration(&mean, temperature), log_action))
    }

    fn check_action(&self, log_action: &[f64]) -> Result<()> {
        if log_action.len() != self.output_dim() {
            return Err(FoamError::DimensionMismatch {
                expected: self.output_dim(),
                actual: log_action.len(),
                context: "action length vs policy output",
            });
        }
        Ok(())
    }

    /// Score `d log p(a | x) / d theta` in flat-parameter order.
    pub fn score(&self, x: &[f64], log_action: &[f64], temperature: f64) -> Result<DVector<f64>> {
        check_temperature(temperature)?;
        self.check_input(x)?;
        self.check_action(log_action)?;
        let cache = self.run(x);
        let k = self.output_dim() as f64;
        let c = k / temperature;
        // d log p / d pi_j = c (log a_j - psi(alpha_j)); the log Gamma of the
        // total concentration is constant in pi.
        let g_pi: Vec<f64> = cache
            .probs
            .iter()
            .zip(log_action)
            .map(|(p, la)| c * (la - digamma(floor_alpha(c * p))))
            .collect();
        Ok(self.backprop_probs(&cache, &g_pi))
    }

    /// Gradient of `sum_j v_j pi_j(x)` with respect to the parameters.
    pub fn vjp_probs(&self, x: &[f64], v: &[f64]) -> Result<DVector<f64>> {
        self.check_input(x)?;
        let cache = self.run(x);
        Ok(self.backprop_probs(&cache, v))
    }

    fn backprop_probs(&self, cache: &ForwardCache, g_pi: &[f64]) -> DVector<f64> {
        let p = &cache.probs;
        let dot: f64 = p.iter().zip(g_pi).map(|(a, b)| a * b).sum();
        let mut delta = DVector::from_iterator(p.len(), p.iter().zip(g_pi).map(|(pi, gi)| pi * (gi - dot)));
        let depth = self.params.layers.len();
        let ranges = self.layer_ranges();
        let mut grad = DVector::zeros(self.num_params());
        for l in (0..depth).rev() {
            let layer = &self.params.layers[l];
            let input = &cache.inputs[l];
            let r = &ranges[l];
            let (rows, cols) = layer.w.shape();
            for i in 0..rows {
                for j in 0..cols {
                    grad[r.start + i * cols + j] = delta[i] * input[j];
                }
            }
            for i in 0..rows {
                grad[r.start + rows * cols + i] = delta[i];
            }
            if l > 0 {
                let back = layer.w.transpose() * &delta;
                let prev_pre = &cache.pre[l - 1];
                delta = DVector::from_iterator(
                    back.len(),
                    back.iter()
                        .zip(prev_pre.iter())
                        .map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }),
                );
            }
        }
        grad
    }

    /// Closed-form `KL(Dir(self) || Dir(other))` at state `x`.
    pub fn kl(&self, other: &Policy, x: &[f64], temperature: f64) -> Result<f64> {
        let a = concentration(&self.forward(x)?, temperature);
        let b = concentration(&other.forward(x)?, temperature);
        Ok(dirichlet_kl(&a, &b))
    }

    /// Rescales each `W_l` by `max(1, |W_l|_2 / sigma_l)` using warm-started
    /// power iteration. At least `n_power` iterations run; more run while the
    /// estimate is still moving.
    pub fn spectral_project(&mut self) {
        self.project_with(self.n_power, 1e-10, 2000);
    }

    /// Long power-iteration pass followed by projection.
    pub fn certify(&mut self) {
        self.project_with(50, 1e-12, 5000);
    }

    fn project_with(&mut self, min_iter: usize, rel_tol: f64, max_iter: usize) {
        for l in 0..self.params.layers.len() {
            let cap = self.params.sigma_caps[l];
            let (s, v) = power_norm(&self.params.layers[l].w, &self.power_v[l], min_iter, rel_tol, max_iter);
            self.power_v[l] = v;
            if s > cap {
                self.params.layers[l].w *= cap / s;
            }
        }
    }

    /// Current warm-started estimate of each layer's spectral norm.
    pub fn spectral_norms(&self) -> Vec<f64> {
        self.params
            .layers
            .iter()
            .zip(&self.power_v)
            .map(|(l, v)| power_norm(&l.w, v, 50, 1e-12, 5000).0)
            .collect()
    }

    /// `sqrt(K) * prod(sigma_l)`.
    pub fn lipschitz_budget(&self) -> f64 {
        (self.output_dim() as f64).sqrt() * self.params.sigma_caps.iter().product::<f64>()
    }

    /// Flat binary form: magic, layer count, per-layer (rows, cols, cap),
    /// then per layer `W` row-major and `b`, all big-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(POLICY_MAGIC);
        out.extend_from_slice(&(self.params.layers.len() as u32).to_be_bytes());
        for (l, cap) in self.params.layers.iter().zip(&self.params.sigma_caps) {
            out.extend_from_slice(&(l.w.nrows() as u32).to_be_bytes());
            out.extend_from_slice(&(l.w.ncols() as u32).to_be_bytes());
            out.extend_from_slice(&cap.to_be_bytes());
        }
        for v in self.flat().iter() {
            out.extend_from_slice(&v.to_be_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = ByteReader { bytes, pos: 0 };
        if rd.take(8)? != POLICY_MAGIC {
            return Err(FoamError::Serialization("bad policy magic".into()));
        }
        let n = rd.u32()? as usize;
        if n == 0 || n > (bytes.len() - rd.pos) / 16 {
            return Err(FoamError::Serialization("bad policy layer count".into()));
        }
        let mut shapes = Vec::with_capacity(n);
        let mut caps = Vec::with_capacity(n);
        for _ in 0..n {
            shapes.push((rd.u32()? as usize, rd.u32()? as usize));
            caps.push(rd.f64()?);
        }
        for w in shapes.windows(2) {
            if w[1].1 != w[0].0 {
                return Err(FoamError::Serialization("layer shapes do not chain".into()));
            }
        }
        let body = shapes.iter().try_fold(0u64, |acc, &(r, c)| {
            (r as u64)
                .checked_mul(c as u64 + 1)
                .and_then(|x| x.checked_mul(8))
                .and_then(|x| acc.checked_add(x))
        });
        if body != Some((bytes.len() - rd.pos) as u64) {
            return Err(FoamError::Serialization(
                "policy body length does not match shapes".into(),
            ));
        }
        let mut layers = Vec::with_capacity(n);
        for &(rows, cols) in &shapes {
            let mut w = DMatrix::zeros(rows, cols);
            for r in 0..rows {
                for c in 0..cols {
                    w[(r, c)] = rd.f64()?;
                }
            }
            let mut b = DVector::zeros(rows);
            for i in 0..rows {
                b[i] = rd.f64()?;
            }
            layers.push(Layer { w, b });
        }
        if rd.pos != bytes.len() {
            return Err(FoamError::Serialization("trailing bytes after policy".into()));
        }
        let power_v = layers
            .iter()
            .map(|l| DVector::from_element(l.w.ncols(), 1.0 / (l.w.ncols() as f64).sqrt()))
            .collect();
        Ok(Self {
            params: PolicyParams {
                layers,
                sigma_caps: caps,
            },
            power_v,
            n_power: 3,
        })
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| FoamError::Serialization("truncated policy bytes".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_be_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn check_temperature(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(FoamError::InvalidConfig(format!("temperature {t} must be positive")))
    }
}

fn random_unit<R: Rng + ?Sized>(n: usize, rng: &mut R) -> DVector<f64> {
    let v: DVector<f64> = DVector::from_fn(n, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        z
    });
    let norm = v.norm();
    if norm > 0.0 {
        v / norm
    } else {
        DVector::from_element(n, 1.0 / (n as f64).sqrt())
    }
}

/// Power iteration on `W^T W` from `v0`; returns the norm estimate and the
/// final right vector.
pub fn power_norm(
    w: &DMatrix<f64>,
    v0: &DVector<f64>,
    min_iter: usize,
    rel_tol: f64,
    max_iter: usize,
) -> (f64, DVector<f64>) {
    let mut v = v0.clone();
    let mut est = 0.0;
    for it in 0..max_iter.max(1) {
        let u = w * &v;
        let un = u.norm();
        if un == 0.0 {
            return (0.0, v);
        }
        let wtu = w.transpose() * (u / un);
        let s = wtu.norm();
        if s == 0.0 {
            return (0.0, v);
        }
        v = wtu / s;
        let done = it + 1 >= min_iter && (s - est).abs() <= rel_tol * s;
        est = s;
        if done {
            break;
        }
    }
    (est, v)
}

pub fn softmax(z: &DVector<f64>) -> DVector<f64> {
    let m = z.max();
    let e = z.map(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn floor_alpha(a: f64) -> f64 {
    a.max(f64::MIN_POSITIVE)
}

/// `alpha_j = K pi_j / temperature`.
pub fn concentration(mean: &[f64], temperature: f64) -> Vec<f64> {
    let c = mean.len() as f64 / temperature;
    mean.iter().map(|p| floor_alpha(c * p)).collect()
}

/// Log of a `Gamma(alpha, 1)` draw, computed without underflow for small
/// shapes via `X = Y U^(1/alpha)`, `Y ~ Gamma(alpha + 1)`.
fn log_gamma_sample<R: Rng + ?Sized>(alpha: f64, rng: &mut R) -> f64 {
    if alpha >= 1.0 {
        let g = Gamma::new(alpha, 1.0).expect("valid shape");
        return g.sample(rng).max(f64::MIN_POSITIVE).ln();
    }
    let g = Gamma::new(alpha + 1.0, 1.0).expect("valid shape");
    let y: f64 = g.sample(rng);
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    y.max(f64::MIN_POSITIVE).ln() + u.ln() / alpha
}

pub fn dirichlet_log_density(alpha: &[f64], log_x: &[f64]) -> f64 {
    let total: f64 = alpha.iter().sum();
    let mut lp = ln_gamma(total);
    for (a, lx) in alpha.iter().zip(log_x) {
        lp += (a - 1.0) * lx - ln_gamma(*a);
    }
    lp
}

pub fn dirichlet_kl(a: &[f64], b: &[f64]) -> f64 {
    let sa: f64 = a.iter().sum();
    let sb: f64 = b.iter().sum();
    let psi_sa = digamma(sa);
    let mut kl = ln_gamma(sa) - ln_gamma(sb);
    for (ai, bi) in a.iter().zip(b) {
        kl += ln_gamma(*bi) - ln_gamma(*ai) + (ai - bi) * (digamma(*ai) - psi_sa);
    }
    kl.max(0.0)
}
