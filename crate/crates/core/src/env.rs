//! Synthetic limit-order-book CMDP.
//!
//! One incoming order per step. The policy spreads the order across `K`
//! resting counterparties; each counterparty fills at most its resting
//! volume and unmatched mass is forfeited.

use std::collections::VecDeque;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{FoamError, Result};
use crate::fairness::{dp_cost, eo_cost, is_qualified, masked_mass, ConstraintKind, GroupRateEMA};

/// Allowed deviation of an allocation from the simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Buy,
    Sell,
}

impl Side {
    pub fn sign(&self) -> f64 {
        match self {
            Side::Buy => 1.0,
            Side::Sell => -1.0,
        }
    }

    pub fn opposite(&self) -> Side {
        match self {
            Side::Buy => Side::Sell,
            Side::Sell => Side::Buy,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncomingOrder {
    pub side: Side,
    pub size: f64,
    pub group: u8,
    pub arrival_time: u64,
    pub latency_rank: u32,
    /// Continuous time since the previous arrival.
    pub inter_arrival: f64,
}

/// A counterparty's resting order. `side` is the side it rests on: `Buy`
/// rests on the bid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RestingOrder {
    pub side: Side,
    pub level: usize,
    pub volume: f64,
    pub arrival_rank: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryEntry {
    pub group: u8,
    pub fill_mass: f64,
    pub costs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Telemetry {
    pub window: usize,
    pub entries: VecDeque<TelemetryEntry>,
}

impl Telemetry {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            entries: VecDeque::with_capacity(window),
        }
    }

    pub fn push(&mut self, e: TelemetryEntry) {
        if self.window == 0 {
            return;
        }
        if self.entries.len() == self.window {
            self.entries.pop_front();
        }
        self.entries.push_back(e);
    }

    /// Mean fill mass per arrival for groups 0 and 1 over the window.
    pub fn group_fill_means(&self) -> [f64; 2] {
        let mut sum = [0.0; 2];
        let mut n = [0usize; 2];
        for e in &self.entries {
            sum[e.group as usize] += e.fill_mass;
            n[e.group as usize] += 1;
        }
        [0, 1].map(|g| if n[g] > 0 { sum[g] / n[g] as f64 } else { 0.0 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BookState {
    pub bid_prices: Vec<f64>,
    pub ask_prices: Vec<f64>,
    pub bid_volumes: Vec<f64>,
    pub ask_volumes: Vec<f64>,
    pub flow_imbalance: f64,
    pub telemetry: Telemetry,
    pub mid_bps: f64,
    pub tick_bps: f64,
    pub counterparties: Vec<RestingOrder>,
    pub background_bid: Vec<f64>,
    pub background_ask: Vec<f64>,
}

impl BookState {
    pub fn levels(&self) -> usize {
        self.bid_prices.len()
    }

    /// Rebuilds price ladders around `mid_bps` and level volumes from the
    /// background plus resting counterparty volume.
    pub fn refresh_levels(&mut self) {
        let l = self.levels();
        for i in 0..l {
            let off = (i as f64 + 0.5) * self.tick_bps;
            self.bid_prices[i] = self.mid_bps - off;
            self.ask_prices[i] = self.mid_bps + off;
        }
        self.bid_volumes.clone_from(&self.background_bid);
        self.ask_volumes.clone_from(&self.background_ask);
        for c in &self.counterparties {
            match c.side {
                Side::Buy => self.bid_volumes[c.level] += c.volume,
                Side::Sell => self.ask_volumes[c.level] += c.volume,
            }
        }
    }

    fn best(volumes: &[f64], prices: &[f64], fallback: f64) -> f64 {
        volumes
            .iter()
            .position(|v| *v > 0.0)
            .map(|i| prices[i])
            .unwrap_or(fallback)
    }

    /// Best non-empty ask minus best non-empty bid. An empty side is priced
    /// one tick beyond its last level.
    pub fn spread_bps(&self) -> f64 {
        let l = self.levels();
        let bid = Self::best(
            &self.bid_volumes,
            &self.bid_prices,
            self.bid_prices[l - 1] - self.tick_bps,
        );
        let ask = Self::best(
            &self.ask_volumes,
            &self.ask_prices,
            self.ask_prices[l - 1] + self.tick_bps,
        );
        ask - bid
    }

    /// Cumulative volume within the first five levels on both sides.
    pub fn depth5(&self) -> f64 {
        let n = self.levels().min(5);
        self.bid_volumes[..n].iter().sum::<f64>() + self.ask_volumes[..n].iter().sum::<f64>()
    }

    pub fn total_volume(&self) -> f64 {
        self.bid_volumes.iter().sum::<f64>() + self.ask_volumes.iter().sum::<f64>()
    }

    /// Feasible counterparties for an incoming order: resting on the
    /// opposite side with positive volume.
    pub fn mask(&self, side: Side) -> Vec<bool> {
        let rest = side.opposite();
        self.counterparties
            .iter()
            .map(|c| c.side == rest && c.volume > 0.0)
            .collect()
    }

    pub fn counterparty_volumes(&self) -> Vec<f64> {
        self.counterparties.iter().map(|c| c.volume).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeName {
    Calm,
    Volatile,
    Flash,
    Drought,
    Auction,
    NewsShock,
}

impl RegimeName {
    pub const ALL: [RegimeName; 6] = [
        RegimeName::Calm,
        RegimeName::Volatile,
        RegimeName::Flash,
        RegimeName::Drought,
        RegimeName::Auction,
        RegimeName::NewsShock,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeConfig {
    pub name: RegimeName,
    pub arrival_multiplier: f64,
    pub depth_multiplier: f64,
    /// Step at which the regime takes effect; calm conditions before it.
    pub shock_onset: Option<u64>,
    /// Additive change to `P(g = 1)` once active.
    #[serde(default)]
    pub group_rate_shift: f64,
    #[serde(default = "one")]
    pub volatility_multiplier: f64,
}

fn one() -> f64 {
    1.0
}

impl RegimeConfig {
    pub fn preset(name: RegimeName) -> Self {
        let (arrival, depth, vol) = match name {
            RegimeName::Calm => (1.0, 1.0, 1.0),
            RegimeName::Volatile => (1.5, 0.8, 3.0),
            RegimeName::Flash => (3.0, 0.3, 5.0),
            RegimeName::Drought => (0.5, 0.4, 1.0),
            RegimeName::Auction => (2.0, 1.5, 0.5),
            RegimeName::NewsShock => (5.0, 1.0, 2.0),
        };
        Self {
            name,
            arrival_multiplier: arrival,
            depth_multiplier: depth,
            shock_onset: None,
            group_rate_shift: 0.0,
            volatility_multiplier: vol,
        }
    }

    pub fn calm() -> Self {
        Self::preset(RegimeName::Calm)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.arrival_multiplier > 0.0 && self.depth_multiplier > 0.0 && self.volatility_multiplier > 0.0) {
            return Err(FoamError::InvalidConfig("regime multipliers must be positive".into()));
        }
        Ok(())
    }

    fn active(&self, step: u64) -> bool {
        self.shock_onset.is_none_or(|k| step >= k)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HawkesParams {
    pub mu: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for HawkesParams {
    fn default() -> Self {
        Self {
            mu: 1.0,
            alpha: 0.5,
            beta: 1.0,
        }
    }
}

impl HawkesParams {
    /// `mu / (1 - alpha / beta)`.
    pub fn stationary_rate(&self) -> f64 {
        self.mu / (1.0 - self.alpha / self.beta)
    }
}

/// Exponential-kernel Hawkes process sampled by Ogata thinning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hawkes {
    pub params: HawkesParams,
    /// Self-excitation `sum_j alpha exp(-beta (t - t_j))` at `clock`.
    pub excitation: f64,
    pub clock: f64,
}

impl Hawkes {
    pub fn new(params: HawkesParams) -> Self {
        Self {
            params,
            excitation: 0.0,
            clock: 0.0,
        }
    }

    /// Advances to the next event and returns the waiting time.
    pub fn next<R: Rng + ?Sized>(&mut self, multiplier: f64, rng: &mut R) -> f64 {
        let base = self.params.mu * multiplier;
        let start = self.clock;
        loop {
            let bound = base + self.excitation;
            let wait = Exp::new(bound).expect("positive intensity").sample(rng);
            let decay = (-self.params.beta * wait).exp();
            self.clock += wait;
            self.excitation *= decay;
            let accept = (base + self.excitation) / bound;
            if rng.random::<f64>() <= accept {
                self.excitation += self.params.alpha;
                return self.clock - start;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub spread: f64,
    pub fill: f64,
    pub depth: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            spread: 0.4,
            fill: 0.4,
            depth: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub levels: usize,
    pub counterparties: usize,
    pub tick_bps: f64,
    pub mid_bps: f64,
    pub background_depth: f64,
    pub counterparty_volume: f64,
    pub order_size: f64,
    pub group_rate: f64,
    pub reward_weights: RewardWeights,
    pub hawkes: HawkesParams,
    pub replenish_half_life: f64,
    pub mid_vol_bps: f64,
    pub telemetry_window: usize,
    pub ema_beta: f64,
    pub ema_warmup: usize,
    pub constraints: Vec<ConstraintKind>,
    /// Fraction of the best opposite level taken by a front-runner that sees
    /// each order one step early; `None` disables it.
    pub front_runner: Option<f64>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            levels: 10,
            counterparties: 50,
            tick_bps: 1.0,
            mid_bps: 10_000.0,
            background_depth: 10.0,
            counterparty_volume: 20.0,
            order_size: 30.0,
            group_rate: 0.3,
            reward_weights: RewardWeights::default(),
            hawkes: HawkesParams::default(),
            replenish_half_life: 20.0,
            mid_vol_bps: 0.5,
            telemetry_window: 256,
            ema_beta: 0.999,
            ema_warmup: 1000,
            constraints: vec![
                ConstraintKind::DemographicParity,
                ConstraintKind::EqualizedOdds,
                ConstraintKind::Volatility,
            ],
            front_runner: None,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(FoamError::InvalidConfig(m.to_string()));
        if self.levels == 0 || self.counterparties == 0 {
            return bad("levels and counterparties must be positive");
        }
        if !(self.tick_bps > 0.0 && self.background_depth > 0.0 && self.order_size > 0.0) {
            return bad("tick, background depth and order size must be positive");
        }
        if !(0.0..=1.0).contains(&self.group_rate) {
            return bad("group_rate must lie in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.ema_beta) {
            return bad("ema_beta must lie in [0, 1)");
        }
        let h = &self.hawkes;
        if !(h.mu > 0.0 && h.alpha >= 0.0 && h.beta > 0.0 && h.alpha < h.beta) {
            return bad("hawkes needs mu > 0, beta > 0 and 0 <= alpha < beta");
        }
        if self.replenish_half_life <= 0.0 {
            return bad("replenish_half_life must be positive");
        }
        if let Some(f) = self.front_runner {
            if !(0.0..=1.0).contains(&f) {
                return bad("front_runner fraction must lie in [0, 1]");
            }
        }
        Ok(())
    }

    /// Length of [`Env::features`].
    pub fn feature_dim(&self) -> usize {
        2 * self.levels + 6 + 2 * self.counterparties
    }
}

/// Outcome of matching one order against the book, before replenishment.
#[derive(Debug, Clone, PartialEq)]
pub struct Execution {
    pub state: BookState,
    pub fills: Vec<f64>,
    pub fill_mass: f64,
    pub mask: Vec<bool>,
}

pub fn check_simplex(allocation: &[f64]) -> Result<()> {
    let sum: f64 = allocation.iter().sum();
    let min = allocation.iter().copied().fold(f64::INFINITY, f64::min);
    if (sum - 1.0).abs() > SIMPLEX_TOL || min < -SIMPLEX_TOL || !sum.is_finite() {
        return Err(FoamError::OffSimplex { sum, min });
    }
    Ok(())
}

/// Pure matching step: counterparty `j` fills `min(a_j m_j size, v_j)`.
pub fn execute(state: &BookState, order: &IncomingOrder, allocation: &[f64]) -> Result<Execution> {
    if allocation.len() != state.counterparties.len() {
        return Err(FoamError::DimensionMismatch {
            expected: state.counterparties.len(),
            actual: allocation.len(),
            context: "allocation vs counterparties",
        });
    }
    check_simplex(allocation)?;
    let mask = state.mask(order.side);
    let mut next = state.clone();
    let mut fills = vec![0.0; allocation.len()];
    for (j, c) in next.counterparties.iter_mut().enumerate() {
        if !mask[j] {
            continue;
        }
        let want = allocation[j].max(0.0) * order.size;
        let f = want.min(c.volume);
        fills[j] = f;
        c.volume -= f;
        match c.side {
            Side::Buy => next.bid_volumes[c.level] -= f,
            Side::Sell => next.ask_volumes[c.level] -= f,
        }
    }
    let fill_mass = fills.iter().sum();
    Ok(Execution {
        state: next,
        fills,
        fill_mass,
        mask,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub costs: Vec<f64>,
    pub fill_mass: f64,
    pub fills: Vec<f64>,
    pub mask: Vec<bool>,
    pub qualified: bool,
    pub spread_bps: f64,
    pub depth5: f64,
}

/// One environment instance with its own generator.
#[derive(Debug, Clone)]
pub struct Env {
    pub cfg: EnvConfig,
    pub regime: RegimeConfig,
    state: BookState,
    initial: BookState,
    initial_depth5: f64,
    hawkes: Hawkes,
    pub ema: GroupRateEMA,
    pub ema_q: GroupRateEMA,
    step_idx: u64,
    rng: ChaCha8Rng,
}

impl Env {
    pub fn new(cfg: EnvConfig, seed: u64, regime: RegimeConfig) -> Result<Self> {
        cfg.validate()?;
        regime.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth_mult = if regime.active(0) { regime.depth_multiplier } else { 1.0 };
        let state = initial_book(&cfg, depth_mult, &mut rng);
        let mut ema = GroupRateEMA::new(cfg.ema_beta);
        let mut ema_q = GroupRateEMA::new(cfg.ema_beta);
        let p1 = group_rate(&cfg, &regime, 0);
        for _ in 0..cfg.ema_warmup {
            let g = rng.random_bool(p1) as u8;
            ema.update(g);
            ema_q.update(g);
        }
        let initial_depth5 = state.depth5();
        Ok(Self {
            hawkes: Hawkes::new(cfg.hawkes),
            cfg,
            regime,
            initial: state.clone(),
            state,
            initial_depth5,
            ema,
            ema_q,
            step_idx: 0,
            rng,
        })
    }

    pub fn state(&self) -> &BookState {
        &self.state
    }

    pub fn step_index(&self) -> u64 {
        self.step_idx
    }

    pub fn num_constraints(&self) -> usize {
        self.cfg.constraints.len()
    }

    fn arrival_multiplier(&self) -> f64 {
        if self.regime.active(self.step_idx) {
            self.regime.arrival_multiplier
        } else {
            1.0
        }
    }

    pub fn sample_arrival(&mut self) -> IncomingOrder {
        let mult = self.arrival_multiplier();
        let inter_arrival = self.hawkes.next(mult, &mut self.rng);
        let side = if self.rng.random_bool(0.5) {
            Side::Buy
        } else {
            Side::Sell
        };
        let size = self.cfg.order_size * self.rng.random_range(0.5..1.5);
        let group = self.rng.random_bool(group_rate(&self.cfg, &self.regime, self.step_idx)) as u8;
        let latency_rank = self.rng.random_range(0..self.cfg.counterparties as u32);
        IncomingOrder {
            side,
            size,
            group,
            arrival_time: self.step_idx,
            latency_rank,
            inter_arrival,
        }
    }

    /// Policy input for the current book and the pending order.
    pub fn features(&self, order: &IncomingOrder) -> Vec<f64> {
        let s = &self.state;
        let norm = (self.cfg.background_depth + self.cfg.counterparty_volume).max(1e-12);
        let mut f = Vec::with_capacity(self.cfg.feature_dim());
        f.extend(s.bid_volumes.iter().map(|v| v / norm));
        f.extend(s.ask_volumes.iter().map(|v| v / norm));
        f.push(s.flow_imbalance);
        f.push(order.side.sign());
        f.push(order.group as f64);
        f.push(order.size / self.cfg.order_size);
        let [g0, g1] = s.telemetry.group_fill_means();
        f.push(g0 / self.cfg.order_size);
        f.push(g1 / self.cfg.order_size);
        let mask = s.mask(order.side);
        f.extend(mask.iter().map(|m| if *m { 1.0 } else { 0.0 }));
        f.extend(
            s.counterparties
                .iter()
                .map(|c| c.volume / self.cfg.counterparty_volume.max(1e-12)),
        );
        f
    }

    pub fn step(&mut self, order: &IncomingOrder, allocation: &[f64]) -> Result<StepOutcome> {
        let spread_before = self.state.spread_bps();
        if let Some(frac) = self.cfg.front_runner {
            front_run(&mut self.state, order.side, frac);
        }
        let exec = execute(&self.state, order, allocation)?;
        let spread_after = exec.state.spread_bps();
        let depth_after = exec.state.depth5();
        let w = self.cfg.reward_weights;
        let reward = w.spread * (spread_before - spread_after)
            + w.fill * exec.fill_mass / order.size
            + w.depth * depth_after / self.initial_depth5;

        let qualified = is_qualified(&exec.mask, &self.state.counterparty_volumes(), order.size);
        let mut costs = Vec::with_capacity(self.cfg.constraints.len());
        for kind in &self.cfg.constraints {
            let c = match kind {
                ConstraintKind::DemographicParity => dp_cost(allocation, &exec.mask, order.group, &self.ema)?,
                ConstraintKind::EqualizedOdds => eo_cost(allocation, &exec.mask, order.group, qualified, &self.ema_q)?,
                ConstraintKind::Volatility => ((spread_after - spread_before) / spread_before).powi(2),
            };
            costs.push(c);
        }
        self.ema.update(order.group);
        if qualified {
            self.ema_q.update(order.group);
        }

        self.state = exec.state;
        self.state.flow_imbalance = 0.9 * self.state.flow_imbalance + 0.1 * order.side.sign();
        self.state.telemetry.push(TelemetryEntry {
            group: order.group,
            fill_mass: exec.fill_mass,
            costs: costs.clone(),
        });
        self.replenish_and_drift();
        self.step_idx += 1;
        debug_assert!(masked_mass(allocation, &exec.mask) <= 1.0 + SIMPLEX_TOL);
        Ok(StepOutcome {
            reward,
            costs,
            fill_mass: exec.fill_mass,
            fills: exec.fills,
            mask: exec.mask,
            qualified,
            spread_bps: spread_after,
            depth5: depth_after,
        })
    }

    fn replenish_and_drift(&mut self) {
        let r = 1.0 - 0.5f64.powf(1.0 / self.cfg.replenish_half_life);
        let s = &mut self.state;
        for (c, c0) in s.counterparties.iter_mut().zip(&self.initial.counterparties) {
            c.volume += r * (c0.volume - c.volume);
        }
        for (b, b0) in s.background_bid.iter_mut().zip(&self.initial.background_bid) {
            *b += r * (b0 - *b);
        }
        for (a, a0) in s.background_ask.iter_mut().zip(&self.initial.background_ask) {
            *a += r * (a0 - *a);
        }
        let vol = if self.regime.active(self.step_idx) {
            self.regime.volatility_multiplier
        } else {
            1.0
        };
        let sd = self.cfg.mid_vol_bps * vol;
        if sd > 0.0 {
            let n = Normal::new(0.0, sd).expect("positive sd");
            s.mid_bps += n.sample(&mut self.rng);
        }
        s.refresh_levels();
    }
}

fn group_rate(cfg: &EnvConfig, regime: &RegimeConfig, step: u64) -> f64 {
    let shift = if regime.active(step) {
        regime.group_rate_shift
    } else {
        0.0
    };
    (cfg.group_rate + shift).clamp(0.0, 1.0)
}

fn front_run(state: &mut BookState, incoming: Side, frac: f64) {
    let bg = match incoming {
        Side::Buy => &mut state.background_ask,
        Side::Sell => &mut state.background_bid,
    };
    if let Some(i) = bg.iter().position(|v| *v > 0.0) {
        bg[i] *= 1.0 - frac;
    }
    state.refresh_levels();
}

fn initial_book<R: Rng + ?Sized>(cfg: &EnvConfig, depth_mult: f64, rng: &mut R) -> BookState {
    let l = cfg.levels;
    let mut background_bid = Vec::with_capacity(l);
    let mut background_ask = Vec::with_capacity(l);
    for _ in 0..l {
        background_bid.push(cfg.background_depth * depth_mult * rng.random_range(0.5..1.5));
        background_ask.push(cfg.background_depth * depth_mult * rng.random_range(0.5..1.5));
    }
    let mut ranks: Vec<u32> = (0..cfg.counterparties as u32).collect();
    for i in (1..ranks.len()).rev() {
        let j = rng.random_range(0..=i);
        ranks.swap(i, j);
    }
    let level_dist = Exp::new(0.5).expect("positive rate");
    let counterparties = (0..cfg.counterparties)
        .map(|j| {
            let draw: f64 = level_dist.sample(rng);
            let level = (draw.floor() as usize).min(l - 1);
            let volume = cfg.counterparty_volume * depth_mult * rng.random_range(0.5..1.5);
            RestingOrder {
                side: if j % 2 == 0 { Side::Buy } else { Side::Sell },
                level,
                volume,
                arrival_rank: ranks[j],
            }
        })
        .collect();
    let mut s = BookState {
        bid_prices: vec![0.0; l],
        ask_prices: vec![0.0; l],
        bid_volumes: vec![0.0; l],
        ask_volumes: vec![0.0; l],
        flow_imbalance: 0.0,
        telemetry: Telemetry::new(cfg.telemetry_window),
        mid_bps: cfg.mid_bps,
        tick_bps: cfg.tick_bps,
        counterparties,
        background_bid,
        background_ask,
    };
    s.refresh_levels();
    s
}

/// Deterministic initial book for `(seed, regime)`.
pub fn reset(cfg: &EnvConfig, seed: u64, regime: RegimeConfig) -> Result<BookState> {
    Ok(Env::new(cfg.clone(), seed, regime)?.state().clone())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketSample {
    pub spread_bps: f64,
    pub depth5: f64,
    pub fill_mass: f64,
    pub order_size: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MqsCeilings {
    pub spread_bps: f64,
    pub fill_rate: f64,
    pub depth5: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarketMetrics {
    pub spread_bps: f64,
    pub depth5: f64,
    pub fill_rate: f64,
    pub throughput: f64,
    pub mqs: f64,
}

/// `MQS = (s*/s + f/f* + d/d*) / 3` over trace means.
pub fn compute_market_metrics(
    trace: &[MarketSample],
    wall_seconds: f64,
    ceilings: &MqsCeilings,
) -> Result<MarketMetrics> {
    if trace.is_empty() {
        return Err(FoamError::Empty("market trace"));
    }
    let n = trace.len() as f64;
    let spread = trace.iter().map(|s| s.spread_bps).sum::<f64>() / n;
    let depth = trace.iter().map(|s| s.depth5).sum::<f64>() / n;
    let size: f64 = trace.iter().map(|s| s.order_size).sum();
    let fill = if size > 0.0 {
        trace.iter().map(|s| s.fill_mass).sum::<f64>() / size
    } else {
        0.0
    };
    let throughput = if wall_seconds > 0.0 { n / wall_seconds } else { 0.0 };
    let mqs = (ceilings.spread_bps / spread + fill / ceilings.fill_rate + depth / ceilings.depth5) / 3.0;
    Ok(MarketMetrics {
        spread_bps: spread,
        depth5: depth,
        fill_rate: fill,
        throughput,
        mqs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub reward: f64,
    pub fill_mass: f64,
    pub spread_bps: f64,
    pub depth5: f64,
    pub costs: Vec<f64>,
}

pub fn write_trace_csv<W: Write>(mut w: W, rows: &[TraceRow], num_costs: usize) -> Result<()> {
    let mut header = String::from("step,reward,fill_mass,spread_bps,depth5");
    for i in 0..num_costs {
        header.push_str(&format!(",cost_{i}"));
    }
    writeln!(w, "{header}")?;
    for r in rows {
        write!(
            w,
            "{},{},{},{},{}",
            r.step, r.reward, r.fill_mass, r.spread_bps, r.depth5
        )?;
        for c in &r.costs {
            write!(w, ",{c}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn small_cfg() -> EnvConfig {
        EnvConfig {
            counterparties: 20,
            constraints: vec![ConstraintKind::DemographicParity, ConstraintKind::EqualizedOdds],
            ..EnvConfig::default()
        }
    }

    fn order(side: Side, size: f64, group: u8) -> IncomingOrder {
        IncomingOrder {
            side,
            size,
            group,
            arrival_time: 0,
            latency_rank: 0,
            inter_arrival: 1.0,
        }
    }

    /// Three-level book with three equal-volume ask counterparties.
    fn hand_book() -> BookState {
        let cps = vec![
            RestingOrder {
                side: Side::Sell,
                level: 0,
                volume: 10.0,
                arrival_rank: 0,
            },
            RestingOrder {
                side: Side::Sell,
                level: 1,
                volume: 10.0,
                arrival_rank: 1,
            },
            RestingOrder {
                side: Side::Sell,
                level: 2,
                volume: 10.0,
                arrival_rank: 2,
            },
            RestingOrder {
                side: Side::Buy,
                level: 0,
                volume: 10.0,
                arrival_rank: 3,
            },
        ];
        let mut s = BookState {
            bid_prices: vec![0.0; 3],
            ask_prices: vec![0.0; 3],
            bid_volumes: vec![0.0; 3],
            ask_volumes: vec![0.0; 3],
            flow_imbalance: 0.0,
            telemetry: Telemetry::new(4),
            mid_bps: 100.0,
            tick_bps: 1.0,
            counterparties: cps,
            background_bid: vec![5.0; 3],
            background_ask: vec![5.0; 3],
        };
        s.refresh_levels();
        s
    }

    #[test]
    fn reset_is_deterministic_and_seed_sensitive() {
        let cfg = small_cfg();
        let a = reset(&cfg, 42, RegimeConfig::calm()).unwrap();
        let b = reset(&cfg, 42, RegimeConfig::calm()).unwrap();
        let c = reset(&cfg, 43, RegimeConfig::calm()).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.bid_volumes, c.bid_volumes);
        assert!(a.bid_volumes.iter().chain(&a.ask_volumes).all(|v| *v > 0.0));
    }

    #[test]
    fn ladder_invariants_hold() {
        let s = reset(&small_cfg(), 1, RegimeConfig::calm()).unwrap();
        assert!(s.bid_prices.windows(2).all(|w| w[0] > w[1]));
        assert!(s.ask_prices.windows(2).all(|w| w[0] < w[1]));
        assert!(s.bid_prices[0] < s.ask_prices[0]);
    }

    #[test]
    fn drought_scales_depth() {
        let cfg = small_cfg();
        let calm = reset(&cfg, 42, RegimeConfig::calm()).unwrap();
        let drought = RegimeConfig::preset(RegimeName::Drought);
        let d = reset(&cfg, 42, drought).unwrap();
        let expected = drought.depth_multiplier * calm.total_volume();
        assert!((d.total_volume() - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn uniform_allocation_over_feasible_equal_volumes() {
        let s = hand_book();
        let alloc = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0];
        let ex = execute(&s, &order(Side::Buy, 12.0, 0), &alloc).unwrap();
        for j in 0..3 {
            assert!((ex.state.counterparties[j].volume - 6.0).abs() < 1e-12);
        }
        assert_eq!(ex.state.counterparties[3].volume, 10.0);
        assert!((ex.fill_mass - 12.0).abs() < 1e-12);
        // Capped at available volume.
        let ex = execute(&s, &order(Side::Buy, 60.0, 0), &alloc).unwrap();
        for j in 0..3 {
            assert_eq!(ex.state.counterparties[j].volume, 0.0);
        }
        assert!((ex.fill_mass - 30.0).abs() < 1e-12);
    }

    #[test]
    fn masked_out_mass_never_fills() {
        let s = hand_book();
        let ex = execute(&s, &order(Side::Buy, 5.0, 1), &[0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(ex.fill_mass, 0.0);
        assert_eq!(ex.state, s);
    }

    #[test]
    fn off_simplex_allocation_rejected() {
        let s = hand_book();
        let err = execute(&s, &order(Side::Buy, 5.0, 1), &[0.5, 0.5, 0.5, 0.0]).unwrap_err();
        assert!(matches!(err, FoamError::OffSimplex { .. }));
    }

    #[test]
    fn empty_mask_yields_depth_term_only() {
        let cfg = small_cfg();
        let mut env = Env::new(cfg.clone(), 3, RegimeConfig::calm()).unwrap();
        let o = order(Side::Buy, 10.0, 1);
        for c in env.state.counterparties.iter_mut() {
            if c.side == Side::Sell {
                c.volume = 0.0;
            }
        }
        env.state.refresh_levels();
        let depth = env.state.depth5();
        let k = cfg.counterparties;
        let out = env.step(&o, &vec![1.0 / k as f64; k]).unwrap();
        assert_eq!(out.fill_mass, 0.0);
        assert!((out.reward - cfg.reward_weights.depth * depth / env.initial_depth5).abs() < 1e-12);
        assert_eq!(out.costs[0], 0.0);
    }

    #[test]
    fn volume_conservation_over_random_steps() {
        let cfg = small_cfg();
        let mut env = Env::new(cfg.clone(), 9, RegimeConfig::calm()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let o = env.sample_arrival();
            let raw: Vec<f64> = (0..cfg.counterparties).map(|_| rng.random::<f64>()).collect();
            let s: f64 = raw.iter().sum();
            let alloc: Vec<f64> = raw.iter().map(|v| v / s).collect();
            let before = env.state().total_volume();
            let ex = execute(env.state(), &o, &alloc).unwrap();
            assert!((before - ex.state.total_volume() - ex.fill_mass).abs() < 1e-9);
            env.step(&o, &alloc).unwrap();
        }
    }

    #[test]
    fn poisson_limit_mean_and_goodness_of_fit() {
        let mut h = Hawkes::new(HawkesParams {
            mu: 2.0,
            alpha: 0.0,
            beta: 1.0,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 100_000;
        let waits: Vec<f64> = (0..n).map(|_| h.next(1.0, &mut rng)).collect();
        let mean = waits.iter().sum::<f64>() / n as f64;
        let se = 0.5 / (n as f64).sqrt();
        assert!((mean - 0.5).abs() < 3.0 * se);

        let bins = 20;
        let mut counts = vec![0usize; bins];
        for w in &waits {
            let u = 1.0 - (-2.0 * w).exp();
            counts[((u * bins as f64) as usize).min(bins - 1)] += 1;
        }
        let e = n as f64 / bins as f64;
        let chi2: f64 = counts.iter().map(|c| (*c as f64 - e).powi(2) / e).sum();
        let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
        assert!(p > 0.01, "p = {p}");
    }

    #[test]
    fn hawkes_stationary_rate() {
        let params = HawkesParams {
            mu: 1.0,
            alpha: 0.5,
            beta: 1.0,
        };
        let mut h = Hawkes::new(params);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let n = 1_000_000;
        for _ in 0..n {
            h.next(1.0, &mut rng);
        }
        let rate = n as f64 / h.clock;
        assert!((rate - 2.0).abs() / 2.0 < 0.05, "{rate}");
    }

    fn realized_rate(regime: RegimeConfig, seed: u64, n: usize) -> f64 {
        let mut env = Env::new(small_cfg(), seed, regime).unwrap();
        let total: f64 = (0..n).map(|_| env.sample_arrival().inter_arrival).sum();
        n as f64 / total
    }

    #[test]
    fn news_shock_quintuples_rate() {
        let calm = realized_rate(RegimeConfig::calm(), 5, 200_000);
        let news = realized_rate(RegimeConfig::preset(RegimeName::NewsShock), 5, 200_000);
        assert!((news / calm - 5.0).abs() / 5.0 < 0.05, "{}", news / calm);
    }

    #[test]
    fn arrival_rate_monotone_in_multiplier() {
        let mut regimes: Vec<RegimeConfig> = RegimeName::ALL.iter().map(|n| RegimeConfig::preset(*n)).collect();
        regimes.sort_by(|a, b| a.arrival_multiplier.total_cmp(&b.arrival_multiplier));
        for seed in [1u64, 2, 3] {
            let rates: Vec<f64> = regimes.iter().map(|r| realized_rate(*r, seed, 20_000)).collect();
            for w in rates.windows(2) {
                assert!(w[1] >= w[0], "{rates:?}");
            }
        }
    }

    #[test]
    fn market_metrics_examples() {
        let c = MqsCeilings {
            spread_bps: 2.0,
            fill_rate: 0.5,
            depth5: 100.0,
        };
        let same = [MarketSample {
            spread_bps: 2.0,
            depth5: 100.0,
            fill_mass: 5.0,
            order_size: 10.0,
        }];
        let m = compute_market_metrics(&same, 1.0, &c).unwrap();
        assert!((m.mqs - 1.0).abs() < 1e-15);
        let worse = [MarketSample {
            spread_bps: 4.0,
            depth5: 100.0,
            fill_mass: 2.5,
            order_size: 10.0,
        }];
        let m = compute_market_metrics(&worse, 1.0, &c).unwrap();
        assert!((m.mqs - 2.0 / 3.0).abs() < 1e-15);
        assert!(compute_market_metrics(&[], 1.0, &c).is_err());

        let s = hand_book();
        let quoted = s.ask_prices[0] - s.bid_prices[0];
        let trace = vec![
            MarketSample {
                spread_bps: s.spread_bps(),
                depth5: s.depth5(),
                fill_mass: 0.0,
                order_size: 1.0
            };
            3
        ];
        let m = compute_market_metrics(&trace, 1.0, &c).unwrap();
        assert_eq!(m.spread_bps, quoted);
    }

    #[test]
    fn trace_csv_header() {
        let mut buf = Vec::new();
        let rows = vec![TraceRow {
            step: 0,
            reward: 1.0,
            fill_mass: 2.0,
            spread_bps: 1.0,
            depth5: 3.0,
            costs: vec![0.1, 0.2],
        }];
        write_trace_csv(&mut buf, &rows, 2).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,reward,fill_mass,spread_bps,depth5,cost_0,cost_1\n0,1,2,1,3,0.1,0.2\n"));
    }

    #[test]
    fn features_have_declared_length() {
        let cfg = small_cfg();
        let mut env = Env::new(cfg.clone(), 1, RegimeConfig::calm()).unwrap();
        let o = env.sample_arrival();
        assert_eq!(env.features(&o).len(), cfg.feature_dim());
    }
}
