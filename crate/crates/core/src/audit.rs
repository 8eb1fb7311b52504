//! Settlement commitments: Merkle allocation roots, state and model hashes,
//! fund conservation, challenge adjudication and open replay.
//!
//! Every hash covers a canonical big-endian serialization. Leaves are
//! `SHA256(0x00 || trade)` and interior nodes `SHA256(0x01 || left || right)`;
//! a level with an odd node count duplicates its last node.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{FoamError, Result};
use crate::policy::Policy;

pub type Hash = [u8; 32];

/// Fixed-point scale for allocations and fill masses.
pub const QUANTUM: f64 = 1e-9;
/// Token base units per unit of filled volume.
pub const TOKEN_UNITS: f64 = 1e6;
pub const FEE_BPS: u64 = 1;
pub const COMMITMENT_LEN: usize = 108;
pub const REPLAY_TOL: f64 = 1e-9;

const BATCH_MAGIC: &[u8; 8] = b"FOAMSB1\0";
const LEAF_TAG: u8 = 0x00;
const NODE_TAG: u8 = 0x01;

pub fn quantize(x: f64) -> i64 {
    (x / QUANTUM).round() as i64
}

pub fn dequantize(q: i64) -> f64 {
    q as f64 * QUANTUM
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Leg {
    pub counterparty: u32,
    pub token_in: u64,
    pub token_out: u64,
    pub fee: u64,
}

/// Legs for per-counterparty fill volumes; the taker pays `token_in`, the
/// counterparty receives `token_in - fee`.
pub fn legs_from_fills(fills: &[f64]) -> Vec<Leg> {
    fills
        .iter()
        .enumerate()
        .filter(|(_, f)| **f > 0.0)
        .map(|(j, f)| {
            let token_in = (f * TOKEN_UNITS).round() as u64;
            let fee = token_in * FEE_BPS / 10_000;
            Leg {
                counterparty: j as u32,
                token_in,
                token_out: token_in - fee,
                fee,
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trade {
    pub order_id: u64,
    pub group: u8,
    pub qualified: bool,
    /// Policy input at decision time.
    pub features: Vec<f64>,
    /// Quantized allocation.
    pub allocation: Vec<i64>,
    /// Quantized masked fill mass.
    pub fill_mass: i64,
    pub legs: Vec<Leg>,
}

impl Trade {
    fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.order_id.to_be_bytes());
        out.push(self.group);
        out.push(self.qualified as u8);
        put_len(out, self.features.len());
        for f in &self.features {
            out.extend_from_slice(&f.to_be_bytes());
        }
        put_len(out, self.allocation.len());
        for a in &self.allocation {
            out.extend_from_slice(&a.to_be_bytes());
        }
        out.extend_from_slice(&self.fill_mass.to_be_bytes());
        put_len(out, self.legs.len());
        for l in &self.legs {
            out.extend_from_slice(&l.counterparty.to_be_bytes());
            out.extend_from_slice(&l.token_in.to_be_bytes());
            out.extend_from_slice(&l.token_out.to_be_bytes());
            out.extend_from_slice(&l.fee.to_be_bytes());
        }
    }

    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.encode(&mut out);
        out
    }

    pub fn leaf_hash(&self) -> Hash {
        let mut h = Sha256::new();
        h.update([LEAF_TAG]);
        h.update(self.canonical_bytes());
        h.finalize().into()
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SettlementBatch {
    pub trades: Vec<Trade>,
    pub state_snapshot: Vec<u8>,
    pub model_bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FairnessMetrics {
    pub dp_gap: f64,
    pub eo_gap: f64,
    pub lipschitz_budget: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettlementCommitment {
    pub state_hash: Hash,
    pub model_hash: Hash,
    pub allocation_root: Hash,
    pub fairness: FairnessMetrics,
    pub fund_balance: i128,
    pub trade_count: u32,
    pub leaf_hashes: Vec<Hash>,
}

pub fn sha256(bytes: &[u8]) -> Hash {
    Sha256::digest(bytes).into()
}

fn node(l: &Hash, r: &Hash) -> Hash {
    let mut h = Sha256::new();
    h.update([NODE_TAG]);
    h.update(l);
    h.update(r);
    h.finalize().into()
}

fn next_level(level: &[Hash]) -> Vec<Hash> {
    level
        .chunks(2)
        .map(|p| node(&p[0], p.get(1).unwrap_or(&p[0])))
        .collect()
}

pub fn merkle_root(leaves: &[Hash]) -> Result<Hash> {
    if leaves.is_empty() {
        return Err(FoamError::Empty("merkle leaves"));
    }
    let mut level = leaves.to_vec();
    while level.len() > 1 {
        level = next_level(&level);
    }
    Ok(level[0])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MerkleProof {
    pub index: usize,
    /// Sibling hashes from the leaf level up.
    pub siblings: Vec<Hash>,
}

impl MerkleProof {
    pub fn build(leaves: &[Hash], index: usize) -> Result<Self> {
        if index >= leaves.len() {
            return Err(FoamError::DimensionMismatch {
                expected: leaves.len(),
                actual: index,
                context: "merkle proof index",
            });
        }
        let mut siblings = Vec::new();
        let mut level = leaves.to_vec();
        let mut i = index;
        while level.len() > 1 {
            let sib = i ^ 1;
            siblings.push(*level.get(sib).unwrap_or(&level[i]));
            level = next_level(&level);
            i /= 2;
        }
        Ok(Self { index, siblings })
    }

    pub fn verify(&self, leaf: &Hash, root: &Hash) -> bool {
        let mut acc = *leaf;
        let mut i = self.index;
        for s in &self.siblings {
            acc = if i.is_multiple_of(2) {
                node(&acc, s)
            } else {
                node(s, &acc)
            };
            i /= 2;
        }
        acc == *root
    }
}

/// `|mean fill mass, group 1 - group 0|` over trades passing `keep`; zero
/// when a group is absent.
fn group_gap(trades: &[Trade], keep: impl Fn(&Trade) -> bool) -> f64 {
    let mut sum = [0i128; 2];
    let mut n = [0i128; 2];
    for t in trades.iter().filter(|t| keep(t)) {
        let g = (t.group.min(1)) as usize;
        sum[g] += t.fill_mass as i128;
        n[g] += 1;
    }
    if n[0] == 0 || n[1] == 0 {
        return 0.0;
    }
    let m1 = sum[1] as f64 / n[1] as f64;
    let m0 = sum[0] as f64 / n[0] as f64;
    (m1 - m0).abs() * QUANTUM
}

/// Recomputed from trades and model bytes.
pub fn fairness_metrics(batch: &SettlementBatch) -> Result<FairnessMetrics> {
    let policy = Policy::from_bytes(&batch.model_bytes)?;
    Ok(FairnessMetrics {
        dp_gap: group_gap(&batch.trades, |_| true),
        eo_gap: group_gap(&batch.trades, |t| t.qualified),
        lipschitz_budget: policy.lipschitz_budget(),
    })
}

/// `sum(token_in) - sum(token_out) - sum(fee)`.
pub fn fund_balance(batch: &SettlementBatch) -> i128 {
    batch
        .trades
        .iter()
        .flat_map(|t| &t.legs)
        .map(|l| l.token_in as i128 - l.token_out as i128 - l.fee as i128)
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Conservation {
    Ok,
    /// Negative when outflows exceed inflows.
    Violated {
        deficit: i128,
    },
}

pub fn verify_conservation(batch: &SettlementBatch) -> Conservation {
    match fund_balance(batch) {
        0 => Conservation::Ok,
        d => Conservation::Violated { deficit: d },
    }
}

pub fn commit(batch: &SettlementBatch) -> Result<SettlementCommitment> {
    if batch.trades.is_empty() {
        return Err(FoamError::Empty("settlement batch"));
    }
    let trade_count =
        u32::try_from(batch.trades.len()).map_err(|_| FoamError::Serialization("more than u32::MAX trades".into()))?;
    let leaf_hashes: Vec<Hash> = batch.trades.iter().map(Trade::leaf_hash).collect();
    Ok(SettlementCommitment {
        state_hash: sha256(&batch.state_snapshot),
        model_hash: sha256(&batch.model_bytes),
        allocation_root: merkle_root(&leaf_hashes)?,
        fairness: fairness_metrics(batch)?,
        fund_balance: fund_balance(batch),
        trade_count,
        leaf_hashes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Evidence {
    /// Inclusion proof of the committed leaf; it verifies against the
    /// committed root and fails for the recomputed leaf.
    Leaf {
        proof: MerkleProof,
        committed: Hash,
        recomputed: Hash,
    },
    Field(&'static str),
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum ChallengeOutcome {
    Upheld(Evidence),
    Rejected,
}

impl ChallengeOutcome {
    pub fn is_upheld(&self) -> bool {
        matches!(self, ChallengeOutcome::Upheld(_))
    }
}

/// Adjudicates a commitment against published batch bytes.
pub fn challenge(commitment: &SettlementCommitment, published: &[u8]) -> ChallengeOutcome {
    let batch = match SettlementBatch::from_bytes(published) {
        Ok(b) => b,
        Err(e) => return ChallengeOutcome::Upheld(Evidence::Malformed(e.to_string())),
    };
    challenge_batch(commitment, &batch)
}

pub fn challenge_batch(commitment: &SettlementCommitment, batch: &SettlementBatch) -> ChallengeOutcome {
    use ChallengeOutcome::Upheld;
    if commitment.leaf_hashes.len() != commitment.trade_count as usize
        || merkle_root(&commitment.leaf_hashes).ok() != Some(commitment.allocation_root)
    {
        return Upheld(Evidence::Field("leaf_hashes"));
    }
    let recomputed = match commit(batch) {
        Ok(c) => c,
        Err(e) => return Upheld(Evidence::Malformed(e.to_string())),
    };
    for (i, (c, r)) in commitment.leaf_hashes.iter().zip(&recomputed.leaf_hashes).enumerate() {
        if c != r {
            return match MerkleProof::build(&commitment.leaf_hashes, i) {
                Ok(proof) => Upheld(Evidence::Leaf {
                    proof,
                    committed: *c,
                    recomputed: *r,
                }),
                Err(e) => Upheld(Evidence::Malformed(e.to_string())),
            };
        }
    }
    let checks: [(&'static str, bool); 6] = [
        ("trade_count", commitment.trade_count == recomputed.trade_count),
        (
            "allocation_root",
            commitment.allocation_root == recomputed.allocation_root,
        ),
        ("state_hash", commitment.state_hash == recomputed.state_hash),
        ("model_hash", commitment.model_hash == recomputed.model_hash),
        ("fairness_metrics", commitment.fairness == recomputed.fairness),
        (
            "fund_balance",
            commitment.fund_balance == recomputed.fund_balance && recomputed.fund_balance == 0,
        ),
    ];
    match checks.iter().find(|(_, ok)| !ok) {
        Some((name, _)) => Upheld(Evidence::Field(name)),
        None => ChallengeOutcome::Rejected,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ReplayOutcome {
    Consistent,
    Inconsistent(String),
}

/// Recomputes every allocation from the committed model and compares within
/// [`REPLAY_TOL`] per component.
pub fn open_replay(commitment: &SettlementCommitment, trades: &[Trade], model_bytes: &[u8]) -> ReplayOutcome {
    use ReplayOutcome::Inconsistent;
    if sha256(model_bytes) != commitment.model_hash {
        return Inconsistent("model hash mismatch".into());
    }
    let policy = match Policy::from_bytes(model_bytes) {
        Ok(p) => p,
        Err(e) => return Inconsistent(e.to_string()),
    };
    if trades.len() != commitment.trade_count as usize {
        return Inconsistent("trade count mismatch".into());
    }
    for (i, t) in trades.iter().enumerate() {
        if t.leaf_hash() != commitment.leaf_hashes[i] {
            return Inconsistent(format!("trade {i} is not the committed leaf"));
        }
        let a = match policy.forward(&t.features) {
            Ok(a) => a,
            Err(e) => return Inconsistent(format!("trade {i}: {e}")),
        };
        if a.len() != t.allocation.len() {
            return Inconsistent(format!("trade {i}: allocation length"));
        }
        for (j, (x, q)) in a.iter().zip(&t.allocation).enumerate() {
            if (x - dequantize(*q)).abs() > REPLAY_TOL {
                return Inconsistent(format!("trade {i} component {j}"));
            }
        }
    }
    ReplayOutcome::Consistent
}

/// Threshold-key replay is not available.
pub fn permissioned_replay(_commitment: &SettlementCommitment) -> Result<ReplayOutcome> {
    Err(FoamError::InvalidConfig("permissioned replay is unsupported".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitmentSidecar {
    pub fairness: FairnessMetrics,
    pub fund_balance: i128,
    pub trade_count: u32,
    pub leaf_hashes: Vec<String>,
}

impl SettlementCommitment {
    /// `state_hash | model_hash | allocation_root | i64 balance | u32 count`.
    pub fn to_record(&self) -> Result<[u8; COMMITMENT_LEN]> {
        let bal = i64::try_from(self.fund_balance)
            .map_err(|_| FoamError::Serialization("fund balance exceeds i64".into()))?;
        let mut out = [0u8; COMMITMENT_LEN];
        out[..32].copy_from_slice(&self.state_hash);
        out[32..64].copy_from_slice(&self.model_hash);
        out[64..96].copy_from_slice(&self.allocation_root);
        out[96..104].copy_from_slice(&bal.to_be_bytes());
        out[104..].copy_from_slice(&self.trade_count.to_be_bytes());
        Ok(out)
    }

    pub fn sidecar(&self) -> CommitmentSidecar {
        CommitmentSidecar {
            fairness: self.fairness,
            fund_balance: self.fund_balance,
            trade_count: self.trade_count,
            leaf_hashes: self.leaf_hashes.iter().map(to_hex).collect(),
        }
    }

    pub fn from_parts(record: &[u8], sidecar: &CommitmentSidecar) -> Result<Self> {
        if record.len() != COMMITMENT_LEN {
            return Err(FoamError::Serialization(format!(
                "commitment record is {} bytes, expected {COMMITMENT_LEN}",
                record.len()
            )));
        }
        let hash = |r: std::ops::Range<usize>| -> Hash { record[r].try_into().expect("32-byte slice") };
        let bal = i64::from_be_bytes(record[96..104].try_into().expect("8-byte slice"));
        let count = u32::from_be_bytes(record[104..].try_into().expect("4-byte slice"));
        if bal as i128 != sidecar.fund_balance || count != sidecar.trade_count {
            return Err(FoamError::Serialization("record and sidecar disagree".into()));
        }
        let leaf_hashes = sidecar
            .leaf_hashes
            .iter()
            .map(|s| from_hex(s))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            state_hash: hash(0..32),
            model_hash: hash(32..64),
            allocation_root: hash(64..96),
            fairness: sidecar.fairness,
            fund_balance: bal as i128,
            trade_count: count,
            leaf_hashes,
        })
    }
}

pub fn to_hex(h: &Hash) -> String {
    hex::encode(h)
}

pub fn from_hex(s: &str) -> Result<Hash> {
    let mut out = [0u8; 32];
    hex::decode_to_slice(s, &mut out).map_err(|e| FoamError::Serialization(format!("bad hex hash {s:?}: {e}")))?;
    Ok(out)
}

fn put_len(out: &mut Vec<u8>, n: usize) {
    out.extend_from_slice(&(n as u64).to_be_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|e| *e <= self.bytes.len())
            .ok_or_else(|| FoamError::Serialization("truncated settlement batch".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn arr<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("exact length"))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.arr()?))
    }

    /// Length prefix, bounded by the bytes left at `min_item` bytes each.
    fn len(&mut self, min_item: usize) -> Result<usize> {
        let n = self.u64()?;
        let left = (self.bytes.len() - self.pos) as u64;
        if n.saturating_mul(min_item.max(1) as u64) > left {
            return Err(FoamError::Serialization("length prefix exceeds data".into()));
        }
        Ok(n as usize)
    }

    fn flag(&mut self, what: &str) -> Result<u8> {
        let v = self.arr::<1>()?[0];
        if v > 1 {
            return Err(FoamError::Serialization(format!("{what} byte {v} is not 0 or 1")));
        }
        Ok(v)
    }

    fn blob(&mut self) -> Result<Vec<u8>> {
        let n = self.len(1)?;
        Ok(self.take(n)?.to_vec())
    }
}

impl SettlementBatch {
    /// Magic, trade count, trades in canonical form, then the state snapshot
    /// and model bytes, each length-prefixed.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(BATCH_MAGIC);
        put_len(&mut out, self.trades.len());
        for t in &self.trades {
            t.encode(&mut out);
        }
        put_len(&mut out, self.state_snapshot.len());
        out.extend_from_slice(&self.state_snapshot);
        put_len(&mut out, self.model_bytes.len());
        out.extend_from_slice(&self.model_bytes);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(8)? != BATCH_MAGIC {
            return Err(FoamError::Serialization("bad settlement batch magic".into()));
        }
        let n = rd.len(42)?;
        let mut trades = Vec::with_capacity(n);
        for _ in 0..n {
            let order_id = rd.u64()?;
            let group = rd.flag("group")?;
            let qualified = rd.flag("qualified")? == 1;
            let nf = rd.len(8)?;
            let features = (0..nf)
                .map(|_| Ok(f64::from_be_bytes(rd.arr()?)))
                .collect::<Result<_>>()?;
            let na = rd.len(8)?;
            let allocation = (0..na)
                .map(|_| Ok(i64::from_be_bytes(rd.arr()?)))
                .collect::<Result<_>>()?;
            let fill_mass = i64::from_be_bytes(rd.arr()?);
            let nl = rd.len(28)?;
            let legs = (0..nl)
                .map(|_| {
                    Ok(Leg {
                        counterparty: u32::from_be_bytes(rd.arr()?),
                        token_in: rd.u64()?,
                        token_out: rd.u64()?,
                        fee: rd.u64()?,
                    })
                })
                .collect::<Result<_>>()?;
            trades.push(Trade {
                order_id,
                group,
                qualified,
                features,
                allocation,
                fill_mass,
                legs,
            });
        }
        let state_snapshot = rd.blob()?;
        let model_bytes = rd.blob()?;
        if rd.pos != bytes.len() {
            return Err(FoamError::Serialization("trailing bytes after settlement batch".into()));
        }
        Ok(Self {
            trades,
            state_snapshot,
            model_bytes,
        })
    }
}
