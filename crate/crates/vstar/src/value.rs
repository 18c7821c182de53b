//! Prefix value estimation.
//!
//! Semantic-aware dense step rewards are built from candidate prefix buckets
//! and item embeddings; the tabular value table is trained toward one-step TD
//! targets. An exact backward-induction oracle over the full trie provides
//! the "perfect value" used by reachability and alignment studies.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::env::{cosine, Environment};
use crate::error::VstarError;
use crate::policy::{CandidateEntry, CandidateSet, PolicyTable, ValidityMask};
use crate::sid::{Prefix, Sid, Token};
use crate::Result;

/// Read-only prefix value lookup used by the decoder. Implemented by the
/// trained table and by the exact oracle.
pub trait ValueEstimator {
    fn value(&self, ctx: usize, prefix: &Prefix) -> f64;
}

/// Per-depth step-reward weights `w_1..w_L`, positive and non-decreasing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRewardParams {
    pub weights: Vec<f64>,
}

impl Default for StepRewardParams {
    fn default() -> Self {
        StepRewardParams {
            weights: vec![0.3, 0.5, 1.0],
        }
    }
}

impl StepRewardParams {
    pub fn validate(&self, sid_len: usize) -> Result<()> {
        if self.weights.len() != sid_len {
            return Err(VstarError::Config(format!(
                "expected {} step-reward weights, got {}",
                sid_len,
                self.weights.len()
            )));
        }
        if self.weights.iter().any(|&w| w <= 0.0) {
            return Err(VstarError::Config("step-reward weights must be positive".into()));
        }
        if self.weights.windows(2).any(|w| w[0] > w[1]) {
            return Err(VstarError::Config(
                "step-reward weights must be non-decreasing".into(),
            ));
        }
        Ok(())
    }
}

/// Entries of `cands` whose SID starts with `p`.
pub fn prefix_bucket<'a>(cands: &'a CandidateSet, p: &Prefix) -> Vec<&'a CandidateEntry> {
    cands
        .entries
        .iter()
        .filter(|e| p.is_prefix_of(&e.sid))
        .collect()
}

/// Arithmetic mean (not renormalized) of member item embeddings over the
/// prefix bucket.
pub fn prefix_embedding(env: &Environment, cands: &CandidateSet, p: &Prefix) -> Result<Vec<f64>> {
    let bucket = prefix_bucket(cands, p);
    if bucket.is_empty() {
        return Err(VstarError::EmptyBucket(format!("no candidates under {p}")));
    }
    let dim = env.embed_dim();
    let mut mean = vec![0.0; dim];
    for entry in &bucket {
        for (slot, x) in mean.iter_mut().zip(env.embedding(&entry.sid)) {
            *slot += x;
        }
    }
    for slot in mean.iter_mut() {
        *slot /= bucket.len() as f64;
    }
    Ok(mean)
}

/// Dense semantic step reward for prefix `p` at depth `l`:
/// `w_l` on a ground-truth prefix match, otherwise
/// `-w_l * (1 - cos(mean bucket embedding, e(y*)))`.
///
/// Errors with an empty-bucket error when the mismatch branch has no sampled
/// candidates; see [`step_reward_lenient`] for the fallback form.
pub fn step_reward(
    env: &Environment,
    cands: &CandidateSet,
    params: &StepRewardParams,
    ctx: usize,
    p: &Prefix,
    truth: &Sid,
) -> Result<f64> {
    let depth = p.depth();
    if depth == 0 || depth > env.sid_len() {
        return Err(VstarError::InvalidArgument(format!(
            "step reward depth {depth} outside 1..={}",
            env.sid_len()
        )));
    }
    let w = params.weights[depth - 1];
    if p.tokens() == &truth.tokens()[..depth] {
        return Ok(w);
    }
    let mean = prefix_embedding(env, cands, p)?;
    let _ = ctx;
    let cos = cosine(&mean, env.embedding(truth));
    Ok(-w * (1.0 - cos))
}

/// [`step_reward`] with the empty-bucket fallback `cos := 0`; returns whether
/// the fallback fired so callers can keep a diagnostic count.
pub fn step_reward_lenient(
    env: &Environment,
    cands: &CandidateSet,
    params: &StepRewardParams,
    ctx: usize,
    p: &Prefix,
    truth: &Sid,
) -> Result<(f64, bool)> {
    match step_reward(env, cands, params, ctx, p, truth) {
        Ok(r) => Ok((r, false)),
        Err(VstarError::EmptyBucket(_)) => {
            let w = params.weights[p.depth() - 1];
            Ok((-w, true))
        }
        Err(e) => Err(e),
    }
}

/// One harvested TD transition: state, dense step reward, successor (absent at
/// depth L).
#[derive(Debug, Clone)]
pub struct TdTransition {
    pub ctx: usize,
    pub state: Prefix,
    pub reward: f64,
    pub next: Option<Prefix>,
}

#[derive(Debug, Clone, Copy)]
struct ValueCell {
    value: f64,
    visited: bool,
}

/// Tabular prefix value estimator, one scalar per (context, prefix). Cold
/// states report 0.0 and are distinguishable via the visit flag.
#[derive(Debug, Clone)]
pub struct ValueTable {
    gamma: f64,
    learning_rate: f64,
    cells: HashMap<(usize, Prefix), ValueCell>,
}

impl ValueTable {
    pub fn new(gamma: f64, learning_rate: f64) -> Result<Self> {
        if !(0.0 < gamma && gamma <= 1.0) {
            return Err(VstarError::Config(format!("gamma {gamma} outside (0, 1]")));
        }
        if learning_rate <= 0.0 {
            return Err(VstarError::Config(format!(
                "learning rate {learning_rate} must be positive"
            )));
        }
        Ok(ValueTable {
            gamma,
            learning_rate,
            cells: HashMap::new(),
        })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn is_visited(&self, ctx: usize, prefix: &Prefix) -> bool {
        self.cells
            .get(&(ctx, prefix.clone()))
            .map(|c| c.visited)
            .unwrap_or(false)
    }

    /// One-step TD target: `r + gamma * V(s_next)` below depth L, `r` at
    /// depth L (no successor).
    pub fn td_target(&self, transition: &TdTransition) -> f64 {
        match &transition.next {
            None => transition.reward,
            Some(next) => {
                transition.reward + self.gamma * self.value(transition.ctx, next)
            }
        }
    }

    /// Batch TD(0): per sweep, targets are computed from the current table,
    /// averaged per state, and each state moves by `lr * (target - V)`.
    /// Returns the mean squared TD error per sweep (measured before the
    /// sweep's update).
    pub fn td_fit(&mut self, batch: &[TdTransition], sweeps: usize) -> Result<Vec<f64>> {
        if batch.is_empty() {
            return Err(VstarError::InvalidArgument("empty TD batch".into()));
        }
        let mut trace = Vec::with_capacity(sweeps);
        for _ in 0..sweeps {
            let mut sums: HashMap<(usize, Prefix), (f64, usize)> = HashMap::new();
            let mut sq_err = 0.0;
            for t in batch {
                let target = self.td_target(t);
                let current = self.value(t.ctx, &t.state);
                sq_err += (target - current) * (target - current);
                let slot = sums.entry((t.ctx, t.state.clone())).or_insert((0.0, 0));
                slot.0 += target;
                slot.1 += 1;
            }
            trace.push(sq_err / batch.len() as f64);
            for ((ctx, state), (total, n)) in sums {
                let mean_target = total / n as f64;
                let cell = self
                    .cells
                    .entry((ctx, state))
                    .or_insert(ValueCell {
                        value: 0.0,
                        visited: false,
                    });
                cell.value += self.learning_rate * (mean_target - cell.value);
                cell.visited = true;
            }
        }
        Ok(trace)
    }

    pub fn to_snapshot(&self) -> ValueSnapshot {
        let mut entries: Vec<ValueEntry> = self
            .cells
            .iter()
            .map(|((ctx, prefix), cell)| ValueEntry {
                context: *ctx,
                prefix: prefix.tokens().to_vec(),
                value: cell.value,
            })
            .collect();
        entries.sort_by(|a, b| (a.context, &a.prefix).cmp(&(b.context, &b.prefix)));
        ValueSnapshot {
            version: 1,
            gamma: self.gamma,
            learning_rate: self.learning_rate,
            entries,
        }
    }

    pub fn from_snapshot(snapshot: &ValueSnapshot) -> Result<Self> {
        let mut table = ValueTable::new(snapshot.gamma, snapshot.learning_rate)?;
        for entry in &snapshot.entries {
            table.cells.insert(
                (entry.context, Prefix::new(entry.prefix.clone())),
                ValueCell {
                    value: entry.value,
                    visited: true,
                },
            );
        }
        Ok(table)
    }
}

impl ValueEstimator for ValueTable {
    fn value(&self, ctx: usize, prefix: &Prefix) -> f64 {
        self.cells
            .get(&(ctx, prefix.clone()))
            .map(|c| c.value)
            .unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueSnapshot {
    pub version: u32,
    pub gamma: f64,
    pub learning_rate: f64,
    pub entries: Vec<ValueEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueEntry {
    pub context: usize,
    pub prefix: Vec<Token>,
    pub value: f64,
}

/// Exact expected terminal reward per prefix, computed by backward induction
/// under the given policy. Desk-scale only: materializes the full trie for
/// each requested context.
#[derive(Debug, Clone)]
pub struct OracleValue {
    values: HashMap<(usize, Prefix), f64>,
}

impl OracleValue {
    pub fn build(
        env: &Environment,
        policy: &PolicyTable,
        contexts: &[usize],
        mask: &ValidityMask,
    ) -> Result<Self> {
        let v = env.vocab().size();
        let l = env.sid_len();
        let mut values = HashMap::new();
        for &ctx in contexts {
            let profile = env.profile_of(ctx)?;
            // Terminal layer: reward of each leaf.
            let mut layer: Vec<f64> = Vec::with_capacity(v.pow(l as u32));
            for index in 0..v.pow(l as u32) {
                let sid = Sid::from_leaf_index(index, v, l);
                let reward = env.terminal_reward(ctx, &sid)?;
                values.insert((ctx, Prefix::from(&sid)), reward);
                layer.push(reward);
            }
            // Upward sweep: expectation over the masked policy.
            for depth in (0..l).rev() {
                let n_nodes = v.pow(depth as u32);
                let mut upper = Vec::with_capacity(n_nodes);
                for index in 0..n_nodes {
                    let prefix = prefix_at(index, v, depth);
                    let expected = match policy.next_dist_masked(profile, &prefix, mask) {
                        Ok(dist) => dist
                            .iter()
                            .enumerate()
                            .map(|(t, &p)| p * layer[index * v + t])
                            .sum(),
                        // Prefix fully masked out: no valid continuation.
                        Err(_) => 0.0,
                    };
                    values.insert((ctx, prefix), expected);
                    upper.push(expected);
                }
                layer = upper;
            }
        }
        Ok(OracleValue { values })
    }
}

impl ValueEstimator for OracleValue {
    fn value(&self, ctx: usize, prefix: &Prefix) -> f64 {
        self.values
            .get(&(ctx, prefix.clone()))
            .copied()
            .unwrap_or(0.0)
    }
}

fn prefix_at(mut index: usize, v: usize, depth: usize) -> Prefix {
    let mut tokens = vec![0 as Token; depth];
    for slot in tokens.iter_mut().rev() {
        *slot = (index % v) as Token;
        index /= v;
    }
    Prefix::new(tokens)
}
