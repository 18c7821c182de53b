//! Exact tabular autoregressive policy and the likelihood-driven baseline
//! decoders (beam search, top-K sampling).
//!
//! The policy stores one logit vector per (context, prefix) node of the trie;
//! missing nodes default to all-zero logits, i.e. a uniform next-token
//! distribution. All probability queries are exact, which makes enumeration,
//! finite-difference and normalization oracles possible downstream.

use std::collections::{HashMap, HashSet};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::VstarError;
use crate::sid::{Prefix, PrefixTrie, Sid, Token, Vocab};
use crate::Result;

const SNAPSHOT_VERSION: u32 = 1;

/// Validity mask over trie prefixes. A prefix is valid when at least one valid
/// complete SID lies beneath it; the default mask admits everything.
#[derive(Debug, Clone, Default)]
pub struct ValidityMask {
    // None: every prefix is valid.
    valid: Option<HashSet<Prefix>>,
}

impl ValidityMask {
    pub fn all_valid() -> Self {
        ValidityMask { valid: None }
    }

    /// Builds the mask from the set of valid leaves; every ancestor prefix of
    /// a valid SID becomes valid.
    pub fn from_valid_sids<'a, I: IntoIterator<Item = &'a Sid>>(sids: I) -> Self {
        let mut valid = HashSet::new();
        for sid in sids {
            for len in 0..=sid.len() {
                valid.insert(sid.prefix(len));
            }
        }
        ValidityMask { valid: Some(valid) }
    }

    pub fn is_valid(&self, prefix: &Prefix) -> bool {
        match &self.valid {
            None => true,
            Some(set) => set.contains(prefix),
        }
    }

    pub fn is_unrestricted(&self) -> bool {
        self.valid.is_none()
    }
}

/// Tabular autoregressive policy: a trie of logit vectors per context.
#[derive(Debug, Clone)]
pub struct PolicyTable {
    vocab: Vocab,
    sid_len: usize,
    temperature: f64,
    logits: HashMap<usize, PrefixTrie<Vec<f64>>>,
}

impl PolicyTable {
    pub fn new(vocab: Vocab, sid_len: usize) -> Self {
        PolicyTable {
            vocab,
            sid_len,
            temperature: 1.0,
            logits: HashMap::new(),
        }
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn sid_len(&self) -> usize {
        self.sid_len
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn set_temperature(&mut self, temperature: f64) {
        assert!(temperature > 0.0, "temperature must be positive");
        self.temperature = temperature;
    }

    /// Context ids that carry at least one stored logit vector, sorted.
    pub fn contexts(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.logits.keys().copied().collect();
        ids.sort_unstable();
        ids
    }

    fn check_subterminal(&self, prefix: &Prefix) -> Result<()> {
        if prefix.depth() >= self.sid_len {
            return Err(VstarError::InvalidArgument(format!(
                "prefix depth {} is terminal for L={}",
                prefix.depth(),
                self.sid_len
            )));
        }
        Ok(())
    }

    /// Raw logits at a node; zeros when the node has never been written.
    pub fn logits_at(&self, context: usize, prefix: &Prefix) -> Vec<f64> {
        self.logits
            .get(&context)
            .and_then(|trie| trie.get(prefix))
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.vocab.size()])
    }

    pub fn set_logits(&mut self, context: usize, prefix: Prefix, logits: Vec<f64>) -> Result<()> {
        self.check_subterminal(&prefix)?;
        if logits.len() != self.vocab.size() {
            return Err(VstarError::InvalidArgument(format!(
                "logit vector length {} != vocabulary size {}",
                logits.len(),
                self.vocab.size()
            )));
        }
        self.logits
            .entry(context)
            .or_default()
            .insert(prefix, logits);
        Ok(())
    }

    /// Adds `delta` to the node's logits, materializing the node if absent.
    pub fn add_to_logits(&mut self, context: usize, prefix: &Prefix, delta: &[f64]) {
        let vocab_size = self.vocab.size();
        let trie = self.logits.entry(context).or_default();
        let entry = trie
            .entry(prefix.clone())
            .or_insert_with(|| vec![0.0; vocab_size]);
        for (slot, d) in entry.iter_mut().zip(delta) {
            *slot += d;
        }
    }

    /// Next-token distribution at `prefix`: `softmax(logits / temperature)`.
    pub fn next_dist(&self, context: usize, prefix: &Prefix) -> Result<Vec<f64>> {
        self.check_subterminal(prefix)?;
        let logits = self.logits_at(context, prefix);
        Ok(softmax_scaled(&logits, self.temperature))
    }

    /// Masked next-token distribution: invalid children get probability 0 and
    /// the remainder is renormalized.
    pub fn next_dist_masked(
        &self,
        context: usize,
        prefix: &Prefix,
        mask: &ValidityMask,
    ) -> Result<Vec<f64>> {
        let mut dist = self.next_dist(context, prefix)?;
        if mask.is_unrestricted() {
            return Ok(dist);
        }
        let mut total = 0.0;
        for (token, p) in dist.iter_mut().enumerate() {
            if !mask.is_valid(&prefix.child(token as Token)) {
                *p = 0.0;
            }
            total += *p;
        }
        if total <= 0.0 {
            return Err(VstarError::InvalidArgument(format!(
                "no valid children under prefix {prefix}"
            )));
        }
        for p in dist.iter_mut() {
            *p /= total;
        }
        Ok(dist)
    }

    /// `log pi(y | x)` by the probability chain rule.
    pub fn sequence_logprob(&self, context: usize, sid: &Sid) -> Result<f64> {
        Ok(self
            .step_logprobs(context, sid, &ValidityMask::all_valid())?
            .iter()
            .sum())
    }

    /// Per-step `log pi(y_l | x, y_{<l})` under the masked distribution.
    pub fn step_logprobs(
        &self,
        context: usize,
        sid: &Sid,
        mask: &ValidityMask,
    ) -> Result<Vec<f64>> {
        if sid.len() != self.sid_len {
            return Err(VstarError::InvalidArgument(format!(
                "SID length {} != L={}",
                sid.len(),
                self.sid_len
            )));
        }
        let mut logs = Vec::with_capacity(self.sid_len);
        for depth in 0..self.sid_len {
            let prefix = sid.prefix(depth);
            let dist = self.next_dist_masked(context, &prefix, mask)?;
            logs.push(dist[sid.tokens()[depth] as usize].ln());
        }
        Ok(logs)
    }

    /// Next-token entropy in nats over the masked, renormalized distribution.
    /// Always in `[0, ln V]`, with `0 * ln 0 := 0`.
    pub fn entropy(&self, context: usize, prefix: &Prefix, mask: &ValidityMask) -> Result<f64> {
        let dist = self.next_dist_masked(context, prefix, mask)?;
        Ok(entropy_of(&dist))
    }

    /// Gradient of `log pi(v | x, prefix)` with respect to the node's logits:
    /// `(onehot(v) - pi) / temperature`, restricted to valid children.
    pub fn logprob_grad(
        &self,
        context: usize,
        prefix: &Prefix,
        token: Token,
        mask: &ValidityMask,
    ) -> Result<Vec<f64>> {
        let dist = self.next_dist_masked(context, prefix, mask)?;
        if dist[token as usize] <= 0.0 {
            return Err(VstarError::InvalidArgument(format!(
                "token {token} has zero probability under prefix {prefix}"
            )));
        }
        let mut grad: Vec<f64> = dist.iter().map(|p| -p / self.temperature).collect();
        grad[token as usize] += 1.0 / self.temperature;
        // Masked-out children carry no probability and no gradient.
        if !mask.is_unrestricted() {
            for (t, g) in grad.iter_mut().enumerate() {
                if !mask.is_valid(&prefix.child(t as Token)) {
                    *g = 0.0;
                }
            }
        }
        Ok(grad)
    }

    /// Versioned snapshot with exact logits, for behavior-policy freezing and
    /// reproducibility.
    pub fn to_snapshot(&self) -> PolicySnapshot {
        let mut contexts = Vec::new();
        let mut ids: Vec<usize> = self.logits.keys().copied().collect();
        ids.sort_unstable();
        for id in ids {
            let trie = &self.logits[&id];
            let nodes = trie
                .iter_sorted()
                .into_iter()
                .map(|(prefix, logits)| NodeLogits {
                    prefix: prefix.tokens().to_vec(),
                    logits: logits.clone(),
                })
                .collect();
            contexts.push(ContextLogits { context: id, nodes });
        }
        PolicySnapshot {
            version: SNAPSHOT_VERSION,
            vocab: self.vocab.size(),
            sid_len: self.sid_len,
            temperature: self.temperature,
            contexts,
        }
    }

    pub fn from_snapshot(snapshot: &PolicySnapshot) -> Result<Self> {
        if snapshot.version != SNAPSHOT_VERSION {
            return Err(VstarError::Config(format!(
                "unsupported policy snapshot version {}",
                snapshot.version
            )));
        }
        let mut policy = PolicyTable::new(Vocab::new(snapshot.vocab)?, snapshot.sid_len);
        policy.set_temperature(snapshot.temperature);
        for ctx in &snapshot.contexts {
            for node in &ctx.nodes {
                policy.set_logits(
                    ctx.context,
                    Prefix::new(node.prefix.clone()),
                    node.logits.clone(),
                )?;
            }
        }
        Ok(policy)
    }
}

/// Serializable exact-logit dump of a [`PolicyTable`]. Node order is
/// lexicographic, so equal policies produce byte-identical dumps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySnapshot {
    pub version: u32,
    pub vocab: usize,
    pub sid_len: usize,
    pub temperature: f64,
    pub contexts: Vec<ContextLogits>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextLogits {
    pub context: usize,
    pub nodes: Vec<NodeLogits>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NodeLogits {
    pub prefix: Vec<Token>,
    pub logits: Vec<f64>,
}

fn softmax_scaled(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn entropy_of(dist: &[f64]) -> f64 {
    -dist
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// One decoded candidate: a complete SID with its log-probability and, once
/// assigned, its reward and value.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateEntry {
    pub sid: Sid,
    pub logprob: f64,
    pub reward: Option<f64>,
    pub value: Option<f64>,
    /// Per-step `log pi_old(y_l | ...)` frozen at decode time.
    pub behavior_step_logprobs: Vec<f64>,
}

/// A decoded candidate set: unique SIDs for one query, the unit consumed by
/// GRPO, sibling-GRPO, TD harvesting and every metric.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CandidateSet {
    /// Environment context the set was decoded for.
    pub context: usize,
    /// Policy context (profile) used for every probability lookup.
    pub policy_context: usize,
    pub entries: Vec<CandidateEntry>,
    /// Set when a sampler could not fill the requested count within its retry
    /// budget.
    pub underfilled: bool,
}

impl CandidateSet {
    pub fn sids(&self) -> Vec<Sid> {
        self.entries.iter().map(|e| e.sid.clone()).collect()
    }

    pub fn rewards(&self) -> Option<Vec<f64>> {
        self.entries.iter().map(|e| e.reward).collect()
    }
}

/// Width-B beam-search output plus its forward-token cost.
#[derive(Debug, Clone)]
pub struct BeamResult {
    pub candidates: CandidateSet,
    /// Distinct sub-terminal prefixes whose distribution was computed.
    pub cost: usize,
}

/// Standard width-B likelihood-driven beam search. Ties at equal cumulative
/// log-prob break toward the lexicographically smaller prefix.
pub fn beam_search(
    policy: &PolicyTable,
    context: usize,
    width: usize,
    mask: &ValidityMask,
) -> Result<BeamResult> {
    let vocab_size = policy.vocab().size();
    let sid_len = policy.sid_len();
    let leaf_count = (vocab_size as u64).saturating_pow(sid_len as u32);
    if width == 0 || width as u64 > leaf_count {
        return Err(VstarError::InvalidArgument(format!(
            "beam width {width} outside 1..={leaf_count}"
        )));
    }

    // (prefix, cumulative logprob, per-step logs)
    let mut beams: Vec<(Prefix, f64, Vec<f64>)> = vec![(Prefix::root(), 0.0, Vec::new())];
    let mut cost = 0usize;
    for _depth in 0..sid_len {
        let mut expanded: Vec<(Prefix, f64, Vec<f64>)> = Vec::new();
        for (prefix, logprob, steps) in &beams {
            let dist = policy.next_dist_masked(context, prefix, mask)?;
            cost += 1;
            for (token, &p) in dist.iter().enumerate() {
                if p <= 0.0 {
                    continue;
                }
                let mut steps = steps.clone();
                steps.push(p.ln());
                expanded.push((prefix.child(token as Token), logprob + p.ln(), steps));
            }
        }
        expanded.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        expanded.truncate(width);
        beams = expanded;
    }

    let entries = beams
        .into_iter()
        .map(|(prefix, logprob, steps)| CandidateEntry {
            sid: prefix.to_sid(),
            logprob,
            reward: None,
            value: None,
            behavior_step_logprobs: steps,
        })
        .collect();
    Ok(BeamResult {
        candidates: CandidateSet {
            context,
            policy_context: context,
            entries,
            underfilled: false,
        },
        cost,
    })
}

/// Attempt multiplier before a top-K sampler gives up on filling `count`
/// distinct SIDs.
const TOPK_RETRY_FACTOR: usize = 20;

/// Draws `count` distinct SIDs by per-step renormalized top-K sampling.
/// Duplicates are resampled up to `20 * count` attempts; the set is returned
/// possibly short with `underfilled` set.
pub fn topk_sample(
    policy: &PolicyTable,
    context: usize,
    k: usize,
    count: usize,
    mask: &ValidityMask,
    seed: u64,
) -> Result<CandidateSet> {
    let vocab_size = policy.vocab().size();
    if k == 0 || k > vocab_size {
        return Err(VstarError::InvalidArgument(format!(
            "top-K parameter {k} outside 1..={vocab_size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Sid> = HashSet::new();
    let mut entries: Vec<CandidateEntry> = Vec::new();
    let max_attempts = TOPK_RETRY_FACTOR * count;
    let mut attempts = 0;
    while entries.len() < count && attempts < max_attempts {
        attempts += 1;
        let mut prefix = Prefix::root();
        let mut steps = Vec::with_capacity(policy.sid_len());
        for _depth in 0..policy.sid_len() {
            let dist = policy.next_dist_masked(context, &prefix, mask)?;
            let token = sample_topk_token(&dist, k, &mut rng);
            steps.push(dist[token as usize].ln());
            prefix = prefix.child(token);
        }
        let sid = prefix.to_sid();
        if seen.insert(sid.clone()) {
            entries.push(CandidateEntry {
                logprob: steps.iter().sum(),
                sid,
                reward: None,
                value: None,
                behavior_step_logprobs: steps,
            });
        }
    }
    let underfilled = entries.len() < count;
    entries.sort_by(|a, b| b.logprob.total_cmp(&a.logprob).then_with(|| a.sid.cmp(&b.sid)));
    Ok(CandidateSet {
        context,
        policy_context: context,
        entries,
        underfilled,
    })
}

/// Samples one token from the renormalized top-K slice of `dist`. Ordering
/// ties break toward the smaller token id.
fn sample_topk_token(dist: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Token {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
    order.truncate(k);
    let total: f64 = order.iter().map(|&i| dist[i]).sum();
    let draw: f64 = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for &i in &order {
        acc += dist[i];
        if draw < acc {
            return i as Token;
        }
    }
    // Fall through on rounding at the upper edge: last positive-mass token.
    *order
        .iter()
        .rev()
        .find(|&&i| dist[i] > 0.0)
        .expect("top-K slice carries positive mass") as Token
}
