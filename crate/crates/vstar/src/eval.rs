//! Ranking metrics, diversity measures, and the prefix-alignment study.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Environment;
use crate::error::VstarError;
use crate::policy::{CandidateEntry, CandidateSet, PolicyTable, ValidityMask};
use crate::sid::{lcp_len, Prefix, Sid, Token};
use crate::value::{prefix_bucket, ValueEstimator};
use crate::Result;

fn check_ranked_list(list: &[Sid], k: usize) -> Result<()> {
    if list.len() < k {
        return Err(VstarError::InvalidArgument(format!(
            "ranked list of length {} is shorter than K={k}",
            list.len()
        )));
    }
    Ok(())
}

/// Hit rate: 1 if the ground truth appears in the first K entries.
pub fn hr_at_k(list: &[Sid], truth: &Sid, k: usize) -> Result<f64> {
    check_ranked_list(list, k)?;
    Ok(if list[..k].contains(truth) { 1.0 } else { 0.0 })
}

/// Single-relevant-item NDCG: `1/log2(rank + 1)` when the truth sits at
/// `rank <= K` (rank 1 first), else 0. The ideal DCG is 1, so no further
/// normalization is needed.
pub fn ndcg_at_k(list: &[Sid], truth: &Sid, k: usize) -> Result<f64> {
    check_ranked_list(list, k)?;
    Ok(list[..k]
        .iter()
        .position(|s| s == truth)
        .map(|at| 1.0 / ((at + 2) as f64).log2())
        .unwrap_or(0.0))
}

/// Mean pairwise prefix dissimilarity `1 - lcp/L` over unordered pairs.
pub fn lcp_diversity(sids: &[Sid]) -> Result<f64> {
    if sids.len() < 2 {
        return Err(VstarError::InvalidArgument(
            "diversity needs at least two candidates".into(),
        ));
    }
    let l = sids[0].len() as f64;
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..sids.len() {
        for j in i + 1..sids.len() {
            total += 1.0 - lcp_len(&sids[i], &sids[j])? as f64 / l;
            pairs += 1;
        }
    }
    Ok(total / pairs as f64)
}

/// Best terminal reward over a candidate set.
pub fn max_reward(env: &Environment, ctx: usize, sids: &[Sid]) -> Result<f64> {
    if sids.is_empty() {
        return Err(VstarError::InvalidArgument("empty candidate set".into()));
    }
    let mut best = f64::NEG_INFINITY;
    for sid in sids {
        best = best.max(env.terminal_reward(ctx, sid)?);
    }
    Ok(best)
}

fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // Tied block [i..=j] shares the average of its 1-based ranks.
        let rank = (i + 1 + j + 1) as f64 / 2.0;
        for &ix in &order[i..=j] {
            ranks[ix] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average-rank tie handling. The boolean is
/// true when either input is constant, in which case rho is defined as 0.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<(f64, bool)> {
    if xs.len() != ys.len() {
        return Err(VstarError::InvalidArgument(format!(
            "spearman length mismatch: {} vs {}",
            xs.len(),
            ys.len()
        )));
    }
    if xs.len() < 2 {
        return Err(VstarError::InvalidArgument(
            "spearman needs at least two points".into(),
        ));
    }
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (x, y) in rx.iter().zip(&ry) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Ok((0.0, true));
    }
    Ok((cov / (vx * vy).sqrt(), false))
}

/// Mean terminal reward of the candidates sharing prefix `p`. Requires every
/// bucket member to carry a reward.
pub fn prefix_reward(cands: &CandidateSet, p: &Prefix) -> Result<f64> {
    let bucket = prefix_bucket(cands, p);
    if bucket.is_empty() {
        return Err(VstarError::EmptyBucket(format!("no candidates under {p}")));
    }
    let mut total = 0.0;
    for entry in &bucket {
        total += entry.reward.ok_or_else(|| {
            VstarError::InvalidArgument("prefix_reward requires scored candidates".into())
        })?;
    }
    Ok(total / bucket.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignmentConfig {
    pub pool_size: usize,
    pub temperature: f64,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        AlignmentConfig {
            pool_size: 64,
            temperature: 1.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub level: usize,
    pub rho_logprob: f64,
    pub rho_value: f64,
    /// Queries that produced at least two distinct prefixes at this level.
    pub queries_used: usize,
}

/// Samples up to `pool_size` distinct SIDs by ancestral sampling at the given
/// temperature under the validity mask.
pub fn sample_pool(
    policy: &PolicyTable,
    ctx: usize,
    mask: &ValidityMask,
    pool_size: usize,
    temperature: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Sid>> {
    let mut hot = policy.clone();
    hot.set_temperature(temperature);
    let mut pool: Vec<Sid> = Vec::new();
    let mut attempts = 0;
    while pool.len() < pool_size && attempts < 50 * pool_size {
        attempts += 1;
        let mut prefix = Prefix::root();
        for _ in 0..hot.sid_len() {
            let dist = hot.next_dist_masked(ctx, &prefix, mask)?;
            let mut draw: f64 = rng.random();
            let mut chosen = dist.len() - 1;
            for (t, &p) in dist.iter().enumerate() {
                draw -= p;
                if draw <= 0.0 {
                    chosen = t;
                    break;
                }
            }
            prefix = prefix.child(chosen as Token);
        }
        let sid = prefix.to_sid();
        if !pool.contains(&sid) {
            pool.push(sid);
        }
    }
    Ok(pool)
}

/// Prefix-alignment study: per level, how well prefix log-probability and
/// prefix value each rank-correlate with the mean downstream reward of a
/// temperature-sampled candidate pool.
pub fn alignment_study(
    policy: &PolicyTable,
    value: &dyn ValueEstimator,
    env: &Environment,
    contexts: &[usize],
    cfg: &AlignmentConfig,
    seed: u64,
) -> Result<Vec<AlignmentRow>> {
    let mask = env.validity_mask();
    let l = env.sid_len();
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); l];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for &ctx in contexts {
        let profile = env.profile_of(ctx)?;
        let pool = sample_pool(policy, profile, &mask, cfg.pool_size, cfg.temperature, &mut rng)?;
        if pool.len() < 2 {
            continue;
        }
        let mut entries = Vec::with_capacity(pool.len());
        for sid in &pool {
            entries.push(CandidateEntry {
                logprob: policy.sequence_logprob(profile, sid)?,
                reward: Some(env.terminal_reward(ctx, sid)?),
                value: None,
                behavior_step_logprobs: vec![],
                sid: sid.clone(),
            });
        }
        let cands = CandidateSet {
            context: ctx,
            policy_context: profile,
            entries,
            underfilled: false,
        };
        for level in 1..=l {
            let mut prefixes: Vec<Prefix> = pool.iter().map(|s| s.prefix(level)).collect();
            prefixes.sort();
            prefixes.dedup();
            if prefixes.len() < 2 {
                continue;
            }
            let mut logprobs = Vec::with_capacity(prefixes.len());
            let mut values = Vec::with_capacity(prefixes.len());
            let mut rewards = Vec::with_capacity(prefixes.len());
            for p in &prefixes {
                let mut lp = 0.0;
                for depth in 0..p.depth() {
                    let dist = policy.next_dist_masked(profile, &p.to_sid().prefix(depth), &mask)?;
                    lp += dist[p.tokens()[depth] as usize].ln();
                }
                logprobs.push(lp);
                values.push(value.value(ctx, p));
                rewards.push(prefix_reward(&cands, p)?);
            }
            let (rho_lp, _) = spearman(&logprobs, &rewards)?;
            let (rho_v, _) = spearman(&values, &rewards)?;
            let slot = &mut sums[level - 1];
            slot.0 += rho_lp;
            slot.1 += rho_v;
            slot.2 += 1;
        }
    }
    Ok(sums
        .into_iter()
        .enumerate()
        .map(|(i, (lp, v, n))| AlignmentRow {
            level: i + 1,
            rho_logprob: if n > 0 { lp / n as f64 } else { 0.0 },
            rho_value: if n > 0 { v / n as f64 } else { 0.0 },
            queries_used: n,
        })
        .collect())
}
