//! Group-relative policy optimization on decoded candidate sets.
//!
//! Two advantage schemes are implemented: the flat GRPO normalization over a
//! whole candidate set, and the sibling-relative form that renormalizes child
//! mean rewards within each parent prefix at every depth. The latter exists
//! because flat normalization compresses within-parent reward differences —
//! the spread of advantages is capped by the group reward range over sigma —
//! while sibling normalization restores a full-scale learning signal inside
//! each subtree. All gradients are analytic over the tabular logits and are
//! checked against finite differences in the tests.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::VstarError;
use crate::policy::{CandidateSet, PolicyTable, ValidityMask};
use crate::sid::{Prefix, Token};
use crate::Result;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlConfig {
    /// Normalization floor in the advantage denominators.
    pub epsilon: f64,
    /// Weight on the sibling objective in the joint step.
    pub kappa: f64,
    /// Coefficient on the forward KL to the frozen reference policy.
    pub kl_coeff: f64,
    /// Tabular-logit ascent step size.
    pub learning_rate: f64,
    /// Optional PPO-style ratio clip for the flat GRPO term; off by default.
    pub clip: Option<f64>,
    /// When set, J_sib is additionally divided by the number of sibling
    /// groups; the default follows the objective equation literally.
    pub sib_normalize_groups: bool,
}

impl Default for RlConfig {
    fn default() -> Self {
        RlConfig {
            epsilon: 1e-6,
            kappa: 1.0,
            kl_coeff: 1e-3,
            learning_rate: 0.05,
            clip: None,
            sib_normalize_groups: false,
        }
    }
}

impl RlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon <= 0.0 {
            return Err(VstarError::Config("epsilon must be positive".into()));
        }
        if self.learning_rate < 0.0 || self.kappa < 0.0 || self.kl_coeff < 0.0 {
            return Err(VstarError::Config(
                "learning rate, kappa, and kl_coeff must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Group-normalized advantages `(R - mu) / (sigma + eps)` with population
/// sigma. Singleton and zero-spread groups yield all-zero advantages.
pub fn global_advantages(rewards: &[f64], epsilon: f64) -> Vec<f64> {
    if rewards.len() < 2 {
        return vec![0.0; rewards.len()];
    }
    // Zero-spread convention keyed on the exact range, which is immune to
    // the floating-point noise a tiny computed sigma would amplify by 1/eps.
    if rewards.iter().all(|r| r == &rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let (mean, std) = mean_std(rewards);
    if std == 0.0 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / (std + epsilon)).collect()
}

/// Within-group reward range `max - min`.
pub fn reward_range(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(VstarError::InvalidArgument("empty reward group".into()));
    }
    let max = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = rewards.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompressionDiagnostics {
    pub range: f64,
    pub sigma_rewards: f64,
    pub sigma_advantages: f64,
    /// Spread (max - min) of the normalized advantages.
    pub range_advantages: f64,
    /// The hard ceiling `range / epsilon` from Popoviciu's inequality.
    pub amplification_cap: f64,
    pub max_abs_advantage: f64,
    pub popoviciu_holds: bool,
    pub sigma_bound_holds: bool,
}

/// Measures a reward group against the advantage-compression bounds:
/// `|A| <= range/(sigma+eps) <= range/eps` and `sigma_A <= range/eps`.
pub fn compression_diagnostics(rewards: &[f64], epsilon: f64) -> Result<CompressionDiagnostics> {
    let range = reward_range(rewards)?;
    let (_, sigma_r) = mean_std(rewards);
    let advantages = global_advantages(rewards, epsilon);
    let (_, sigma_a) = mean_std(&advantages);
    let max_abs = advantages.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let cap = range / epsilon;
    Ok(CompressionDiagnostics {
        range,
        sigma_rewards: sigma_r,
        sigma_advantages: sigma_a,
        range_advantages: reward_range(&advantages)?,
        amplification_cap: cap,
        max_abs_advantage: max_abs,
        popoviciu_holds: sigma_a * sigma_a <= cap * cap + 1e-12,
        sigma_bound_holds: sigma_a <= cap + 1e-12,
    })
}

#[derive(Debug, Clone)]
pub struct SiblingChild {
    pub token: Token,
    /// Indices into the candidate set routed through this child.
    pub members: Vec<usize>,
    pub mean_reward: f64,
}

#[derive(Debug, Clone)]
pub struct SiblingGroup {
    /// Depth of the child token (1..=L); the parent prefix has depth - 1.
    pub depth: usize,
    pub parent: Prefix,
    /// Children sorted by token.
    pub children: Vec<SiblingChild>,
}

/// Groups the candidates by parent prefix at every depth and computes the
/// per-child mean rewards. Requires every candidate to carry a reward.
pub fn build_sibling_groups(cands: &CandidateSet) -> Result<Vec<SiblingGroup>> {
    let rewards = cands.rewards().ok_or_else(|| {
        VstarError::InvalidArgument("sibling grouping requires scored candidates".into())
    })?;
    let sid_len = cands
        .entries
        .first()
        .map(|e| e.sid.len())
        .ok_or_else(|| VstarError::InvalidArgument("empty candidate set".into()))?;
    let mut groups = Vec::new();
    for depth in 1..=sid_len {
        let mut by_parent: HashMap<Prefix, HashMap<Token, Vec<usize>>> = HashMap::new();
        for (i, entry) in cands.entries.iter().enumerate() {
            let parent = entry.sid.prefix(depth - 1);
            let token = entry.sid.tokens()[depth - 1];
            by_parent.entry(parent).or_default().entry(token).or_default().push(i);
        }
        let mut parents: Vec<Prefix> = by_parent.keys().cloned().collect();
        parents.sort();
        for parent in parents {
            let by_token = &by_parent[&parent];
            let mut tokens: Vec<Token> = by_token.keys().copied().collect();
            tokens.sort_unstable();
            let children = tokens
                .into_iter()
                .map(|token| {
                    let members = by_token[&token].clone();
                    let mean_reward =
                        members.iter().map(|&i| rewards[i]).sum::<f64>() / members.len() as f64;
                    SiblingChild {
                        token,
                        members,
                        mean_reward,
                    }
                })
                .collect();
            groups.push(SiblingGroup {
                depth,
                parent,
                children,
            });
        }
    }
    Ok(groups)
}

/// Sibling-relative node advantages, keyed by (parent prefix, child token):
/// child mean rewards normalized within each group. Single-child and
/// zero-spread groups get 0.
pub fn sibling_advantages(
    groups: &[SiblingGroup],
    epsilon: f64,
) -> HashMap<(Prefix, Token), f64> {
    let mut advantages = HashMap::new();
    for group in groups {
        let means: Vec<f64> = group.children.iter().map(|c| c.mean_reward).collect();
        let advs = global_advantages(&means, epsilon);
        for (child, adv) in group.children.iter().zip(advs) {
            advantages.insert((group.parent.clone(), child.token), adv);
        }
    }
    advantages
}

/// Token-level importance ratio `pi_theta(v | x, h) / pi_theta_old(v | x, h)`
/// under the shared validity mask.
pub fn importance_ratio(
    policy: &PolicyTable,
    snapshot: &PolicyTable,
    ctx: usize,
    parent: &Prefix,
    token: Token,
    mask: &ValidityMask,
) -> Result<f64> {
    let p_new = policy.next_dist_masked(ctx, parent, mask)?[token as usize];
    let p_old = snapshot.next_dist_masked(ctx, parent, mask)?[token as usize];
    if p_old <= 0.0 {
        return Err(VstarError::DegenerateRatio(format!(
            "behavior probability of token {token} after {parent} is zero"
        )));
    }
    Ok(p_new / p_old)
}

/// Sparse gradient over the tabular logits, keyed by (policy context, prefix).
pub type LogitGrad = HashMap<(usize, Prefix), Vec<f64>>;

fn grad_add(grad: &mut LogitGrad, ctx: usize, prefix: &Prefix, delta: &[f64], scale: f64) {
    let slot = grad
        .entry((ctx, prefix.clone()))
        .or_insert_with(|| vec![0.0; delta.len()]);
    for (s, d) in slot.iter_mut().zip(delta) {
        *s += scale * d;
    }
}

pub fn grad_norm(grad: &LogitGrad) -> f64 {
    // Summation in sorted key order so the reported norm is bit-stable
    // across runs (HashMap iteration order is not).
    let mut keys: Vec<&(usize, Prefix)> = grad.keys().collect();
    keys.sort();
    keys.iter()
        .flat_map(|k| grad[*k].iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Sibling objective over a batch:
/// `J_sib = mean_x (1/|C(x)|) sum_l sum_h sum_v A_node(h,v) * rho(v | x, h)`,
/// with its analytic gradient (`d rho / d logits = rho * d log pi / d logits`).
pub fn sib_objective(
    policy: &PolicyTable,
    snapshot: &PolicyTable,
    batch: &[CandidateSet],
    mask: &ValidityMask,
    cfg: &RlConfig,
) -> Result<(f64, LogitGrad)> {
    let mut total = 0.0;
    let mut grad = LogitGrad::new();
    for cands in batch {
        let ctx = cands.policy_context;
        let groups = build_sibling_groups(cands)?;
        let advs = sibling_advantages(&groups, cfg.epsilon);
        let mut scale = 1.0 / (cands.entries.len() as f64 * batch.len() as f64);
        if cfg.sib_normalize_groups {
            scale /= groups.len().max(1) as f64;
        }
        for group in &groups {
            for child in &group.children {
                let a = advs[&(group.parent.clone(), child.token)];
                if a == 0.0 {
                    continue;
                }
                let rho =
                    importance_ratio(policy, snapshot, ctx, &group.parent, child.token, mask)?;
                total += scale * a * rho;
                let dlogp = policy.logprob_grad(ctx, &group.parent, child.token, mask)?;
                grad_add(&mut grad, ctx, &group.parent, &dlogp, scale * a * rho);
            }
        }
    }
    Ok((total, grad))
}

/// Flat GRPO objective over a batch:
/// `mean_x (1/|C(x)|) sum_y A(x,y) * (1/L) sum_l rho_l`, per-token ratios,
/// optional PPO-style clipping (a clipped token contributes a constant and
/// no gradient).
pub fn grpo_objective(
    policy: &PolicyTable,
    snapshot: &PolicyTable,
    batch: &[CandidateSet],
    mask: &ValidityMask,
    cfg: &RlConfig,
) -> Result<(f64, LogitGrad)> {
    let mut total = 0.0;
    let mut grad = LogitGrad::new();
    for cands in batch {
        let ctx = cands.policy_context;
        let rewards = cands.rewards().ok_or_else(|| {
            VstarError::InvalidArgument("GRPO requires scored candidates".into())
        })?;
        let advantages = global_advantages(&rewards, cfg.epsilon);
        for (entry, a) in cands.entries.iter().zip(advantages) {
            if a == 0.0 {
                continue;
            }
            let sid_len = entry.sid.len();
            let scale = a / (cands.entries.len() * batch.len() * sid_len) as f64;
            for depth in 1..=sid_len {
                let parent = entry.sid.prefix(depth - 1);
                let token = entry.sid.tokens()[depth - 1];
                let rho = importance_ratio(policy, snapshot, ctx, &parent, token, mask)?;
                let clipped = match cfg.clip {
                    Some(c) => {
                        let lo = 1.0 - c;
                        let hi = 1.0 + c;
                        // Pessimistic PPO form: the clipped branch is active
                        // when it lowers the objective term.
                        (a > 0.0 && rho > hi) || (a < 0.0 && rho < lo)
                    }
                    None => false,
                };
                if clipped {
                    let c = cfg.clip.unwrap();
                    let rho_c = rho.clamp(1.0 - c, 1.0 + c);
                    total += scale * rho_c;
                } else {
                    total += scale * rho;
                    let dlogp = policy.logprob_grad(ctx, &parent, token, mask)?;
                    grad_add(&mut grad, ctx, &parent, &dlogp, scale * rho);
                }
            }
        }
    }
    Ok((total, grad))
}

/// Token-level forward KL `KL(pi_theta(.|h) || pi_ref(.|h))` averaged over
/// the distinct (context, prefix) states touched by the batch, with its
/// analytic gradient `(p_k / T) * (ln(p_k/q_k) - KL)`.
pub fn kl_to_reference(
    policy: &PolicyTable,
    reference: &PolicyTable,
    batch: &[CandidateSet],
    mask: &ValidityMask,
) -> Result<(f64, LogitGrad)> {
    let mut states: Vec<(usize, Prefix)> = Vec::new();
    for cands in batch {
        for entry in &cands.entries {
            for depth in 0..entry.sid.len() {
                let state = (cands.policy_context, entry.sid.prefix(depth));
                if !states.contains(&state) {
                    states.push(state);
                }
            }
        }
    }
    if states.is_empty() {
        return Ok((0.0, LogitGrad::new()));
    }
    let temperature = policy.temperature();
    let scale = 1.0 / states.len() as f64;
    let mut total = 0.0;
    let mut grad = LogitGrad::new();
    for (ctx, prefix) in &states {
        let p = policy.next_dist_masked(*ctx, prefix, mask)?;
        let q = reference.next_dist_masked(*ctx, prefix, mask)?;
        let kl: f64 = p
            .iter()
            .zip(&q)
            .filter(|(&pv, _)| pv > 0.0)
            .map(|(&pv, &qv)| pv * (pv / qv).ln())
            .sum();
        total += scale * kl;
        let dkl: Vec<f64> = p
            .iter()
            .zip(&q)
            .map(|(&pv, &qv)| {
                if pv > 0.0 {
                    pv / temperature * ((pv / qv).ln() - kl)
                } else {
                    0.0
                }
            })
            .collect();
        grad_add(&mut grad, *ctx, prefix, &dkl, scale);
    }
    Ok((total, grad))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateStats {
    pub j_grpo: f64,
    pub j_sib: f64,
    pub kl: f64,
    pub grad_norm: f64,
}

/// One ascent step on `J_grpo + kappa * J_sib - kl_coeff * KL(pi || pi_ref)`
/// over the logits touched by the batch.
pub fn joint_update(
    policy: &mut PolicyTable,
    snapshot: &PolicyTable,
    reference: &PolicyTable,
    batch: &[CandidateSet],
    mask: &ValidityMask,
    cfg: &RlConfig,
) -> Result<UpdateStats> {
    cfg.validate()?;
    let (j_grpo, g_grpo) = grpo_objective(policy, snapshot, batch, mask, cfg)?;
    let mut total = g_grpo;
    let mut j_sib = 0.0;
    if cfg.kappa != 0.0 {
        let (j, g) = sib_objective(policy, snapshot, batch, mask, cfg)?;
        j_sib = j;
        for ((ctx, prefix), delta) in g {
            grad_add(&mut total, ctx, &prefix, &delta, cfg.kappa);
        }
    }
    let mut kl = 0.0;
    if cfg.kl_coeff != 0.0 {
        let (value, g) = kl_to_reference(policy, reference, batch, mask)?;
        kl = value;
        for ((ctx, prefix), delta) in g {
            grad_add(&mut total, ctx, &prefix, &delta, -cfg.kl_coeff);
        }
    }
    let norm = grad_norm(&total);
    // Deterministic application order.
    let mut keys: Vec<(usize, Prefix)> = total.keys().cloned().collect();
    keys.sort();
    for key in keys {
        let delta: Vec<f64> = total[&key].iter().map(|g| cfg.learning_rate * g).collect();
        policy.add_to_logits(key.0, &key.1, &delta);
    }
    Ok(UpdateStats {
        j_grpo,
        j_sib,
        kl,
        grad_norm: norm,
    })
}
