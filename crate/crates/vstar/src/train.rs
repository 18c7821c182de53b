//! The closed decode-score-fit-update loop, plus checkpoint evaluation.
//!
//! Each iteration freezes the policy as the behavior snapshot, decodes a
//! batch of contexts with the configured decoder, scores terminal rewards,
//! harvests dense TD transitions for the value table, and takes one policy
//! ascent step under the configured objective. Held-out evaluation always
//! uses plain beam search, mirroring deployment.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::Environment;
use crate::error::VstarError;
use crate::eval::{hr_at_k, lcp_diversity, max_reward, ndcg_at_k};
use crate::policy::{beam_search, topk_sample, CandidateSet, PolicyTable, ValidityMask};
use crate::rl::{
    compression_diagnostics, grad_norm, joint_update, kl_to_reference, sib_objective,
    LogitGrad, RlConfig, UpdateStats,
};
use crate::seeding::substream_seed;
use crate::sid::{Prefix, Sid};
use crate::value::{step_reward_lenient, StepRewardParams, TdTransition, ValueTable};
use crate::ved::{ved_decode, VedConfig};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Beam,
    Topk,
    Ved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    Grpo,
    Sibling,
    Joint,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopConfig {
    pub iterations: usize,
    /// Training contexts decoded per iteration.
    pub batch_contexts: usize,
    pub decoder: DecoderKind,
    pub objective: ObjectiveKind,
    pub ved: VedConfig,
    pub rl: RlConfig,
    pub step_rewards: StepRewardParams,
    /// Discount for the TD value fit.
    pub value_gamma: f64,
    pub value_lr: f64,
    pub td_sweeps: usize,
    /// Width for the beam decoder baseline.
    pub beam_width: usize,
    /// k for the top-k sampling baseline.
    pub topk: usize,
    pub eval_ks: Vec<usize>,
    /// Fraction of contexts withheld from training for evaluation.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for LoopConfig {
    fn default() -> Self {
        LoopConfig {
            iterations: 30,
            batch_contexts: 32,
            decoder: DecoderKind::Ved,
            objective: ObjectiveKind::Joint,
            ved: VedConfig::default(),
            // The RlConfig step size default is conservative; batch-averaged
            // tabular logits need a much larger step to move within a
            // 30-iteration run.
            rl: RlConfig {
                learning_rate: 8.0,
                ..RlConfig::default()
            },
            step_rewards: StepRewardParams::default(),
            value_gamma: 0.99,
            value_lr: 0.2,
            td_sweeps: 50,
            beam_width: 16,
            topk: 16,
            eval_ks: vec![1, 5, 10],
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

impl LoopConfig {
    pub fn validate(&self, sid_len: usize) -> Result<()> {
        self.ved.validate()?;
        self.rl.validate()?;
        self.step_rewards.validate(sid_len)?;
        if self.batch_contexts == 0 {
            return Err(VstarError::Config("batch_contexts must be positive".into()));
        }
        if self.beam_width == 0 || self.topk == 0 {
            return Err(VstarError::Config("decoder widths must be positive".into()));
        }
        if self.eval_ks.is_empty() {
            return Err(VstarError::Config("eval_ks must be non-empty".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(VstarError::Config(format!(
                "holdout_fraction {} outside [0, 1)",
                self.holdout_fraction
            )));
        }
        if !(0.0 < self.value_gamma && self.value_gamma <= 1.0) || self.value_lr <= 0.0 {
            return Err(VstarError::Config("invalid value-fit parameters".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMetrics {
    /// (K, mean HR@K) pairs in ascending K.
    pub hr: Vec<(usize, f64)>,
    pub ndcg: Vec<(usize, f64)>,
    pub mean_max_reward: f64,
    pub mean_diversity: f64,
    pub contexts: usize,
}

impl CheckpointMetrics {
    pub fn hr_at(&self, k: usize) -> Option<f64> {
        self.hr.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ndcg.iter().find(|(kk, _)| *kk == k).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Hex digest of the behavior snapshot the iteration's ratios were
    /// computed against.
    pub snapshot_hash: String,
    pub mean_reward: f64,
    pub td_loss: f64,
    pub update: UpdateStats,
    /// Mean within-set reward range and advantage sigma over the batch.
    pub mean_reward_range: f64,
    pub mean_sigma_advantages: f64,
    pub holdout: CheckpointMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: LoopConfig,
    pub initial: CheckpointMetrics,
    pub iterations: Vec<IterationRecord>,
    pub final_metrics: CheckpointMetrics,
}

impl RunRecord {
    /// One JSON object per line: the initial checkpoint, then each iteration.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        writeln!(file, "{}", serde_json::to_string(&self.initial)?)?;
        for record in &self.iterations {
            writeln!(file, "{}", serde_json::to_string(record)?)?;
        }
        Ok(())
    }
}

pub fn snapshot_hash(policy: &PolicyTable) -> String {
    let json = serde_json::to_string(&policy.to_snapshot()).expect("snapshot serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Splits the environment's contexts into training and held-out sets. The
/// held-out tail still maps onto the same profiles, so policy improvements
/// transfer.
pub fn split_contexts(env: &Environment, holdout_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n = env.n_contexts();
    let holdout = ((n as f64 * holdout_fraction).ceil() as usize).min(n.saturating_sub(1));
    let cut = n - holdout;
    ((0..cut).collect(), (cut..n).collect())
}

/// Beam-decoded HR/NDCG plus diversity and best-in-set reward, averaged over
/// `contexts`. The beam width is the largest requested K so every metric has
/// a full list.
pub fn eval_checkpoint(
    env: &Environment,
    policy: &PolicyTable,
    contexts: &[usize],
    ks: &[usize],
) -> Result<CheckpointMetrics> {
    if contexts.is_empty() || ks.is_empty() {
        return Err(VstarError::InvalidArgument(
            "eval needs contexts and at least one K".into(),
        ));
    }
    let mask = env.validity_mask();
    let width = *ks.iter().max().unwrap();
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    let mut hr_sums = vec![0.0; ks.len()];
    let mut ndcg_sums = vec![0.0; ks.len()];
    let mut reward_sum = 0.0;
    let mut diversity_sum = 0.0;
    for &ctx in contexts {
        let profile = env.profile_of(ctx)?;
        let truth = env.truth(ctx)?;
        let result = beam_search(policy, profile, width, &mask)?;
        let list = result.candidates.sids();
        for (i, &k) in ks.iter().enumerate() {
            hr_sums[i] += hr_at_k(&list, truth, k.min(list.len()))?;
            ndcg_sums[i] += ndcg_at_k(&list, truth, k.min(list.len()))?;
        }
        reward_sum += max_reward(env, ctx, &list)?;
        if list.len() >= 2 {
            diversity_sum += lcp_diversity(&list)?;
        }
    }
    let n = contexts.len() as f64;
    Ok(CheckpointMetrics {
        hr: ks.iter().enumerate().map(|(i, &k)| (k, hr_sums[i] / n)).collect(),
        ndcg: ks.iter().enumerate().map(|(i, &k)| (k, ndcg_sums[i] / n)).collect(),
        mean_max_reward: reward_sum / n,
        mean_diversity: diversity_sum / n,
        contexts: contexts.len(),
    })
}

fn decode_batch(
    env: &Environment,
    snapshot: &PolicyTable,
    value: &ValueTable,
    mask: &ValidityMask,
    cfg: &LoopConfig,
    contexts: &[usize],
    iteration: usize,
) -> Result<Vec<CandidateSet>> {
    let mut batch = Vec::with_capacity(contexts.len());
    for &ctx in contexts {
        let profile = env.profile_of(ctx)?;
        let decode_seed = substream_seed(cfg.seed, &format!("decode-{iteration}-{ctx}"));
        let mut cands = match cfg.decoder {
            DecoderKind::Beam => beam_search(snapshot, profile, cfg.beam_width, mask)?.candidates,
            DecoderKind::Topk => topk_sample(
                snapshot,
                profile,
                cfg.topk,
                cfg.ved.output_size,
                mask,
                decode_seed,
            )?,
            DecoderKind::Ved => {
                ved_decode(snapshot, profile, value, ctx, mask, &cfg.ved, decode_seed)?.0
            }
        };
        cands.context = ctx;
        cands.policy_context = profile;
        for entry in cands.entries.iter_mut() {
            entry.reward = Some(env.terminal_reward(ctx, &entry.sid)?);
        }
        batch.push(cands);
    }
    Ok(batch)
}

/// Dense TD transitions for every candidate prefix at depths 1..=L.
fn harvest_transitions(
    env: &Environment,
    batch: &[CandidateSet],
    params: &StepRewardParams,
) -> Result<Vec<TdTransition>> {
    let l = env.sid_len();
    let mut transitions = Vec::new();
    for cands in batch {
        let truth = env.truth(cands.context)?.clone();
        for entry in &cands.entries {
            for depth in 1..=l {
                let state = entry.sid.prefix(depth);
                let (reward, _) =
                    step_reward_lenient(env, cands, params, cands.context, &state, &truth)?;
                transitions.push(TdTransition {
                    ctx: cands.context,
                    state,
                    reward,
                    next: (depth < l).then(|| entry.sid.prefix(depth + 1)),
                });
            }
        }
    }
    Ok(transitions)
}

fn policy_step(
    policy: &mut PolicyTable,
    snapshot: &PolicyTable,
    reference: &PolicyTable,
    batch: &[CandidateSet],
    mask: &ValidityMask,
    cfg: &LoopConfig,
) -> Result<UpdateStats> {
    match cfg.objective {
        ObjectiveKind::Joint => joint_update(policy, snapshot, reference, batch, mask, &cfg.rl),
        ObjectiveKind::Grpo => {
            let rl = RlConfig {
                kappa: 0.0,
                ..cfg.rl.clone()
            };
            joint_update(policy, snapshot, reference, batch, mask, &rl)
        }
        ObjectiveKind::Sibling => {
            // Sibling objective alone (full weight), keeping the KL anchor.
            let (j_sib, g_sib) = sib_objective(policy, snapshot, batch, mask, &cfg.rl)?;
            let mut total: LogitGrad = g_sib;
            let mut kl = 0.0;
            if cfg.rl.kl_coeff != 0.0 {
                let (value, g_kl) = kl_to_reference(policy, reference, batch, mask)?;
                kl = value;
                for ((ctx, prefix), delta) in g_kl {
                    let slot = total
                        .entry((ctx, prefix))
                        .or_insert_with(|| vec![0.0; delta.len()]);
                    for (s, d) in slot.iter_mut().zip(&delta) {
                        *s -= cfg.rl.kl_coeff * d;
                    }
                }
            }
            let norm = grad_norm(&total);
            let mut keys: Vec<(usize, Prefix)> = total.keys().cloned().collect();
            keys.sort();
            for key in keys {
                let delta: Vec<f64> = total[&key]
                    .iter()
                    .map(|g| cfg.rl.learning_rate * g)
                    .collect();
                policy.add_to_logits(key.0, &key.1, &delta);
            }
            Ok(UpdateStats {
                j_grpo: 0.0,
                j_sib,
                kl,
                grad_norm: norm,
            })
        }
    }
}

fn sample_batch(train: &[usize], size: usize, seed: u64, iteration: usize) -> Vec<usize> {
    let mut pool = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(seed, &format!("batch-{iteration}")));
    // Fisher–Yates, then take a prefix.
    for i in (1..pool.len()).rev() {
        let j = rand::Rng::random_range(&mut rng, 0..=i);
        pool.swap(i, j);
    }
    pool.truncate(size.min(pool.len()));
    pool.sort_unstable();
    pool
}

/// The full loop. `policy` is mutated in place; the returned record holds
/// everything needed to reproduce and report the run.
pub fn run_loop(
    env: &Environment,
    policy: &mut PolicyTable,
    value: &mut ValueTable,
    cfg: &LoopConfig,
) -> Result<RunRecord> {
    cfg.validate(env.sid_len())?;
    let mask = env.validity_mask();
    let reference = policy.clone();
    let (train, holdout) = split_contexts(env, cfg.holdout_fraction);
    if train.is_empty() || holdout.is_empty() {
        return Err(VstarError::Config(
            "environment too small for the requested holdout split".into(),
        ));
    }
    let initial = eval_checkpoint(env, policy, &holdout, &cfg.eval_ks)?;
    let mut iterations = Vec::with_capacity(cfg.iterations);
    for iteration in 0..cfg.iterations {
        let snapshot = policy.clone();
        let batch_ctxs = sample_batch(&train, cfg.batch_contexts, cfg.seed, iteration);
        let batch = decode_batch(env, &snapshot, value, &mask, cfg, &batch_ctxs, iteration)?;

        let mut reward_sum = 0.0;
        let mut reward_count = 0usize;
        let mut range_sum = 0.0;
        let mut sigma_sum = 0.0;
        for cands in &batch {
            let rewards = cands.rewards().expect("batch is scored");
            let diag = compression_diagnostics(&rewards, cfg.rl.epsilon)?;
            range_sum += diag.range;
            sigma_sum += diag.sigma_advantages;
            reward_sum += rewards.iter().sum::<f64>();
            reward_count += rewards.len();
        }

        let transitions = harvest_transitions(env, &batch, &cfg.step_rewards)?;
        let trace = value.td_fit(&transitions, cfg.td_sweeps)?;
        let td_loss = trace.last().copied().unwrap_or(0.0);

        let update = policy_step(policy, &snapshot, &reference, &batch, &mask, cfg)?;
        let holdout_metrics = eval_checkpoint(env, policy, &holdout, &cfg.eval_ks)?;
        iterations.push(IterationRecord {
            iteration,
            snapshot_hash: snapshot_hash(&snapshot),
            mean_reward: reward_sum / reward_count.max(1) as f64,
            td_loss,
            update,
            mean_reward_range: range_sum / batch.len() as f64,
            mean_sigma_advantages: sigma_sum / batch.len() as f64,
            holdout: holdout_metrics,
        });
    }
    let final_metrics = match iterations.last() {
        Some(last) => last.holdout.clone(),
        None => initial.clone(),
    };
    Ok(RunRecord {
        config: cfg.clone(),
        initial,
        iterations,
        final_metrics,
    })
}

/// Fits a value table against the frozen policy without touching it:
/// temperature-sampled pools per round, dense TD harvest, synchronous fit.
/// Used by the scaling and reachability studies, which need a trained value
/// but no policy updates.
pub fn fit_value(
    env: &Environment,
    policy: &PolicyTable,
    contexts: &[usize],
    params: &StepRewardParams,
    gamma: f64,
    lr: f64,
    rounds: usize,
    pool_size: usize,
    sweeps: usize,
    seed: u64,
) -> Result<ValueTable> {
    let mask = env.validity_mask();
    let mut value = ValueTable::new(gamma, lr)?;
    for round in 0..rounds {
        let mut batch = Vec::with_capacity(contexts.len());
        for &ctx in contexts {
            let profile = env.profile_of(ctx)?;
            let mut rng = ChaCha8Rng::seed_from_u64(substream_seed(
                seed,
                &format!("value-pool-{round}-{ctx}"),
            ));
            let pool =
                crate::eval::sample_pool(policy, profile, &mask, pool_size, 1.5, &mut rng)?;
            let mut cands = CandidateSet {
                context: ctx,
                policy_context: profile,
                entries: Vec::with_capacity(pool.len()),
                underfilled: false,
            };
            for sid in pool {
                cands.entries.push(crate::policy::CandidateEntry {
                    logprob: policy.sequence_logprob(profile, &sid)?,
                    reward: Some(env.terminal_reward(ctx, &sid)?),
                    value: None,
                    behavior_step_logprobs: vec![],
                    sid,
                });
            }
            if !cands.entries.is_empty() {
                batch.push(cands);
            }
        }
        let transitions = harvest_transitions(env, &batch, params)?;
        if !transitions.is_empty() {
            value.td_fit(&transitions, sweeps)?;
        }
    }
    Ok(value)
}

/// Widths whose distinct-prefix beam cost matches a token budget:
/// `width = floor((budget - 1) / (L - 1))` for L > 1.
pub fn beam_width_for_budget(budget: usize, sid_len: usize) -> usize {
    if sid_len <= 1 {
        budget
    } else {
        ((budget.saturating_sub(1)) / (sid_len - 1)).max(1)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HandMetrics {
    pub hr: f64,
    pub ndcg: f64,
}

/// Convenience used by tests and the report command: metrics of a fixed
/// ranked list.
pub fn metrics_of_list(list: &[Sid], truth: &Sid, k: usize) -> Result<HandMetrics> {
    Ok(HandMetrics {
        hr: hr_at_k(list, truth, k)?,
        ndcg: ndcg_at_k(list, truth, k)?,
    })
}

/// Stable key for per-run output files.
pub fn run_label(cfg: &LoopConfig) -> String {
    let decoder = match cfg.decoder {
        DecoderKind::Beam => "beam",
        DecoderKind::Topk => "topk",
        DecoderKind::Ved => "ved",
    };
    let objective = match cfg.objective {
        ObjectiveKind::Grpo => "grpo",
        ObjectiveKind::Sibling => "sibling",
        ObjectiveKind::Joint => "joint",
    };
    format!("{decoder}-{objective}-seed{}", cfg.seed)
}

/// Map from run label to its held-out HR@K trajectory, for summary tables.
pub fn hr_trajectory(record: &RunRecord, k: usize) -> Vec<f64> {
    let mut out = vec![record.initial.hr_at(k).unwrap_or(0.0)];
    out.extend(
        record
            .iterations
            .iter()
            .map(|it| it.holdout.hr_at(k).unwrap_or(0.0)),
    );
    out
}

/// Summary CSV: one row per (label, metric, K) with the final value.
pub fn write_summary_csv(records: &HashMap<String, RunRecord>, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(csv_err)?;
    writer
        .write_record(["run", "metric", "k", "value"])
        .map_err(csv_err)?;
    let mut labels: Vec<&String> = records.keys().collect();
    labels.sort();
    for label in labels {
        let record = &records[label];
        for (k, v) in &record.final_metrics.hr {
            writer
                .write_record([label.as_str(), "hr", &k.to_string(), &v.to_string()])
                .map_err(csv_err)?;
        }
        for (k, v) in &record.final_metrics.ndcg {
            writer
                .write_record([label.as_str(), "ndcg", &k.to_string(), &v.to_string()])
                .map_err(csv_err)?;
        }
        writer
            .write_record([
                label.as_str(),
                "max_reward",
                "",
                &record.final_metrics.mean_max_reward.to_string(),
            ])
            .map_err(csv_err)?;
        writer
            .write_record([
                label.as_str(),
                "diversity",
                "",
                &record.final_metrics.mean_diversity.to_string(),
            ])
            .map_err(csv_err)?;
    }
    writer.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> VstarError {
    VstarError::Internal(format!("csv: {e}"))
}
