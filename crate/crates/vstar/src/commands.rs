//! Command implementations behind the `vstar` binary.
//!
//! Each command takes a validated [`ExperimentConfig`], performs file I/O
//! under the resolved output directory, and returns the primary artifact
//! path. Keeping the logic here (rather than in the binary) makes every
//! command testable in-process.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::env::{generate, EnvFile, Environment};
use crate::error::VstarError;
use crate::eval::{alignment_study, hr_at_k, lcp_diversity, max_reward, ndcg_at_k, AlignmentConfig};
use crate::policy::{beam_search, PolicySnapshot, PolicyTable};
use crate::seeding::substream_seed;
use crate::train::{
    beam_width_for_budget, fit_value, run_label, run_loop, split_contexts, write_summary_csv,
    DecoderKind, LoopConfig, ObjectiveKind, RunRecord,
};
use crate::value::ValueTable;
use crate::ved::{ved_decode, PriorityRule};
use crate::Result;

/// Serialized environment plus the generated (misalignment-planted) base
/// policy, written by `gen-env` and consumed by every other command.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvBundle {
    pub version: u32,
    pub fraction: f64,
    pub quantile: f64,
    pub env: EnvFile,
    pub policy: PolicySnapshot,
}

pub fn load_bundle(path: &Path) -> Result<(Environment, PolicyTable, EnvBundle)> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        VstarError::Runtime(format!(
            "environment file {} not readable: {e}; run gen-env first",
            path.display()
        ))
    })?;
    let bundle: EnvBundle = serde_json::from_str(&text)
        .map_err(|e| VstarError::Runtime(format!("environment file corrupt: {e}")))?;
    let env = Environment::from_file(bundle.env.clone())?;
    let policy = PolicyTable::from_snapshot(&bundle.policy)?;
    Ok((env, policy, bundle))
}

fn ensure_out_dir(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = cfg.resolved_output_dir();
    std::fs::create_dir_all(&dir)
        .map_err(|e| VstarError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}

/// Generate the environment + base policy, write the bundle, and report the
/// realized misalignment audit. Returns the bundle path.
pub fn cmd_gen_env(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = ensure_out_dir(cfg)?;
    let spec = cfg.env.spec();
    let (env, policy) = generate(&spec, &cfg.env.sizes)?;
    let audit = env.misalignment_audit(&policy)?;
    let bundle = EnvBundle {
        version: 1,
        fraction: spec.fraction,
        quantile: spec.quantile,
        env: env.to_file(),
        policy: policy.to_snapshot(),
    };
    let path = dir.join(&cfg.env_file);
    std::fs::write(&path, serde_json::to_string(&bundle)?)
        .map_err(|e| VstarError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    println!(
        "gen-env: wrote {} (contexts={}, vocab={}, L={})",
        path.display(),
        env.n_contexts(),
        env.vocab().size(),
        env.sid_len()
    );
    println!(
        "misalignment audit: planted fraction {:.4} (requested {:.4})",
        audit, spec.fraction
    );
    Ok(path)
}

/// One CSV row in the shared `run,metric,k,value` schema used by every
/// command so `report` can aggregate uniformly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricRow {
    pub run: String,
    pub metric: String,
    pub k: String,
    pub value: f64,
}

fn write_rows(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| VstarError::Runtime(format!("cannot write {}: {e}", path.display())))?;
    for row in rows {
        writer
            .serialize(row)
            .map_err(|e| VstarError::Runtime(format!("csv write: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| VstarError::Runtime(format!("csv flush: {e}")))?;
    Ok(())
}

fn read_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| VstarError::Runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut rows = Vec::new();
    for record in reader.deserialize::<MetricRow>() {
        match record {
            Ok(row) => rows.push(row),
            // Skip files in other schemas rather than failing the whole report.
            Err(_) => return Ok(Vec::new()),
        }
    }
    Ok(rows)
}

fn run_one(
    env: &Environment,
    base_policy: &PolicyTable,
    loop_cfg: &LoopConfig,
) -> Result<(PolicyTable, ValueTable, RunRecord)> {
    let mut policy = base_policy.clone();
    let mut value = ValueTable::new(loop_cfg.value_gamma, loop_cfg.value_lr)?;
    let record = run_loop(env, &mut policy, &mut value, loop_cfg)?;
    Ok((policy, value, record))
}

fn alignment_rows(
    env: &Environment,
    policy: &PolicyTable,
    value: &ValueTable,
    contexts: &[usize],
    label: &str,
    seed: u64,
) -> Result<Vec<MetricRow>> {
    let align = alignment_study(
        policy,
        value,
        env,
        contexts,
        &AlignmentConfig::default(),
        substream_seed(seed, "alignment"),
    )?;
    let mut rows = Vec::new();
    for row in align {
        rows.push(MetricRow {
            run: label.to_string(),
            metric: "rho_logprob".into(),
            k: row.level.to_string(),
            value: row.rho_logprob,
        });
        rows.push(MetricRow {
            run: label.to_string(),
            metric: "rho_value".into(),
            k: row.level.to_string(),
            value: row.rho_value,
        });
    }
    Ok(rows)
}

/// Train once per seed. Writes per-run JSONL logs, policy snapshots, the
/// summary CSV, and an alignment CSV. Returns the output directory.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = ensure_out_dir(cfg)?;
    let (env, base_policy, _) = load_bundle(&cfg.env_path())?;
    let (_, holdout) = split_contexts(&env, cfg.train.holdout_fraction);
    let mut records: HashMap<String, RunRecord> = HashMap::new();
    let mut align_rows = Vec::new();
    for &seed in &cfg.seeds {
        let mut loop_cfg = cfg.train.clone();
        loop_cfg.seed = seed;
        let label = run_label(&loop_cfg);
        let (policy, value, record) = run_one(&env, &base_policy, &loop_cfg)?;
        record.write_jsonl(&dir.join(format!("run-{label}.jsonl")))?;
        std::fs::write(
            dir.join(format!("policy-{label}.json")),
            serde_json::to_string(&policy.to_snapshot())?,
        )
        .map_err(|e| VstarError::Runtime(format!("snapshot write: {e}")))?;
        align_rows.extend(alignment_rows(
            &env, &policy, &value, &holdout, &label, seed,
        )?);
        let hr10 = record.final_metrics.hr_at(10).unwrap_or(0.0);
        println!("train: {label} done, holdout HR@10 = {hr10:.4}");
        records.insert(label, record);
    }
    write_summary_csv(&records, &dir.join("summary.csv"))?;
    write_rows(&dir.join("alignment.csv"), &align_rows)?;
    println!("train: wrote {}", dir.join("summary.csv").display());
    Ok(dir)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Decoder,
    ExpansionRule,
    Objective,
}

impl FromStr for AblationAxis {
    type Err = VstarError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder" => Ok(AblationAxis::Decoder),
            "expansion-rule" => Ok(AblationAxis::ExpansionRule),
            "objective" => Ok(AblationAxis::Objective),
            other => Err(VstarError::InvalidArgument(format!(
                "unknown ablation axis '{other}' (expected decoder, expansion-rule, or objective)"
            ))),
        }
    }
}

/// One ablation axis, every variant, every seed. Emits `ablate-<axis>.csv`
/// with final held-out metrics per run.
pub fn cmd_ablate(cfg: &ExperimentConfig, axis: AblationAxis) -> Result<PathBuf> {
    let dir = ensure_out_dir(cfg)?;
    let (env, base_policy, _) = load_bundle(&cfg.env_path())?;
    let mut rows = Vec::new();
    let variants: Vec<(String, LoopConfig)> = match axis {
        AblationAxis::Decoder => [DecoderKind::Beam, DecoderKind::Topk, DecoderKind::Ved]
            .into_iter()
            .map(|d| {
                let mut lc = cfg.train.clone();
                lc.decoder = d;
                (format!("{d:?}").to_lowercase(), lc)
            })
            .collect(),
        AblationAxis::Objective => [ObjectiveKind::Grpo, ObjectiveKind::Sibling, ObjectiveKind::Joint]
            .into_iter()
            .map(|o| {
                let mut lc = cfg.train.clone();
                lc.decoder = DecoderKind::Ved;
                lc.objective = o;
                (format!("{o:?}").to_lowercase(), lc)
            })
            .collect(),
        AblationAxis::ExpansionRule => {
            [PriorityRule::Value, PriorityRule::Entropy, PriorityRule::Joint]
                .into_iter()
                .map(|r| {
                    let mut lc = cfg.train.clone();
                    lc.decoder = DecoderKind::Ved;
                    lc.ved.priority_rule = r;
                    (format!("rule-{r:?}").to_lowercase(), lc)
                })
                .collect()
        }
    };
    for (name, template) in &variants {
        for &seed in &cfg.seeds {
            let mut loop_cfg = template.clone();
            loop_cfg.seed = seed;
            let (_, _, record) = run_one(&env, &base_policy, &loop_cfg)?;
            let label = format!("{name}-seed{seed}");
            for (k, v) in &record.final_metrics.hr {
                rows.push(MetricRow {
                    run: label.clone(),
                    metric: "hr".into(),
                    k: k.to_string(),
                    value: *v,
                });
            }
            for (k, v) in &record.final_metrics.ndcg {
                rows.push(MetricRow {
                    run: label.clone(),
                    metric: "ndcg".into(),
                    k: k.to_string(),
                    value: *v,
                });
            }
            rows.push(MetricRow {
                run: label.clone(),
                metric: "diversity".into(),
                k: "-".into(),
                value: record.final_metrics.mean_diversity,
            });
            rows.push(MetricRow {
                run: label.clone(),
                metric: "max_reward".into(),
                k: "-".into(),
                value: record.final_metrics.mean_max_reward,
            });
            println!("ablate: {label} done");
        }
    }
    let axis_name = match axis {
        AblationAxis::Decoder => "decoder",
        AblationAxis::ExpansionRule => "expansion-rule",
        AblationAxis::Objective => "objective",
    };
    let path = dir.join(format!("ablate-{axis_name}.csv"));
    write_rows(&path, &rows)?;
    println!("ablate: wrote {}", path.display());
    Ok(path)
}

/// Budgets for the scaling study: {1+2B, 1+4B, 1+6B, 1+8B}.
pub fn scale_budgets(beam_width: usize) -> [usize; 4] {
    [
        1 + 2 * beam_width,
        1 + 4 * beam_width,
        1 + 6 * beam_width,
        1 + 8 * beam_width,
    ]
}

/// Matched-budget comparison of VED vs beam search at 1×..4× the beam-search
/// token budget, on held-out contexts with a TD-fit value. Emits `scale.csv`.
pub fn cmd_scale(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let dir = ensure_out_dir(cfg)?;
    let (env, base_policy, _) = load_bundle(&cfg.env_path())?;
    let mask = env.validity_mask();
    let sid_len = env.sid_len();
    // The TD value is per-context state, so it is fit on the same contexts
    // the decoders are compared on.
    let (_, holdout) = split_contexts(&env, cfg.train.holdout_fraction);
    let budgets = scale_budgets(cfg.train.beam_width);
    let init_cost = 1 + (sid_len - 1) * cfg.train.ved.init_beam_width;
    if budgets[0] < init_cost {
        return Err(VstarError::Config(format!(
            "smallest budget {} is below the VED initialization cost {init_cost}",
            budgets[0]
        )));
    }
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let value = fit_value(
            &env,
            &base_policy,
            &holdout,
            &cfg.train.step_rewards,
            cfg.train.value_gamma,
            cfg.train.value_lr,
            8,
            128,
            cfg.train.td_sweeps,
            substream_seed(seed, "scale-value"),
        )?;
        for &budget in &budgets {
            let mut ved_cfg = cfg.train.ved.clone();
            ved_cfg.budget = budget;
            let beam_width = beam_width_for_budget(budget, sid_len);
            let mut sums: BTreeMap<(&str, &str), f64> = BTreeMap::new();
            for &ctx in &holdout {
                let profile = env.profile_of(ctx)?;
                let truth = env.truth(ctx)?;
                let decode_seed = substream_seed(seed, &format!("scale-{budget}-{ctx}"));
                let (cands, stats) = ved_decode(
                    &base_policy,
                    profile,
                    &value,
                    ctx,
                    &mask,
                    &ved_cfg,
                    decode_seed,
                )?;
                debug_assert!(stats.cost <= budget);
                let ved_list = cands.sids();
                let beam_list = beam_search(&base_policy, profile, beam_width, &mask)?
                    .candidates
                    .sids();
                let k = 10.min(ved_list.len()).min(beam_list.len());
                *sums.entry(("ved", "hr")).or_default() += hr_at_k(&ved_list, truth, k)?;
                *sums.entry(("ved", "ndcg")).or_default() += ndcg_at_k(&ved_list, truth, k)?;
                *sums.entry(("beam", "hr")).or_default() += hr_at_k(&beam_list, truth, k)?;
                *sums.entry(("beam", "ndcg")).or_default() += ndcg_at_k(&beam_list, truth, k)?;
                *sums.entry(("ved", "diversity")).or_default() += lcp_diversity(&ved_list)?;
                *sums.entry(("beam", "diversity")).or_default() += lcp_diversity(&beam_list)?;
                *sums.entry(("ved", "max_reward")).or_default() +=
                    max_reward(&env, ctx, &ved_list)?;
                *sums.entry(("beam", "max_reward")).or_default() +=
                    max_reward(&env, ctx, &beam_list)?;
            }
            let n = holdout.len() as f64;
            for ((method, metric), sum) in sums {
                rows.push(MetricRow {
                    run: format!("{method}-b{budget}-seed{seed}"),
                    metric: metric.to_string(),
                    k: if metric == "hr" || metric == "ndcg" {
                        "10".into()
                    } else {
                        "-".into()
                    },
                    value: sum / n,
                });
            }
        }
        println!("scale: seed {seed} done");
    }
    let path = dir.join("scale.csv");
    write_rows(&path, &rows)?;
    println!("scale: wrote {}", path.display());
    Ok(path)
}

/// Aggregate every `run,metric,k,value` CSV under the given inputs into
/// mean ± std rows grouped by (run-without-seed, metric, k).
pub fn cmd_report(inputs: &[PathBuf], out: &Path) -> Result<PathBuf> {
    if inputs.is_empty() {
        return Err(VstarError::InvalidArgument(
            "report needs at least one run directory or CSV file".into(),
        ));
    }
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| {
                    VstarError::Runtime(format!("cannot read {}: {e}", input.display()))
                })?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "csv"))
                .collect();
            entries.sort();
            files.extend(entries);
        } else {
            files.push(input.clone());
        }
    }
    if files.is_empty() {
        return Err(VstarError::InvalidArgument(
            "no CSV files found under the given inputs".into(),
        ));
    }
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for file in &files {
        for row in read_rows(file)? {
            groups
                .entry((strip_seed(&row.run), row.metric, row.k))
                .or_default()
                .push(row.value);
        }
    }
    if groups.is_empty() {
        return Err(VstarError::InvalidArgument(
            "no aggregatable rows found (expected run,metric,k,value CSVs)".into(),
        ));
    }
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| VstarError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    let mut writer = csv::Writer::from_path(out)
        .map_err(|e| VstarError::Runtime(format!("cannot write {}: {e}", out.display())))?;
    writer
        .write_record(["group", "metric", "k", "mean", "std", "n"])
        .map_err(|e| VstarError::Runtime(format!("csv write: {e}")))?;
    for ((group, metric, k), values) in &groups {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        writer
            .write_record([
                group.as_str(),
                metric.as_str(),
                k.as_str(),
                &mean.to_string(),
                &std.to_string(),
                &values.len().to_string(),
            ])
            .map_err(|e| VstarError::Runtime(format!("csv write: {e}")))?;
    }
    writer
        .flush()
        .map_err(|e| VstarError::Runtime(format!("csv flush: {e}")))?;
    println!("report: wrote {} ({} groups)", out.display(), groups.len());
    Ok(out.to_path_buf())
}

/// Strip a trailing `-seed<digits>` suffix so per-seed rows aggregate.
fn strip_seed(label: &str) -> String {
    if let Some(pos) = label.rfind("-seed") {
        if label[pos + 5..].chars().all(|c| c.is_ascii_digit())
            && !label[pos + 5..].is_empty()
        {
            return label[..pos].to_string();
        }
    }
    label.to_string()
}
