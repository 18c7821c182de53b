//! Synthetic recommendation environment.
//!
//! Contexts are grouped into a small number of profiles; the tabular policy is
//! keyed by profile, so updates learned on training contexts transfer to
//! held-out contexts of the same profile. Item embeddings are hierarchical
//! Gaussians: siblings in the SID trie are more similar than cross-branch
//! items, which is the premise behind semantic-aware dense rewards.
//!
//! The misalignment generator plants ground-truth items behind first tokens
//! ranked in the bottom quantile of the fitted policy's root distribution, so
//! likelihood-driven pruning misses them by construction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::VstarError;
use crate::policy::{PolicyTable, ValidityMask};
use crate::seeding::substream_rng;
use crate::sid::{lcp_len, Prefix, Sid, Token, Vocab};
use crate::Result;

const ENV_FILE_VERSION: u32 = 1;

/// Fraction of contexts whose ground truth is planted under a bottom-quantile
/// first token.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MisalignmentSpec {
    pub fraction: f64,
    pub quantile: f64,
    pub seed: u64,
}

impl MisalignmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) {
            return Err(VstarError::Config(format!(
                "misalignment fraction {} outside [0, 1]",
                self.fraction
            )));
        }
        if self.quantile <= 0.0 || self.quantile >= 1.0 {
            return Err(VstarError::Config(format!(
                "misalignment quantile {} outside (0, 1)",
                self.quantile
            )));
        }
        Ok(())
    }
}

/// Shape and generation knobs for a synthetic environment.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvSizes {
    pub vocab: usize,
    pub sid_len: usize,
    pub embed_dim: usize,
    pub profiles: usize,
    pub contexts: usize,
    /// Synthetic interaction-log length per profile for the ML policy fit.
    pub interactions_per_profile: usize,
    /// Sharpness of the planted popularity logits; larger means a more
    /// concentrated, rich-get-richer prior.
    pub popularity_sharpness: f64,
    /// Additive count smoothing in the ML fit.
    pub smoothing: f64,
    /// Gaussian perturbation scale per level below the first; one entry per
    /// level `2..=L`, decreasing with depth.
    pub perturbation_scales: Vec<f64>,
    /// Probability that a context's ground truth swaps its last token away
    /// from the profile primary item.
    pub truth_jitter: f64,
    /// Semantic payoff scale for non-exact matches.
    pub alpha: f64,
}

impl Default for EnvSizes {
    fn default() -> Self {
        EnvSizes {
            vocab: 16,
            sid_len: 3,
            embed_dim: 16,
            profiles: 24,
            contexts: 600,
            interactions_per_profile: 2000,
            popularity_sharpness: 1.5,
            smoothing: 0.5,
            perturbation_scales: vec![0.4, 0.15],
            truth_jitter: 0.2,
            alpha: 0.5,
        }
    }
}

impl EnvSizes {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 2 || self.vocab > 32 {
            return Err(VstarError::Config(format!(
                "vocabulary size {} outside desk-scale range 2..=32",
                self.vocab
            )));
        }
        if self.contexts == 0 || self.contexts > 10_000 {
            return Err(VstarError::Config(format!(
                "context count {} outside 1..=10000",
                self.contexts
            )));
        }
        if self.profiles == 0 || self.profiles > self.contexts {
            return Err(VstarError::Config(format!(
                "profile count {} outside 1..=contexts",
                self.profiles
            )));
        }
        if self.sid_len < 2 {
            return Err(VstarError::Config(format!(
                "SID length {} must be at least 2",
                self.sid_len
            )));
        }
        if self.perturbation_scales.len() != self.sid_len - 1 {
            return Err(VstarError::Config(format!(
                "expected {} perturbation scales, got {}",
                self.sid_len - 1,
                self.perturbation_scales.len()
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(VstarError::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// One query: a profile (shared policy context) and its ground-truth item.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextInfo {
    pub profile: usize,
    pub truth: Sid,
    pub misaligned: bool,
}

/// The generated environment: contexts, truths, unit-norm item embeddings,
/// validity mask and reward parameters. Immutable after generation.
#[derive(Debug, Clone)]
pub struct Environment {
    vocab: Vocab,
    sid_len: usize,
    embed_dim: usize,
    seed: u64,
    alpha: f64,
    quantile: f64,
    contexts: Vec<ContextInfo>,
    /// Unit-norm embedding per leaf, indexed lexicographically.
    embeddings: Vec<Vec<f64>>,
    /// None means every leaf is a valid item.
    valid_leaves: Option<Vec<bool>>,
    n_profiles: usize,
}

impl Environment {
    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn sid_len(&self) -> usize {
        self.sid_len
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn n_contexts(&self) -> usize {
        self.contexts.len()
    }

    pub fn n_profiles(&self) -> usize {
        self.n_profiles
    }

    pub fn context(&self, ctx: usize) -> Result<&ContextInfo> {
        self.contexts.get(ctx).ok_or_else(|| {
            VstarError::InvalidArgument(format!("unknown context {ctx}"))
        })
    }

    pub fn profile_of(&self, ctx: usize) -> Result<usize> {
        Ok(self.context(ctx)?.profile)
    }

    pub fn truth(&self, ctx: usize) -> Result<&Sid> {
        Ok(&self.context(ctx)?.truth)
    }

    pub fn embedding(&self, sid: &Sid) -> &[f64] {
        &self.embeddings[sid.leaf_index(self.vocab.size())]
    }

    pub fn validity_mask(&self) -> ValidityMask {
        match &self.valid_leaves {
            None => ValidityMask::all_valid(),
            Some(flags) => {
                let sids: Vec<Sid> = flags
                    .iter()
                    .enumerate()
                    .filter(|(_, &ok)| ok)
                    .map(|(i, _)| Sid::from_leaf_index(i, self.vocab.size(), self.sid_len))
                    .collect();
                ValidityMask::from_valid_sids(sids.iter())
            }
        }
    }

    /// Terminal reward: 1 on exact match, otherwise
    /// `alpha * max(0, cos(e(y), e(y*)))`.
    pub fn terminal_reward(&self, ctx: usize, y: &Sid) -> Result<f64> {
        let info = self.context(ctx)?;
        if y.len() != self.sid_len {
            return Err(VstarError::InvalidArgument(format!(
                "SID length {} != L={}",
                y.len(),
                self.sid_len
            )));
        }
        if y == &info.truth {
            return Ok(1.0);
        }
        let truth = info.truth.clone();
        let cos = cosine(self.embedding(y), self.embedding(&truth));
        Ok(self.alpha * cos.max(0.0))
    }

    /// Mean cosine similarity between leaf pairs grouped by LCP length, via
    /// seeded pair sampling. Index `k` holds the mean for `lcp == k`.
    pub fn embedding_similarity_profile(&self, pairs_per_level: usize) -> Vec<f64> {
        let v = self.vocab.size();
        let mut rng = substream_rng(self.seed, "similarity-profile");
        let mut means = Vec::with_capacity(self.sid_len + 1);
        for lcp in 0..self.sid_len {
            let mut total = 0.0;
            for _ in 0..pairs_per_level {
                let a = Sid::from_leaf_index(
                    rng.random_range(0..self.embeddings.len()),
                    v,
                    self.sid_len,
                );
                // Force divergence exactly at depth `lcp`.
                let mut tokens = a.tokens().to_vec();
                let old = tokens[lcp];
                let mut swap = rng.random_range(0..v - 1) as Token;
                if swap >= old {
                    swap += 1;
                }
                tokens[lcp] = swap;
                for t in tokens.iter_mut().skip(lcp + 1) {
                    *t = rng.random_range(0..v) as Token;
                }
                let b = Sid::new(tokens);
                debug_assert_eq!(lcp_len(&a, &b).unwrap(), lcp);
                total += cosine(self.embedding(&a), self.embedding(&b));
            }
            means.push(total / pairs_per_level as f64);
        }
        means.push(1.0); // lcp == L: identical item
        means
    }

    /// Measured fraction of contexts whose ground-truth first token ranks in
    /// the bottom quantile of the profile policy's root distribution.
    pub fn misalignment_audit(&self, policy: &PolicyTable) -> Result<f64> {
        let v = self.vocab.size();
        let k_low = bottom_count(self.quantile, v);
        let mut planted = 0usize;
        for info in &self.contexts {
            let dist = policy.next_dist(info.profile, &Prefix::root())?;
            let low = bottom_tokens(&dist, k_low);
            if low.contains(&info.truth.tokens()[0]) {
                planted += 1;
            }
        }
        Ok(planted as f64 / self.contexts.len() as f64)
    }

    pub fn to_file(&self) -> EnvFile {
        EnvFile {
            version: ENV_FILE_VERSION,
            vocab: self.vocab.size(),
            sid_len: self.sid_len,
            embed_dim: self.embed_dim,
            seed: self.seed,
            alpha: self.alpha,
            quantile: self.quantile,
            profiles: self.n_profiles,
            contexts: self.contexts.clone(),
            embeddings: self.embeddings.clone(),
            valid_leaves: self.valid_leaves.clone(),
        }
    }

    pub fn from_file(file: EnvFile) -> Result<Self> {
        if file.version != ENV_FILE_VERSION {
            return Err(VstarError::Config(format!(
                "unsupported environment file version {}",
                file.version
            )));
        }
        Ok(Environment {
            vocab: Vocab::new(file.vocab)?,
            sid_len: file.sid_len,
            embed_dim: file.embed_dim,
            seed: file.seed,
            alpha: file.alpha,
            quantile: file.quantile,
            n_profiles: file.profiles,
            contexts: file.contexts,
            embeddings: file.embeddings,
            valid_leaves: file.valid_leaves,
        })
    }
}

/// Self-describing on-disk form of an [`Environment`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnvFile {
    pub version: u32,
    pub vocab: usize,
    pub sid_len: usize,
    pub embed_dim: usize,
    pub seed: u64,
    pub alpha: f64,
    pub quantile: f64,
    pub profiles: usize,
    pub contexts: Vec<ContextInfo>,
    pub embeddings: Vec<Vec<f64>>,
    pub valid_leaves: Option<Vec<bool>>,
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn bottom_count(quantile: f64, vocab_size: usize) -> usize {
    ((quantile * vocab_size as f64).floor() as usize).max(1)
}

/// Token ids of the `k` lowest-probability entries, ties toward smaller ids.
fn bottom_tokens(dist: &[f64], k: usize) -> Vec<Token> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(a.cmp(&b)));
    order.truncate(k);
    order.into_iter().map(|i| i as Token).collect()
}

/// Generates an environment plus its initial profile policy.
///
/// The policy is fitted by maximum likelihood (with additive smoothing) to
/// interaction logs drawn from a planted popularity prior, standing in for the
/// SFT stage. Ground-truth items are then placed so that the requested
/// fraction of contexts sits under a bottom-quantile first token of the fitted
/// policy.
pub fn generate(spec: &MisalignmentSpec, sizes: &EnvSizes) -> Result<(Environment, PolicyTable)> {
    spec.validate()?;
    sizes.validate()?;
    let v = sizes.vocab;
    let l = sizes.sid_len;
    let vocab = Vocab::new(v)?;
    let n_leaves = v.pow(l as u32);

    // Hierarchical Gaussian embeddings: one base vector per level-1 branch,
    // perturbed per deeper node with decreasing scale, then normalized.
    let mut rng_emb = substream_rng(spec.seed, "embeddings");
    let mut level_vecs: Vec<Vec<f64>> = (0..v)
        .map(|_| gaussian_vec(sizes.embed_dim, 1.0, &mut rng_emb))
        .collect();
    for &scale in &sizes.perturbation_scales {
        let mut next = Vec::with_capacity(level_vecs.len() * v);
        for parent in &level_vecs {
            for _ in 0..v {
                let noise = gaussian_vec(sizes.embed_dim, scale, &mut rng_emb);
                next.push(parent.iter().zip(&noise).map(|(p, n)| p + n).collect());
            }
        }
        level_vecs = next;
    }
    debug_assert_eq!(level_vecs.len(), n_leaves);
    let embeddings: Vec<Vec<f64>> = level_vecs.into_iter().map(normalize).collect();

    // Planted popularity prior: per profile, a product of per-node softmaxed
    // Gaussian logits. The sharpness knob controls how rich-get-richer it is.
    let mut rng_pop = substream_rng(spec.seed, "popularity");
    let mut rng_logs = substream_rng(spec.seed, "interactions");
    let mut policy = PolicyTable::new(vocab, l);
    for profile in 0..sizes.profiles {
        let node_weights = sample_popularity_tree(v, l, sizes.popularity_sharpness, &mut rng_pop);
        let mut counts: std::collections::HashMap<Prefix, Vec<u64>> =
            std::collections::HashMap::new();
        for _ in 0..sizes.interactions_per_profile {
            let mut prefix = Prefix::root();
            for depth in 0..l {
                let weights = &node_weights[depth][prefix_index(&prefix, v)];
                let token = sample_weighted(weights, &mut rng_logs);
                counts
                    .entry(prefix.clone())
                    .or_insert_with(|| vec![0; v])[token as usize] += 1;
                prefix = prefix.child(token);
            }
        }
        let mut nodes: Vec<(Prefix, Vec<u64>)> = counts.into_iter().collect();
        nodes.sort_by(|a, b| a.0.cmp(&b.0));
        for (prefix, node_counts) in nodes {
            let logits: Vec<f64> = node_counts
                .iter()
                .map(|&c| (c as f64 + sizes.smoothing).ln())
                .collect();
            policy.set_logits(profile, prefix, logits)?;
        }
    }

    // Plant ground truths. Misaligned profiles put their primary item under a
    // bottom-quantile first token of the fitted policy; aligned profiles draw
    // it from the popularity region outside that quantile.
    let mut rng_truth = substream_rng(spec.seed, "truth");
    let k_low = bottom_count(spec.quantile, v);
    let n_mis_profiles = (spec.fraction * sizes.profiles as f64).round() as usize;
    let mut profile_order: Vec<usize> = (0..sizes.profiles).collect();
    shuffle(&mut profile_order, &mut rng_truth);
    let misaligned_profiles: std::collections::HashSet<usize> =
        profile_order.into_iter().take(n_mis_profiles).collect();

    let mut primaries: Vec<Sid> = Vec::with_capacity(sizes.profiles);
    for profile in 0..sizes.profiles {
        let root_dist = policy.next_dist(profile, &Prefix::root())?;
        let low = bottom_tokens(&root_dist, k_low);
        let first = if misaligned_profiles.contains(&profile) {
            low[rng_truth.random_range(0..low.len())]
        } else {
            // Retry popularity-weighted draws until outside the bottom set.
            let mut pick = None;
            for _ in 0..64 {
                let t = sample_weighted(&root_dist, &mut rng_truth);
                if !low.contains(&t) {
                    pick = Some(t);
                    break;
                }
            }
            match pick {
                Some(t) => t,
                None => {
                    return Err(VstarError::Config(format!(
                        "profile {profile}: could not place an aligned ground truth \
                         outside the bottom quantile"
                    )))
                }
            }
        };
        let mut tokens = vec![first];
        for _ in 1..l {
            tokens.push(rng_truth.random_range(0..v) as Token);
        }
        primaries.push(Sid::new(tokens));
    }

    let mut contexts = Vec::with_capacity(sizes.contexts);
    for ctx in 0..sizes.contexts {
        let profile = ctx % sizes.profiles;
        let mut truth = primaries[profile].clone();
        if rng_truth.random::<f64>() < sizes.truth_jitter {
            let mut tokens = truth.tokens().to_vec();
            let old = tokens[l - 1];
            let mut swap = rng_truth.random_range(0..v - 1) as Token;
            if swap >= old {
                swap += 1;
            }
            tokens[l - 1] = swap;
            truth = Sid::new(tokens);
        }
        contexts.push(ContextInfo {
            profile,
            truth,
            misaligned: misaligned_profiles.contains(&profile),
        });
    }

    let env = Environment {
        vocab,
        sid_len: l,
        embed_dim: sizes.embed_dim,
        seed: spec.seed,
        alpha: sizes.alpha,
        quantile: spec.quantile,
        contexts,
        embeddings,
        valid_leaves: None,
        n_profiles: sizes.profiles,
    };
    Ok((env, policy))
}

fn gaussian_vec(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * scale
        })
        .collect()
}

fn normalize(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Per-depth, per-node child popularity weights; node index is the prefix's
/// lexicographic index at its depth.
fn sample_popularity_tree(
    v: usize,
    l: usize,
    sharpness: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<Vec<f64>>> {
    let mut tree = Vec::with_capacity(l);
    for depth in 0..l {
        let n_nodes = v.pow(depth as u32);
        let mut level = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let logits: Vec<f64> = (0..v)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * sharpness
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            level.push(exps.into_iter().map(|e| e / total).collect());
        }
        tree.push(level);
    }
    tree
}

fn prefix_index(prefix: &Prefix, v: usize) -> usize {
    prefix
        .tokens()
        .iter()
        .fold(0usize, |acc, &t| acc * v + t as usize)
}

fn sample_weighted(weights: &[f64], rng: &mut ChaCha8Rng) -> Token {
    let total: f64 = weights.iter().sum();
    let draw = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if draw < acc {
            return i as Token;
        }
    }
    (weights.len() - 1) as Token
}

fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec(fraction: f64) -> (MisalignmentSpec, EnvSizes) {
        let spec = MisalignmentSpec {
            fraction,
            quantile: 0.25,
            seed: 17,
        };
        let sizes = EnvSizes {
            vocab: 8,
            embed_dim: 8,
            profiles: 12,
            contexts: 240,
            interactions_per_profile: 500,
            ..EnvSizes::default()
        };
        (spec, sizes)
    }

    #[test]
    fn exact_match_reward_is_one() {
        let (spec, sizes) = small_spec(0.5);
        let (env, _) = generate(&spec, &sizes).unwrap();
        let truth = env.truth(0).unwrap().clone();
        assert_eq!(env.terminal_reward(0, &truth).unwrap(), 1.0);
    }

    #[test]
    fn truth_is_unique_reward_maximum() {
        let (spec, sizes) = small_spec(0.5);
        let (env, _) = generate(&spec, &sizes).unwrap();
        let truth = env.truth(3).unwrap().clone();
        for sid in crate::sid::enumerate_all_sids(8, 3).unwrap() {
            let r = env.terminal_reward(3, &sid).unwrap();
            if sid == truth {
                assert_eq!(r, 1.0);
            } else {
                assert!(r < 1.0);
                assert!((0.0..=env.alpha()).contains(&r));
            }
        }
    }

    #[test]
    fn unknown_context_is_rejected() {
        let (spec, sizes) = small_spec(0.0);
        let (env, _) = generate(&spec, &sizes).unwrap();
        let sid = Sid::new(vec![0, 0, 0]);
        assert!(env.terminal_reward(9999, &sid).is_err());
    }

    #[test]
    fn misalignment_audit_matches_fraction() {
        for fraction in [0.0, 0.5, 1.0] {
            let (spec, sizes) = small_spec(fraction);
            let (env, policy) = generate(&spec, &sizes).unwrap();
            let audit = env.misalignment_audit(&policy).unwrap();
            assert!(
                (audit - fraction).abs() <= 0.05,
                "fraction {fraction}: audit {audit}"
            );
        }
    }

    #[test]
    fn full_misalignment_ranks_in_bottom_quantile() {
        let (spec, sizes) = small_spec(1.0);
        let (env, policy) = generate(&spec, &sizes).unwrap();
        let k_low = bottom_count(spec.quantile, sizes.vocab);
        for ctx in 0..env.n_contexts() {
            let info = env.context(ctx).unwrap();
            let dist = policy.next_dist(info.profile, &Prefix::root()).unwrap();
            let low = bottom_tokens(&dist, k_low);
            assert!(low.contains(&info.truth.tokens()[0]));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let (spec, sizes) = small_spec(0.5);
        let (env_a, pol_a) = generate(&spec, &sizes).unwrap();
        let (env_b, pol_b) = generate(&spec, &sizes).unwrap();
        assert_eq!(
            serde_json::to_string(&env_a.to_file()).unwrap(),
            serde_json::to_string(&env_b.to_file()).unwrap()
        );
        assert_eq!(
            serde_json::to_string(&pol_a.to_snapshot()).unwrap(),
            serde_json::to_string(&pol_b.to_snapshot()).unwrap()
        );
    }

    #[test]
    fn embeddings_are_unit_norm() {
        let (spec, sizes) = small_spec(0.5);
        let (env, _) = generate(&spec, &sizes).unwrap();
        for sid in crate::sid::enumerate_all_sids(8, 3).unwrap() {
            let norm: f64 = env.embedding(&sid).iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn similarity_profile_is_monotone() {
        let (spec, sizes) = small_spec(0.5);
        let (env, _) = generate(&spec, &sizes).unwrap();
        let profile = env.embedding_similarity_profile(2000);
        assert_eq!(profile.len(), 4);
        assert_eq!(profile[3], 1.0);
        for window in profile.windows(2) {
            assert!(
                window[0] <= window[1] + 1e-9,
                "similarity profile not monotone: {profile:?}"
            );
        }
        for &m in &profile {
            assert!((-1.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn env_file_roundtrip() {
        let (spec, sizes) = small_spec(0.5);
        let (env, _) = generate(&spec, &sizes).unwrap();
        let json = serde_json::to_string(&env.to_file()).unwrap();
        let back = Environment::from_file(serde_json::from_str(&json).unwrap()).unwrap();
        assert_eq!(json, serde_json::to_string(&back.to_file()).unwrap());
        assert_eq!(env.truth(5).unwrap(), back.truth(5).unwrap());
    }

    #[test]
    fn invalid_specs_are_config_errors() {
        let (mut spec, sizes) = small_spec(0.5);
        spec.fraction = 1.5;
        assert!(matches!(
            generate(&spec, &sizes),
            Err(VstarError::Config(_))
        ));
        let (spec, mut sizes) = small_spec(0.5);
        sizes.vocab = 64;
        assert!(matches!(
            generate(&spec, &sizes),
            Err(VstarError::Config(_))
        ));
    }
}
