//! Value-guided structured sampling and optimization over semantic-ID prefix trees.
//!
//! The crate builds a desk-scale generative-recommendation engine around an
//! exactly computable tabular autoregressive policy:
//!
//! - [`sid`]: token vocabulary, fixed-length semantic IDs, prefixes, and the
//!   sparse prefix trie shared by every other module.
//! - [`policy`]: the tabular policy with exact log-probs, entropies and
//!   gradients, plus the beam-search and top-K baseline decoders.
//! - [`env`]: a synthetic recommendation environment with hierarchical item
//!   embeddings and a misalignment generator that plants high-reward items
//!   behind low-probability prefixes.
//! - [`value`]: prefix value estimation trained by TD(0) on semantic-aware
//!   dense step rewards.
//! - [`ved`]: value-guided efficient decoding — budgeted UCB tree search with
//!   depth-gated expansion over the SID prefix tree.
//! - [`rl`]: GRPO and sibling-relative advantage computation, the policy
//!   objectives, and the joint update step.
//! - [`train`]: the closed decode → reward → value-fit → policy-update loop.
//! - [`eval`]: HR@K, NDCG@K, LCP diversity, Spearman correlation and the
//!   probability/value-vs-reward alignment study.

pub mod commands;
pub mod config;
pub mod env;
pub mod error;
pub mod eval;
pub mod policy;
pub mod rl;
pub mod seeding;
pub mod sid;
pub mod train;
pub mod value;
pub mod ved;

pub use error::VstarError;
pub use sid::{Prefix, PrefixTrie, Sid, Token, Vocab};

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, VstarError>;
