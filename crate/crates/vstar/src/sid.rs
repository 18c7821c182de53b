//! Vocabulary, semantic IDs, prefixes, and the sparse prefix trie.
//!
//! A semantic ID (SID) is a fixed-length sequence of discrete tokens; decoding
//! traverses the complete V-ary depth-L trie whose root-to-leaf paths are SIDs.
//! Tokens are dense integers `0..V` at every level; the level-tagged rendering
//! `<a_i><b_j><c_k>` is display-only.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::VstarError;
use crate::Result;

/// A token id at one SID level.
pub type Token = u16;

/// Hard cap on `V^L` for exhaustive enumeration.
const ENUMERATION_CAP: u64 = 10_000_000;

/// Per-level token vocabulary of size `V`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    size: usize,
}

impl Vocab {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(VstarError::InvalidArgument(format!(
                "vocabulary size must be at least 2, got {size}"
            )));
        }
        Ok(Vocab { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    /// Iterator over all token ids.
    pub fn tokens(&self) -> impl Iterator<Item = Token> {
        (0..self.size as Token).collect::<Vec<_>>().into_iter()
    }
}

/// A complete semantic ID: exactly `L` tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Sid(Vec<Token>);

impl Sid {
    pub fn new(tokens: Vec<Token>) -> Self {
        Sid(tokens)
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The first `len` tokens as a prefix.
    pub fn prefix(&self, len: usize) -> Prefix {
        Prefix::new(self.0[..len].to_vec())
    }

    /// Lexicographic index of this SID among all `V^L` leaves.
    pub fn leaf_index(&self, vocab_size: usize) -> usize {
        self.0
            .iter()
            .fold(0usize, |acc, &t| acc * vocab_size + t as usize)
    }

    /// Inverse of [`Sid::leaf_index`].
    pub fn from_leaf_index(mut index: usize, vocab_size: usize, sid_len: usize) -> Self {
        let mut tokens = vec![0; sid_len];
        for slot in tokens.iter_mut().rev() {
            *slot = (index % vocab_size) as Token;
            index /= vocab_size;
        }
        Sid(tokens)
    }
}

impl fmt::Display for Sid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (level, token) in self.0.iter().enumerate() {
            let tag = (b'a' + (level % 26) as u8) as char;
            write!(f, "<{tag}_{token}>")?;
        }
        Ok(())
    }
}

/// A partial SID: between 0 and `L` leading tokens. The empty prefix is the
/// trie root.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
pub struct Prefix(Vec<Token>);

impl Prefix {
    pub fn new(tokens: Vec<Token>) -> Self {
        Prefix(tokens)
    }

    pub fn root() -> Self {
        Prefix(Vec::new())
    }

    pub fn tokens(&self) -> &[Token] {
        &self.0
    }

    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn is_root(&self) -> bool {
        self.0.is_empty()
    }

    /// The prefix extended by one token.
    pub fn child(&self, token: Token) -> Prefix {
        let mut tokens = self.0.clone();
        tokens.push(token);
        Prefix(tokens)
    }

    /// The prefix with its last token removed; `None` at the root.
    pub fn parent(&self) -> Option<Prefix> {
        if self.0.is_empty() {
            None
        } else {
            Some(Prefix(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    pub fn last(&self) -> Option<Token> {
        self.0.last().copied()
    }

    /// True if `sid` starts with this prefix.
    pub fn is_prefix_of(&self, sid: &Sid) -> bool {
        sid.tokens().starts_with(&self.0)
    }

    /// A depth-L prefix reinterpreted as a complete SID.
    pub fn to_sid(&self) -> Sid {
        Sid(self.0.clone())
    }
}

impl From<&Sid> for Prefix {
    fn from(sid: &Sid) -> Self {
        Prefix(sid.tokens().to_vec())
    }
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return write!(f, "<root>");
        }
        for (level, token) in self.0.iter().enumerate() {
            let tag = (b'a' + (level % 26) as u8) as char;
            write!(f, "<{tag}_{token}>")?;
        }
        Ok(())
    }
}

/// Sparse map from prefixes to payloads over the depth-L trie.
///
/// Storage is hash-addressed by prefix so large vocabularies at shallow depth
/// stay cheap; the dense trie is never materialized.
#[derive(Debug, Clone, Default)]
pub struct PrefixTrie<T> {
    nodes: HashMap<Prefix, T>,
}

impl<T> PrefixTrie<T> {
    pub fn new() -> Self {
        PrefixTrie {
            nodes: HashMap::new(),
        }
    }

    pub fn get(&self, prefix: &Prefix) -> Option<&T> {
        self.nodes.get(prefix)
    }

    pub fn get_mut(&mut self, prefix: &Prefix) -> Option<&mut T> {
        self.nodes.get_mut(prefix)
    }

    pub fn insert(&mut self, prefix: Prefix, payload: T) -> Option<T> {
        self.nodes.insert(prefix, payload)
    }

    pub fn contains(&self, prefix: &Prefix) -> bool {
        self.nodes.contains_key(prefix)
    }

    pub fn entry(&mut self, prefix: Prefix) -> std::collections::hash_map::Entry<'_, Prefix, T> {
        self.nodes.entry(prefix)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Prefix, &T)> {
        self.nodes.iter()
    }

    /// Entries in lexicographic prefix order (shorter prefixes first when one
    /// is a prefix of the other). Use whenever iteration order must be
    /// deterministic.
    pub fn iter_sorted(&self) -> Vec<(&Prefix, &T)> {
        let mut entries: Vec<_> = self.nodes.iter().collect();
        entries.sort_by(|a, b| a.0.cmp(b.0));
        entries
    }
}

/// Longest common prefix length of two same-length SIDs.
pub fn lcp_len(a: &Sid, b: &Sid) -> Result<usize> {
    if a.len() != b.len() {
        return Err(VstarError::InvalidArgument(format!(
            "lcp_len requires equal lengths, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.tokens()
        .iter()
        .zip(b.tokens())
        .take_while(|(x, y)| x == y)
        .count())
}

/// All `V^L` SIDs in lexicographic order. Rejects spaces above the desk-scale
/// enumeration cap.
pub fn enumerate_all_sids(vocab_size: usize, sid_len: usize) -> Result<Vec<Sid>> {
    let total = (vocab_size as u64)
        .checked_pow(sid_len as u32)
        .filter(|&n| n <= ENUMERATION_CAP)
        .ok_or_else(|| {
            VstarError::BudgetExceeded(format!(
                "{vocab_size}^{sid_len} exceeds the enumeration cap of {ENUMERATION_CAP}"
            ))
        })?;
    let mut sids = Vec::with_capacity(total as usize);
    for index in 0..total as usize {
        sids.push(Sid::from_leaf_index(index, vocab_size, sid_len));
    }
    Ok(sids)
}
