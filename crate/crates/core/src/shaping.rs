//! Reward shaping against expert demonstration formulas.
//!
//! The trajectory-level shaper scores a partial formula by the fraction of
//! demonstrations that share its exact prefix. The distance-based shapers
//! score it by the negated Euclidean distance to the nearest demonstration
//! prefix of the same length.

use std::collections::HashMap;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::ShapingError;
use crate::expr::{parse_rpn, parse_rpn_lines, TokenSequence};
use crate::vocab::{TokenId, Vocabulary};

/// Prefix trie over demonstration sequences with per-node and per-depth counts.
#[derive(Debug, Clone)]
pub struct DemoIndex {
    /// `(parent node, token) -> child node`; node 0 is the empty prefix.
    edges: HashMap<(u32, TokenId), u32>,
    /// Number of demonstrations passing through each node.
    counts: Vec<u32>,
    /// `depth_totals[t]`: demonstrations of length at least `t`.
    depth_totals: Vec<u32>,
    demos: Vec<TokenSequence>,
}

impl DemoIndex {
    /// Builds the trie. Every demonstration must parse.
    pub fn build(demos: Vec<TokenSequence>, vocab: &Vocabulary) -> Result<DemoIndex, ShapingError> {
        if demos.is_empty() {
            return Err(ShapingError::EmptyDemoSet);
        }
        for (i, d) in demos.iter().enumerate() {
            parse_rpn(d, vocab).map_err(|source| ShapingError::UnparseableDemo {
                line: i + 1,
                source,
            })?;
        }
        let mut index = DemoIndex {
            edges: HashMap::new(),
            counts: vec![demos.len() as u32],
            depth_totals: vec![demos.len() as u32],
            demos: Vec::new(),
        };
        for d in &demos {
            let mut node = 0u32;
            for (t, &tok) in d.as_slice().iter().enumerate() {
                let next_id = index.counts.len() as u32;
                let child = *index.edges.entry((node, tok)).or_insert(next_id);
                if child == next_id {
                    index.counts.push(0);
                }
                index.counts[child as usize] += 1;
                if index.depth_totals.len() <= t + 1 {
                    index.depth_totals.push(0);
                }
                index.depth_totals[t + 1] += 1;
                node = child;
            }
        }
        index.demos = demos;
        Ok(index)
    }

    /// Builds from text in the RPN demonstration format.
    pub fn from_text(text: &str, vocab: &Vocabulary) -> Result<DemoIndex, ShapingError> {
        let mut demos = Vec::new();
        for (line, parsed) in parse_rpn_lines(text, vocab) {
            let seq = parsed.map_err(|source| ShapingError::UnparseableDemo { line, source })?;
            parse_rpn(&seq, vocab)
                .map_err(|source| ShapingError::UnparseableDemo { line, source })?;
            demos.push(seq);
        }
        DemoIndex::build(demos, vocab)
    }

    pub fn demos(&self) -> &[TokenSequence] {
        &self.demos
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    /// Number of demonstrations of length at least `t`.
    pub fn depth_total(&self, t: usize) -> usize {
        self.depth_totals.get(t).copied().unwrap_or(0) as usize
    }

    /// Number of demonstrations starting with `prefix`.
    pub fn prefix_count(&self, prefix: &[TokenId]) -> usize {
        let mut node = 0u32;
        for &tok in prefix {
            match self.edges.get(&(node, tok)) {
                Some(&c) => node = c,
                None => return 0,
            }
        }
        self.counts[node as usize] as usize
    }

    /// Exact match ratio of `state`: demonstrations sharing its prefix over
    /// demonstrations at least that long. The empty prefix scores 1 and a
    /// prefix longer than every demonstration scores 0.
    pub fn potential(&self, state: &[TokenId]) -> f64 {
        let total = self.depth_total(state.len());
        if total == 0 {
            return 0.0;
        }
        self.prefix_count(state) as f64 / total as f64
    }

    pub fn cursor(&self) -> TrieCursor<'_> {
        TrieCursor {
            index: self,
            node: Some(0),
            depth: 0,
        }
    }
}

/// Walks the trie one token at a time, so each shaping step costs one lookup.
#[derive(Debug, Clone)]
pub struct TrieCursor<'a> {
    index: &'a DemoIndex,
    node: Option<u32>,
    depth: usize,
}

impl TrieCursor<'_> {
    pub fn potential(&self) -> f64 {
        let total = self.index.depth_total(self.depth);
        match self.node {
            Some(n) if total > 0 => self.index.counts[n as usize] as f64 / total as f64,
            _ => 0.0,
        }
    }

    /// Advances by one token and returns the new potential.
    pub fn advance(&mut self, tok: TokenId) -> f64 {
        self.node = self
            .node
            .and_then(|n| self.index.edges.get(&(n, tok)).copied());
        self.depth += 1;
        self.potential()
    }
}

/// Shaping term between a state and its one-token extension.
pub fn tlrs_f(index: &DemoIndex, s: &[TokenId], next: &[TokenId]) -> Result<f64, ShapingError> {
    if next.len() != s.len() + 1 || &next[..s.len()] != s {
        return Err(ShapingError::NotAnExtension);
    }
    Ok(index.potential(next) - index.potential(s))
}

/// Episode reward: the shaping term, plus the base reward on the final step.
pub fn shape(base_reward: f64, f: f64, done: bool) -> f64 {
    if done {
        f + base_reward
    } else {
        f
    }
}

/// How states are turned into vectors for the distance-based potentials.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Encoding {
    /// One coordinate per position holding the token id; padding is `vocab.len()`.
    #[default]
    TokenId,
    /// One-hot block per position; padding is the zero block.
    OneHot,
}

/// Demonstrations padded to a fixed length and encoded as dense vectors.
///
/// A demonstration cut to `t` tokens differs from its full encoding only in
/// positions `t..`, which are padding in any state of length `t` as well, so
/// one stored vector per demonstration serves every prefix length.
#[derive(Debug, Clone)]
pub struct DemoVectors {
    encoding: Encoding,
    vocab_len: usize,
    max_len: usize,
    /// Full padded encoding of each demonstration.
    full: Vec<Vec<f64>>,
    /// Token of each demonstration at each position, `None` past its end.
    tokens: Vec<Vec<Option<TokenId>>>,
}

impl DemoVectors {
    pub fn new(
        demos: &[TokenSequence],
        vocab_len: usize,
        max_len: usize,
        encoding: Encoding,
    ) -> Result<DemoVectors, ShapingError> {
        if demos.is_empty() {
            return Err(ShapingError::EmptyDemoSet);
        }
        let mut dv = DemoVectors {
            encoding,
            vocab_len,
            max_len,
            full: Vec::new(),
            tokens: Vec::new(),
        };
        for d in demos {
            dv.full.push(dv.encode_state(d.as_slice()));
            dv.tokens.push(
                (0..=max_len)
                    .map(|t| d.as_slice().get(t).copied())
                    .collect(),
            );
        }
        Ok(dv)
    }

    pub fn dimension(&self) -> usize {
        self.max_len * self.width()
    }

    /// Coordinates per position.
    fn width(&self) -> usize {
        match self.encoding {
            Encoding::TokenId => 1,
            Encoding::OneHot => self.vocab_len,
        }
    }

    fn write_token(&self, out: &mut [f64], pos: usize, tok: Option<TokenId>) {
        match self.encoding {
            Encoding::TokenId => out[pos] = tok.map_or(self.vocab_len as f64, |t| t.index() as f64),
            Encoding::OneHot => {
                if let Some(t) = tok {
                    out[pos * self.vocab_len + t.index()] = 1.0;
                }
            }
        }
    }

    fn pad_value(&self) -> f64 {
        match self.encoding {
            Encoding::TokenId => self.vocab_len as f64,
            Encoding::OneHot => 0.0,
        }
    }

    /// Encodes a state padded to the maximum length.
    pub fn encode_state(&self, state: &[TokenId]) -> Vec<f64> {
        let mut v = vec![self.pad_value(); self.dimension()];
        for (pos, &tok) in state.iter().take(self.max_len).enumerate() {
            self.write_token(&mut v, pos, Some(tok));
        }
        v
    }

    /// Encodes a state followed by one action slot.
    pub fn encode_pair(&self, state: &[TokenId], action: Option<TokenId>) -> Vec<f64> {
        let mut v = self.encode_state(state);
        let mut tail = vec![self.pad_value(); self.width()];
        self.write_token(&mut tail, 0, action);
        v.extend(tail);
        v
    }

    /// Squared distances from the encoded state `x` (of length `t`) to every
    /// demonstration cut to `t` tokens. Positions from `t` on are padding on
    /// both sides and contribute nothing.
    fn prefix_sq_distances(&self, x: &[f64], t: usize) -> impl Iterator<Item = f64> + '_ {
        let span = t * self.width();
        let x = x[..span].to_vec();
        self.full.iter().map(move |d| {
            d[..span]
                .iter()
                .zip(&x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
    }

    /// Negated distance from `state` to the nearest demonstration prefix of
    /// the same length.
    pub fn state_potential(&self, state: &[TokenId]) -> f64 {
        let t = state.len().min(self.max_len);
        let x = self.encode_state(state);
        -self
            .prefix_sq_distances(&x, t)
            .fold(f64::INFINITY, f64::min)
            .sqrt()
    }

    /// Negated distance from the `(state, action)` pair to the nearest
    /// demonstration pair at the same depth.
    pub fn pair_potential(&self, state: &[TokenId], action: TokenId) -> f64 {
        let t = state.len().min(self.max_len);
        let x = self.encode_state(state);
        let mut mine = vec![self.pad_value(); self.width()];
        self.write_token(&mut mine, 0, Some(action));
        let mut best = f64::INFINITY;
        for (k, sq) in self.prefix_sq_distances(&x, t).enumerate() {
            let mut theirs = vec![self.pad_value(); self.width()];
            self.write_token(&mut theirs, 0, self.tokens[k][t]);
            let slot: f64 = mine
                .iter()
                .zip(&theirs)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            best = best.min(sq + slot);
        }
        -best.sqrt()
    }
}

/// `gamma * phi(next) - phi(s)` with the state distance potential.
pub fn pbrs_f(vectors: &DemoVectors, s: &[TokenId], next: &[TokenId], gamma: f64) -> f64 {
    gamma * vectors.state_potential(next) - vectors.state_potential(s)
}

/// `gamma * phi(next, next_action) - phi(s, action)` with the pair potential.
pub fn dpba_f(
    vectors: &DemoVectors,
    s: &[TokenId],
    action: TokenId,
    next: &[TokenId],
    next_action: TokenId,
    gamma: f64,
) -> f64 {
    gamma * vectors.pair_potential(next, next_action) - vectors.pair_potential(s, action)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ShapingKind {
    #[default]
    None,
    Tlrs,
    Pbrs,
    Dpba,
}

impl FromStr for ShapingKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(ShapingKind::None),
            "tlrs" => Ok(ShapingKind::Tlrs),
            "pbrs" => Ok(ShapingKind::Pbrs),
            "dpba" => Ok(ShapingKind::Dpba),
            other => Err(format!("unknown shaping kind `{other}`")),
        }
    }
}

/// One shaped transition.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapedStep {
    pub base: f64,
    pub f: f64,
    pub shaped: f64,
    pub phi: f64,
    pub phi_next: f64,
}

/// Applies one shaping scheme to whole episodes.
///
/// Potentials of finished states are taken as 0, so the shaping terms of any
/// complete episode sum to `-phi(empty prefix)` and the optimal policy is
/// unchanged.
#[derive(Debug, Clone)]
pub enum Shaper {
    None,
    Tlrs(std::sync::Arc<DemoIndex>),
    Pbrs {
        vectors: std::sync::Arc<DemoVectors>,
        gamma: f64,
    },
    Dpba {
        vectors: std::sync::Arc<DemoVectors>,
        gamma: f64,
    },
}

impl Shaper {
    pub fn kind(&self) -> ShapingKind {
        match self {
            Shaper::None => ShapingKind::None,
            Shaper::Tlrs(_) => ShapingKind::Tlrs,
            Shaper::Pbrs { .. } => ShapingKind::Pbrs,
            Shaper::Dpba { .. } => ShapingKind::Dpba,
        }
    }

    /// Shapes an episode given its actions and base rewards (one per action).
    /// The last action ends the episode.
    pub fn shape_episode(&self, actions: &[TokenId], base: &[f64]) -> Vec<ShapedStep> {
        assert_eq!(actions.len(), base.len(), "one base reward per action");
        let n = actions.len();
        // phis[t]: potential of the state before action t; phis[n] = 0 (finished)
        let mut phis = vec![0.0; n + 1];
        let mut gamma = 1.0;
        match self {
            Shaper::None => {}
            Shaper::Tlrs(index) => {
                let mut cursor = index.cursor();
                phis[0] = cursor.potential();
                for t in 1..n {
                    phis[t] = cursor.advance(actions[t - 1]);
                }
            }
            Shaper::Pbrs { vectors, gamma: g } => {
                gamma = *g;
                for (t, phi) in phis.iter_mut().enumerate().take(n) {
                    *phi = vectors.state_potential(&actions[..t]);
                }
            }
            Shaper::Dpba { vectors, gamma: g } => {
                gamma = *g;
                for (t, phi) in phis.iter_mut().enumerate().take(n) {
                    *phi = vectors.pair_potential(&actions[..t], actions[t]);
                }
            }
        }
        (0..n)
            .map(|t| {
                let f = gamma * phis[t + 1] - phis[t];
                let done = t + 1 == n;
                ShapedStep {
                    base: base[t],
                    f,
                    shaped: shape(base[t], f, done),
                    phi: phis[t],
                    phi_next: phis[t + 1],
                }
            })
            .collect()
    }
}
