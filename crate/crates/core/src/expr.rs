//! RPN token sequences, expression trees and the syntactic action mask.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::ExprError;
use crate::vocab::{OpClass, TokenId, TokenKind, Vocabulary};

/// Default upper bound on sequence length, SEP included, BEG excluded: room
/// for 20 formula tokens and the closing SEP.
pub const DEFAULT_MAX_LEN: usize = 21;

/// A (possibly partial) formula in reverse Polish order. The BEG token is
/// implicit and never stored; a trailing SEP marks a complete formula.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TokenSequence(pub Vec<TokenId>);

impl TokenSequence {
    pub fn new() -> Self {
        TokenSequence(Vec::new())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn push(&mut self, id: TokenId) {
        self.0.push(id);
    }

    pub fn ends_with_sep(&self, vocab: &Vocabulary) -> bool {
        self.0.last() == Some(&vocab.sep())
    }

    /// Space-separated canonical names, without BEG.
    pub fn to_text(&self, vocab: &Vocabulary) -> String {
        let mut out = String::new();
        for (i, id) in self.0.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&vocab.get(*id).name);
        }
        out
    }
}

impl From<Vec<TokenId>> for TokenSequence {
    fn from(v: Vec<TokenId>) -> Self {
        TokenSequence(v)
    }
}

/// Parses whitespace-separated token names. A leading `BEG` is dropped; `SEP`
/// may only appear last.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<TokenSequence, ExprError> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut out = Vec::with_capacity(words.len());
    for (position, word) in words.iter().enumerate() {
        if *word == "BEG" {
            if position != 0 {
                return Err(ExprError::MisplacedIndicator { position });
            }
            continue;
        }
        let id = vocab.lookup(word).ok_or_else(|| ExprError::UnknownToken {
            word: word.to_string(),
            position,
        })?;
        if id == vocab.sep() && position + 1 != words.len() {
            return Err(ExprError::MisplacedIndicator { position });
        }
        out.push(id);
    }
    Ok(TokenSequence(out))
}

/// Reads a file in the text RPN format: one formula per line, `#` comments
/// and blank lines skipped. Returns `(line number, sequence)` pairs.
pub fn parse_rpn_lines(
    text: &str,
    vocab: &Vocabulary,
) -> Vec<(usize, Result<TokenSequence, ExprError>)> {
    text.lines()
        .enumerate()
        .filter_map(|(i, line)| {
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                None
            } else {
                Some((i + 1, tokenize(trimmed, vocab)))
            }
        })
        .collect()
}

/// Formula tree. Time-series operators carry their time span as a
/// `Leaf` in the final child slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ExprTree {
    Leaf(TokenId),
    Node {
        op: TokenId,
        children: Vec<ExprTree>,
    },
}

impl ExprTree {
    pub fn leaf(id: TokenId) -> Self {
        ExprTree::Leaf(id)
    }

    pub fn node(op: TokenId, children: Vec<ExprTree>) -> Self {
        ExprTree::Node { op, children }
    }

    pub fn token(&self) -> TokenId {
        match self {
            ExprTree::Leaf(id) => *id,
            ExprTree::Node { op, .. } => *op,
        }
    }

    pub fn children(&self) -> &[ExprTree] {
        match self {
            ExprTree::Leaf(_) => &[],
            ExprTree::Node { children, .. } => children,
        }
    }

    /// Number of tokens in the post-order sequence, SEP excluded.
    pub fn size(&self) -> usize {
        1 + self.children().iter().map(ExprTree::size).sum::<usize>()
    }

    fn post_order(&self, out: &mut Vec<TokenId>) {
        for c in self.children() {
            c.post_order(out);
        }
        out.push(self.token());
    }

    /// Function-call rendering, e.g. `Div(Sub(close, open), vwap)`.
    /// Emit-only; there is no infix parser.
    pub fn to_infix(&self, vocab: &Vocabulary) -> String {
        let mut s = String::new();
        self.write_infix(vocab, &mut s);
        s
    }

    fn write_infix(&self, vocab: &Vocabulary, out: &mut String) {
        let tok = vocab.get(self.token());
        match (&tok.kind, self) {
            (TokenKind::Constant(c), _) => {
                let _ = write!(out, "{c}");
            }
            (TokenKind::TimeSpan(d), _) => {
                let _ = write!(out, "{d}");
            }
            (_, ExprTree::Leaf(_)) => out.push_str(&tok.name),
            (_, ExprTree::Node { children, .. }) => {
                out.push_str(&tok.name);
                out.push('(');
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        out.push_str(", ");
                    }
                    c.write_infix(vocab, out);
                }
                out.push(')');
            }
        }
    }

    /// Checks structural invariants against the vocabulary.
    pub fn validate(&self, vocab: &Vocabulary) -> Result<(), ExprError> {
        self.validate_slot(vocab, false)
    }

    fn validate_slot(&self, vocab: &Vocabulary, span_slot: bool) -> Result<(), ExprError> {
        let kind = vocab.kind(self.token());
        let is_span = matches!(kind, TokenKind::TimeSpan(_));
        if is_span != span_slot {
            return Err(ExprError::TimeSpanMisuse { step: 0 });
        }
        match (kind, self) {
            (TokenKind::Operator(op), ExprTree::Node { children, .. }) => {
                if children.len() != op.arity() {
                    return Err(ExprError::ArityUnderflow { step: 0 });
                }
                for (i, c) in children.iter().enumerate() {
                    let want_span = op.takes_span() && i + 1 == children.len();
                    c.validate_slot(vocab, want_span)?;
                }
                Ok(())
            }
            (
                TokenKind::Feature(_) | TokenKind::Constant(_) | TokenKind::TimeSpan(_),
                ExprTree::Leaf(_),
            ) => Ok(()),
            _ => Err(ExprError::ArityUnderflow { step: 0 }),
        }
    }
}

/// Post-order emission followed by SEP.
pub fn to_rpn(tree: &ExprTree, vocab: &Vocabulary) -> TokenSequence {
    let mut out = Vec::with_capacity(tree.size() + 1);
    tree.post_order(&mut out);
    out.push(vocab.sep());
    TokenSequence(out)
}

/// Stack-based parse of a complete sequence. Steps are numbered from 1
/// (the implicit BEG is step 0).
pub fn parse_rpn(seq: &TokenSequence, vocab: &Vocabulary) -> Result<ExprTree, ExprError> {
    let tokens = seq.as_slice();
    match tokens.last() {
        Some(last) if *last == vocab.sep() => {}
        _ => return Err(ExprError::MissingSep),
    }
    let body = &tokens[..tokens.len() - 1];
    let mut stack: Vec<ExprTree> = Vec::with_capacity(body.len());
    for (i, &id) in body.iter().enumerate() {
        let step = i + 1;
        match vocab.kind(id) {
            TokenKind::Sep => return Err(ExprError::MisplacedIndicator { position: step }),
            TokenKind::Feature(_) | TokenKind::Constant(_) | TokenKind::TimeSpan(_) => {
                stack.push(ExprTree::Leaf(id))
            }
            TokenKind::Operator(op) => {
                let arity = op.arity();
                if stack.len() < arity {
                    return Err(ExprError::ArityUnderflow { step });
                }
                let children = stack.split_off(stack.len() - arity);
                for (slot, child) in children.iter().enumerate() {
                    let child_is_span = is_span_leaf(child, vocab);
                    let want_span = op.takes_span() && slot + 1 == arity;
                    if child_is_span != want_span {
                        return Err(ExprError::TimeSpanMisuse { step });
                    }
                }
                stack.push(ExprTree::Node { op: id, children });
            }
        }
    }
    match stack.len() {
        1 => {
            let tree = stack.pop().unwrap();
            if is_span_leaf(&tree, vocab) {
                Err(ExprError::TimeSpanMisuse {
                    step: body.len() + 1,
                })
            } else {
                Ok(tree)
            }
        }
        count => Err(ExprError::DanglingOperands { count }),
    }
}

fn is_span_leaf(tree: &ExprTree, vocab: &Vocabulary) -> bool {
    matches!(tree, ExprTree::Leaf(id) if matches!(vocab.kind(*id), TokenKind::TimeSpan(_)))
}

/// Operand-stack summary of a prefix. Time spans can only sit on top of the
/// stack (they must be consumed by the very next token), so a depth and a
/// flag describe the stack completely.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct StackState {
    pub depth: usize,
    pub span_on_top: bool,
    pub finished: bool,
}

/// Syntax rules for a vocabulary and length limit.
#[derive(Debug, Clone)]
pub struct Grammar {
    vocab: Arc<Vocabulary>,
    max_len: usize,
    /// `closing[depth][span]`: fewest tokens, SEP included, that complete
    /// a prefix in that stack state. `None` if no completion exists.
    closing: Vec<[Option<usize>; 2]>,
}

impl Grammar {
    pub fn new(vocab: Arc<Vocabulary>, max_len: usize) -> Grammar {
        let closing = closing_costs(&vocab, max_len + 2);
        Grammar {
            vocab,
            max_len,
            closing,
        }
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Applies one token to a stack state without any length check.
    pub fn transition(&self, state: StackState, id: TokenId) -> Option<StackState> {
        if state.finished {
            return None;
        }
        let StackState {
            depth, span_on_top, ..
        } = state;
        match self.vocab.kind(id) {
            TokenKind::Sep => (depth == 1 && !span_on_top).then_some(StackState {
                depth: 0,
                span_on_top: false,
                finished: true,
            }),
            TokenKind::Feature(_) | TokenKind::Constant(_) => {
                (!span_on_top).then_some(StackState {
                    depth: depth + 1,
                    ..state
                })
            }
            TokenKind::TimeSpan(_) => {
                let consumable = (self.vocab.has_class(OpClass::Rolling) && depth >= 1)
                    || (self.vocab.has_class(OpClass::PairRolling) && depth >= 2);
                (!span_on_top && consumable).then_some(StackState {
                    span_on_top: true,
                    ..state
                })
            }
            TokenKind::Operator(op) => {
                let needs_span = op.takes_span();
                if needs_span != span_on_top || depth < op.expr_arity() {
                    return None;
                }
                Some(StackState {
                    depth: depth + 1 - op.expr_arity(),
                    span_on_top: false,
                    finished: false,
                })
            }
        }
    }

    /// Stack state after a prefix, or `None` if some token was illegal.
    pub fn scan(&self, prefix: &[TokenId]) -> Option<StackState> {
        let mut state = StackState::default();
        for (len, &id) in prefix.iter().enumerate() {
            if !self.legal_after(state, len, id) {
                return None;
            }
            state = self.transition(state, id)?;
        }
        Some(state)
    }

    fn closing_cost(&self, state: StackState) -> Option<usize> {
        if state.finished {
            return Some(0);
        }
        self.closing
            .get(state.depth)
            .and_then(|c| c[usize::from(state.span_on_top)])
    }

    /// Would appending `candidate` to a prefix of length `len` in stack state
    /// `state` keep a completion within `max_len` possible?
    pub fn legal_after(&self, state: StackState, len: usize, candidate: TokenId) -> bool {
        if len >= self.max_len {
            return false;
        }
        match self.transition(state, candidate) {
            None => false,
            Some(next) => match self.closing_cost(next) {
                Some(cost) => len + 1 + cost <= self.max_len,
                None => false,
            },
        }
    }

    pub fn legal_next(&self, prefix: &TokenSequence, candidate: TokenId) -> bool {
        match self.scan(prefix.as_slice()) {
            Some(state) => self.legal_after(state, prefix.len(), candidate),
            None => false,
        }
    }

    pub fn mask_for(&self, state: StackState, len: usize) -> Vec<bool> {
        self.vocab
            .ids()
            .map(|id| self.legal_after(state, len, id))
            .collect()
    }

    pub fn mask(&self, prefix: &TokenSequence) -> Vec<bool> {
        match self.scan(prefix.as_slice()) {
            Some(state) => self.mask_for(state, prefix.len()),
            None => vec![false; self.vocab.len()],
        }
    }
}

/// Fewest tokens (SEP included) from each `(depth, span_on_top)` to a
/// finished sequence, by relaxation over the small stack-state graph.
fn closing_costs(vocab: &Vocabulary, max_depth: usize) -> Vec<[Option<usize>; 2]> {
    let has_terminal = vocab.tokens().iter().any(|t| t.is_terminal());
    let has_span = vocab
        .tokens()
        .iter()
        .any(|t| matches!(t.kind, TokenKind::TimeSpan(_)));
    let binary = vocab.has_class(OpClass::Binary);
    let rolling = vocab.has_class(OpClass::Rolling);
    let pair = vocab.has_class(OpClass::PairRolling);

    let mut cost: Vec<[Option<usize>; 2]> = vec![[None, None]; max_depth + 1];
    cost[1][0] = Some(1);
    let relax = |current: Option<usize>, via: Option<usize>| match (current, via) {
        (None, Some(v)) => Some(v + 1),
        (Some(c), Some(v)) if v + 1 < c => Some(v + 1),
        _ => current,
    };
    loop {
        let before = cost.clone();
        for d in 0..=max_depth {
            // no span on top
            let mut c = cost[d][0];
            if has_terminal && d < max_depth {
                c = relax(c, cost[d + 1][0]);
            }
            if has_span && ((rolling && d >= 1) || (pair && d >= 2)) {
                c = relax(c, cost[d][1]);
            }
            if binary && d >= 2 {
                c = relax(c, cost[d - 1][0]);
            }
            cost[d][0] = c;
            // span on top
            let mut s = cost[d][1];
            if rolling && d >= 1 {
                s = relax(s, cost[d][0]);
            }
            if pair && d >= 2 {
                s = relax(s, cost[d - 1][0]);
            }
            cost[d][1] = s;
        }
        if cost == before {
            break;
        }
    }
    cost
}

/// Samples a random well-formed tree of bounded depth.
pub fn sample_tree<R: Rng + ?Sized>(vocab: &Vocabulary, rng: &mut R, max_depth: usize) -> ExprTree {
    let terminals: Vec<TokenId> = vocab
        .tokens()
        .iter()
        .filter(|t| t.is_terminal())
        .map(|t| t.id)
        .collect();
    let spans: Vec<TokenId> = vocab
        .tokens()
        .iter()
        .filter(|t| matches!(t.kind, TokenKind::TimeSpan(_)))
        .map(|t| t.id)
        .collect();
    let ops: Vec<TokenId> = vocab
        .tokens()
        .iter()
        .filter(|t| match t.kind {
            TokenKind::Operator(op) => !op.takes_span() || !spans.is_empty(),
            _ => false,
        })
        .map(|t| t.id)
        .collect();
    sample_rec(vocab, rng, max_depth, &terminals, &spans, &ops)
}

fn sample_rec<R: Rng + ?Sized>(
    vocab: &Vocabulary,
    rng: &mut R,
    depth: usize,
    terminals: &[TokenId],
    spans: &[TokenId],
    ops: &[TokenId],
) -> ExprTree {
    if depth == 0 || ops.is_empty() || rng.gen_bool(0.3) {
        return ExprTree::Leaf(*terminals.choose(rng).expect("vocabulary has terminals"));
    }
    let op_id = *ops.choose(rng).unwrap();
    let op = vocab.operator(op_id).unwrap();
    let mut children: Vec<ExprTree> = (0..op.expr_arity())
        .map(|_| sample_rec(vocab, rng, depth - 1, terminals, spans, ops))
        .collect();
    if op.takes_span() {
        children.push(ExprTree::Leaf(*spans.choose(rng).unwrap()));
    }
    ExprTree::Node {
        op: op_id,
        children,
    }
}

/// Builds a sequence by repeatedly drawing uniformly among legal tokens
/// until SEP. Mask completeness guarantees termination.
pub fn sample_masked<R: Rng + ?Sized>(grammar: &Grammar, rng: &mut R) -> TokenSequence {
    let mut seq = TokenSequence::new();
    let mut state = StackState::default();
    let sep = grammar.vocab().sep();
    loop {
        let legal: Vec<TokenId> = grammar
            .vocab()
            .ids()
            .filter(|&id| grammar.legal_after(state, seq.len(), id))
            .collect();
        let id = *legal
            .choose(rng)
            .expect("reachable prefixes always have a legal continuation");
        state = grammar.transition(state, id).unwrap();
        seq.push(id);
        if id == sep {
            return seq;
        }
    }
}
