//! Token vocabulary.
//!
//! The vocabulary is a flat table of `<id> <name> <kind> [argument]` rows.
//! [`DEFAULT_TABLE`] holds the standard 48 tokens plus the extension
//! tokens needed by the Alpha101 fixtures. Tests build smaller tables with
//! [`Vocabulary::from_table`].

use std::collections::HashMap;
use std::fmt;

use crate::error::ExprError;

/// Index into a [`Vocabulary`].
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub struct TokenId(pub u16);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Operator {
    Abs,
    Log,
    Sign,
    Add,
    Sub,
    Mul,
    Div,
    Pow,
    Larger,
    Smaller,
    Ref,
    Mean,
    Sum,
    Std,
    Var,
    Max,
    Min,
    Med,
    Mad,
    Delta,
    Wma,
    Ema,
    Cov,
    Corr,
}

/// Coarse operator category, used by the action mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpClass {
    /// Cross-sectional, one operand.
    Unary,
    /// Cross-sectional, two operands.
    Binary,
    /// Time-series, one operand plus a trailing time span.
    Rolling,
    /// Time-series, two operands plus a trailing time span.
    PairRolling,
}

impl Operator {
    pub const ALL: [Operator; 24] = [
        Operator::Abs,
        Operator::Log,
        Operator::Sign,
        Operator::Add,
        Operator::Sub,
        Operator::Mul,
        Operator::Div,
        Operator::Pow,
        Operator::Larger,
        Operator::Smaller,
        Operator::Ref,
        Operator::Mean,
        Operator::Sum,
        Operator::Std,
        Operator::Var,
        Operator::Max,
        Operator::Min,
        Operator::Med,
        Operator::Mad,
        Operator::Delta,
        Operator::Wma,
        Operator::Ema,
        Operator::Cov,
        Operator::Corr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Operator::Abs => "Abs",
            Operator::Log => "Log",
            Operator::Sign => "Sign",
            Operator::Add => "Add",
            Operator::Sub => "Sub",
            Operator::Mul => "Mul",
            Operator::Div => "Div",
            Operator::Pow => "Pow",
            Operator::Larger => "Larger",
            Operator::Smaller => "Smaller",
            Operator::Ref => "Ref",
            Operator::Mean => "Mean",
            Operator::Sum => "Sum",
            Operator::Std => "Std",
            Operator::Var => "Var",
            Operator::Max => "Max",
            Operator::Min => "Min",
            Operator::Med => "Med",
            Operator::Mad => "Mad",
            Operator::Delta => "Delta",
            Operator::Wma => "WMA",
            Operator::Ema => "EMA",
            Operator::Cov => "Cov",
            Operator::Corr => "Corr",
        }
    }

    pub fn from_name(name: &str) -> Option<Operator> {
        Operator::ALL.iter().copied().find(|op| op.name() == name)
    }

    pub fn class(self) -> OpClass {
        use Operator::*;
        match self {
            Abs | Log | Sign => OpClass::Unary,
            Add | Sub | Mul | Div | Pow | Larger | Smaller => OpClass::Binary,
            Ref | Mean | Sum | Std | Var | Max | Min | Med | Mad | Delta | Wma | Ema => {
                OpClass::Rolling
            }
            Cov | Corr => OpClass::PairRolling,
        }
    }

    /// Number of sub-expression operands (the time span is not counted).
    pub fn expr_arity(self) -> usize {
        match self.class() {
            OpClass::Unary | OpClass::Rolling => 1,
            OpClass::Binary | OpClass::PairRolling => 2,
        }
    }

    pub fn takes_span(self) -> bool {
        matches!(self.class(), OpClass::Rolling | OpClass::PairRolling)
    }

    /// Total operand count, including the time span.
    pub fn arity(self) -> usize {
        self.expr_arity() + usize::from(self.takes_span())
    }

    pub fn is_commutative(self) -> bool {
        matches!(
            self,
            Operator::Add | Operator::Mul | Operator::Larger | Operator::Smaller
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TokenKind {
    Operator(Operator),
    /// Raw panel feature, identified by its panel column label.
    Feature(String),
    TimeSpan(usize),
    Constant(f64),
    Sep,
}

/// One vocabulary entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Token {
    pub id: TokenId,
    pub name: String,
    pub kind: TokenKind,
}

impl Token {
    pub fn arity(&self) -> usize {
        match self.kind {
            TokenKind::Operator(op) => op.arity(),
            _ => 0,
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.kind, TokenKind::Feature(_) | TokenKind::Constant(_))
    }

    /// Category label as written in the vocabulary table.
    pub fn category(&self) -> &'static str {
        match &self.kind {
            TokenKind::Operator(op) if op.takes_span() => "time-series operator",
            TokenKind::Operator(_) => "cross-sectional operator",
            TokenKind::Feature(_) => "feature",
            TokenKind::TimeSpan(_) => "time span",
            TokenKind::Constant(_) => "constant",
            TokenKind::Sep => "sequence indicator",
        }
    }
}

/// Standard token table. Rows 0-47 follow the published token overview;
/// rows 48-52 are extensions required to express the Alpha101 fixtures.
pub const DEFAULT_TABLE: &str = "\
0 Abs op
1 Log op
2 Add op
3 Sub op
4 Mul op
5 Div op
6 Larger op
7 Smaller op
8 Ref op
9 Mean op
10 Sum op
11 Std op
12 Var op
13 Max op
14 Min op
15 Med op
16 Mad op
17 Delta op
18 WMA op
19 EMA op
20 Cov op
21 Corr op
22 open feature
23 close feature
24 high feature
25 low feature
26 volume feature
27 vwap feature
28 10 span 10
29 20 span 20
30 30 span 30
31 40 span 40
32 50 span 50
33 -30.0 const -30
34 -10.0 const -10
35 -5.0 const -5
36 -2.0 const -2
37 -1.0 const -1
38 -0.5 const -0.5
39 -0.01 const -0.01
40 0.01 const 0.01
41 0.5 const 0.5
42 1.0 const 1
43 2.0 const 2
44 5.0 const 5
45 10.0 const 10
46 30.0 const 30
47 SEP sep
48 Sign op
49 Pow op
50 1 span 1
51 5 span 5
52 0.001 const 0.001
";

/// Immutable token table with name lookup.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<Token>,
    by_name: HashMap<String, TokenId>,
    sep: TokenId,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary::from_table(DEFAULT_TABLE).expect("default vocabulary table is well formed")
    }
}

impl Vocabulary {
    /// Parses a vocabulary table. Ids must be `0..n` in order, names unique,
    /// and exactly one `sep` row present. Lines starting with `#` are ignored.
    pub fn from_table(table: &str) -> Result<Vocabulary, ExprError> {
        let mut tokens = Vec::new();
        for (lineno, raw) in table.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |msg: &str| ExprError::BadTable {
                line: lineno + 1,
                message: msg.to_string(),
            };
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() < 3 {
                return Err(bad("expected `<id> <name> <kind> [arg]`"));
            }
            let id: u16 = cols[0].parse().map_err(|_| bad("id is not an integer"))?;
            if id as usize != tokens.len() {
                return Err(bad("ids must be contiguous from 0"));
            }
            let name = cols[1].to_string();
            let arg = cols.get(3).copied();
            let kind = match cols[2] {
                "op" => TokenKind::Operator(
                    Operator::from_name(&name).ok_or_else(|| bad("unknown operator"))?,
                ),
                "feature" => TokenKind::Feature(arg.unwrap_or(&name).to_string()),
                "span" => TokenKind::TimeSpan(
                    arg.unwrap_or(&name)
                        .parse()
                        .map_err(|_| bad("time span must be a positive integer"))?,
                ),
                "const" => TokenKind::Constant(
                    arg.unwrap_or(&name)
                        .parse()
                        .map_err(|_| bad("constant must be numeric"))?,
                ),
                "sep" => TokenKind::Sep,
                _ => return Err(bad("unknown kind")),
            };
            if let TokenKind::TimeSpan(0) = kind {
                return Err(bad("time span must be positive"));
            }
            tokens.push(Token {
                id: TokenId(id),
                name,
                kind,
            });
        }
        Vocabulary::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<Token>) -> Result<Vocabulary, ExprError> {
        let mut by_name = HashMap::new();
        let mut sep = None;
        for t in &tokens {
            if by_name.insert(t.name.clone(), t.id).is_some() {
                return Err(ExprError::BadTable {
                    line: t.id.index() + 1,
                    message: format!("duplicate token name `{}`", t.name),
                });
            }
            if t.kind == TokenKind::Sep {
                if sep.is_some() {
                    return Err(ExprError::BadTable {
                        line: t.id.index() + 1,
                        message: "more than one SEP token".into(),
                    });
                }
                sep = Some(t.id);
            }
        }
        let sep = sep.ok_or(ExprError::BadTable {
            line: 0,
            message: "table has no SEP token".into(),
        })?;
        Ok(Vocabulary {
            tokens,
            by_name,
            sep,
        })
    }

    /// The default table plus `extra` synthetic feature tokens named
    /// `f0`, `f1`, ... appended after the existing rows.
    pub fn with_extra_features(mut self, extra: usize) -> Vocabulary {
        let start = self.tokens.len();
        for k in 0..extra {
            let name = format!("f{k}");
            self.tokens.push(Token {
                id: TokenId((start + k) as u16),
                name: name.clone(),
                kind: TokenKind::Feature(name),
            });
        }
        Vocabulary::from_tokens(self.tokens).expect("generated feature names are unique")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn sep(&self) -> TokenId {
        self.sep
    }

    pub fn get(&self, id: TokenId) -> &Token {
        &self.tokens[id.index()]
    }

    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.tokens.iter().map(|t| t.id)
    }

    pub fn kind(&self, id: TokenId) -> &TokenKind {
        &self.tokens[id.index()].kind
    }

    pub fn operator(&self, id: TokenId) -> Option<Operator> {
        match self.tokens[id.index()].kind {
            TokenKind::Operator(op) => Some(op),
            _ => None,
        }
    }

    pub fn id_of(&self, name: &str) -> Option<TokenId> {
        self.by_name.get(name).copied()
    }

    /// Resolves an input word. Besides exact names this accepts `$close`
    /// for `close`, `10d` for the time span `10`, and any numeric spelling
    /// of a constant (`-1` for `-1.0`).
    pub fn lookup(&self, word: &str) -> Option<TokenId> {
        if let Some(id) = self.id_of(word) {
            return Some(id);
        }
        if let Some(stripped) = word.strip_prefix('$') {
            if let Some(id) = self.id_of(stripped) {
                if matches!(self.kind(id), TokenKind::Feature(_)) {
                    return Some(id);
                }
            }
        }
        if let Some(days) = word.strip_suffix('d').and_then(|d| d.parse::<usize>().ok()) {
            return self
                .tokens
                .iter()
                .find(|t| t.kind == TokenKind::TimeSpan(days))
                .map(|t| t.id);
        }
        if let Ok(value) = word.parse::<f64>() {
            return self
                .tokens
                .iter()
                .find(|t| matches!(t.kind, TokenKind::Constant(c) if c == value))
                .map(|t| t.id);
        }
        None
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.tokens
            .iter()
            .filter_map(|t| match &t.kind {
                TokenKind::Feature(f) => Some(f.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Does the table contain at least one operator of the given class?
    pub fn has_class(&self, class: OpClass) -> bool {
        self.tokens
            .iter()
            .any(|t| matches!(t.kind, TokenKind::Operator(op) if op.class() == class))
    }
}
