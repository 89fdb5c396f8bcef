//! Factor evaluation over a market panel.
//!
//! Windowed operators look back over the trailing `l` days including the
//! current day. `Ref` and `Delta` read exactly `l` days back. Any NaN in a
//! window makes that output NaN.

use std::ops::Range;

use crate::data::Panel;
use crate::error::EvalError;
use crate::expr::ExprTree;
use crate::grid::Grid;
use crate::par::{map_indices, Exec};
use crate::vocab::{OpClass, Operator, TokenKind, Vocabulary};

/// Factor values over a contiguous range of days. Row `r` is day `start + r`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorMatrix {
    pub start: usize,
    pub values: Grid,
}

impl FactorMatrix {
    pub fn n_days(&self) -> usize {
        self.values.rows()
    }

    pub fn n_assets(&self) -> usize {
        self.values.cols()
    }

    pub fn days(&self) -> Range<usize> {
        self.start..self.start + self.n_days()
    }

    /// Values for panel day `day`.
    pub fn day(&self, day: usize) -> &[f64] {
        self.values.row(day - self.start)
    }

    pub fn nonfinite_fraction(&self) -> f64 {
        let cells = self.values.as_slice().len();
        if cells == 0 {
            0.0
        } else {
            self.values.nonfinite_count() as f64 / cells as f64
        }
    }
}

/// Outcome of [`Evaluator::evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub enum Evaluation {
    Valid(FactorMatrix),
    /// Too many non-finite values.
    Invalid {
        nonfinite_fraction: f64,
    },
}

impl Evaluation {
    pub fn valid(self) -> Option<FactorMatrix> {
        match self {
            Evaluation::Valid(m) => Some(m),
            Evaluation::Invalid { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Evaluator {
    /// Largest tolerated fraction of non-finite cells.
    pub nan_tolerance: f64,
    pub exec: Exec,
}

impl Default for Evaluator {
    fn default() -> Self {
        Evaluator {
            nan_tolerance: 0.0,
            exec: Exec::default(),
        }
    }
}

impl Evaluator {
    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn with_nan_tolerance(mut self, tolerance: f64) -> Self {
        self.nan_tolerance = tolerance;
        self
    }

    /// Days of history before the first evaluated day that `tree` reads.
    pub fn max_lookback(&self, tree: &ExprTree, vocab: &Vocabulary) -> usize {
        max_lookback(tree, vocab)
    }

    pub fn evaluate(
        &self,
        tree: &ExprTree,
        vocab: &Vocabulary,
        panel: &Panel,
        days: Range<usize>,
    ) -> Result<Evaluation, EvalError> {
        if days.start > days.end || days.end > panel.n_days() {
            return Err(EvalError::RangeOutOfPanel {
                start: days.start,
                end: days.end,
                days: panel.n_days(),
            });
        }
        let required = max_lookback(tree, vocab);
        if days.start < required {
            return Err(EvalError::InsufficientHistory {
                required,
                available: days.start,
            });
        }
        let ctx = Ctx {
            vocab,
            panel,
            exec: self.exec,
        };
        let values = ctx.eval(tree, days.start, days.end)?;
        let m = FactorMatrix {
            start: days.start,
            values,
        };
        let frac = m.nonfinite_fraction();
        if frac > self.nan_tolerance {
            Ok(Evaluation::Invalid {
                nonfinite_fraction: frac,
            })
        } else {
            Ok(Evaluation::Valid(m))
        }
    }
}

/// Lookback of an operator node itself, given its span.
fn own_lookback(op: Operator, span: usize) -> usize {
    match op {
        Operator::Ref | Operator::Delta => span,
        _ => span.saturating_sub(1),
    }
}

fn span_of(tree: &ExprTree, vocab: &Vocabulary) -> Option<usize> {
    match tree {
        ExprTree::Leaf(id) => match vocab.kind(*id) {
            TokenKind::TimeSpan(d) => Some(*d),
            _ => None,
        },
        _ => None,
    }
}

/// Days of history a tree needs; nested windows add up along each chain.
pub fn max_lookback(tree: &ExprTree, vocab: &Vocabulary) -> usize {
    match tree {
        ExprTree::Leaf(_) => 0,
        ExprTree::Node { op, children } => {
            let Some(op) = vocab.operator(*op) else {
                return 0;
            };
            let n_expr = op.expr_arity().min(children.len());
            let inner = children[..n_expr]
                .iter()
                .map(|c| max_lookback(c, vocab))
                .max()
                .unwrap_or(0);
            let own = if op.takes_span() {
                children
                    .last()
                    .and_then(|c| span_of(c, vocab))
                    .map(|s| own_lookback(op, s))
                    .unwrap_or(0)
            } else {
                0
            };
            inner + own
        }
    }
}

struct Ctx<'a> {
    vocab: &'a Vocabulary,
    panel: &'a Panel,
    exec: Exec,
}

impl Ctx<'_> {
    fn eval(&self, tree: &ExprTree, lo: usize, hi: usize) -> Result<Grid, EvalError> {
        let n = self.panel.n_assets();
        match tree {
            ExprTree::Leaf(id) => match self.vocab.kind(*id) {
                TokenKind::Feature(name) => self
                    .panel
                    .feature(name)
                    .map(|g| g.slice_rows(lo, hi))
                    .ok_or_else(|| EvalError::MissingFeature(name.clone())),
                TokenKind::Constant(c) => Ok(Grid::filled(hi - lo, n, *c)),
                _ => Err(EvalError::Malformed(format!(
                    "token {} cannot be a leaf value",
                    self.vocab.get(*id).name
                ))),
            },
            ExprTree::Node { op, children } => {
                let op = self
                    .vocab
                    .operator(*op)
                    .ok_or_else(|| EvalError::Malformed("non-operator node".into()))?;
                if children.len() != op.arity() {
                    return Err(EvalError::Malformed(format!(
                        "{} has wrong arity",
                        op.name()
                    )));
                }
                match op.class() {
                    OpClass::Unary => Ok(self.eval(&children[0], lo, hi)?.map(|x| unary(op, x))),
                    OpClass::Binary => {
                        let a = self.eval(&children[0], lo, hi)?;
                        let b = self.eval(&children[1], lo, hi)?;
                        Ok(a.zip_map(&b, |x, y| binary(op, x, y)))
                    }
                    OpClass::Rolling => {
                        let span = span_of(&children[1], self.vocab)
                            .ok_or_else(|| EvalError::Malformed("missing time span".into()))?;
                        let back = own_lookback(op, span);
                        let x = self.eval(&children[0], lo - back, hi)?;
                        Ok(self.per_asset(hi - lo, |a| rolling_column(op, span, &x.column(a))))
                    }
                    OpClass::PairRolling => {
                        let span = span_of(&children[2], self.vocab)
                            .ok_or_else(|| EvalError::Malformed("missing time span".into()))?;
                        let back = own_lookback(op, span);
                        let x = self.eval(&children[0], lo - back, hi)?;
                        let y = self.eval(&children[1], lo - back, hi)?;
                        Ok(self.per_asset(hi - lo, |a| {
                            pair_column(op, span, &x.column(a), &y.column(a))
                        }))
                    }
                }
            }
        }
    }

    fn per_asset(&self, rows: usize, f: impl Fn(usize) -> Vec<f64> + Sync + Send) -> Grid {
        let n = self.panel.n_assets();
        let cols = map_indices(self.exec, n, f);
        Grid::from_fn(rows, n, |r, a| cols[a][r])
    }
}

/// Elementwise unary operator; undefined results are NaN.
pub fn unary(op: Operator, x: f64) -> f64 {
    match op {
        Operator::Abs => x.abs(),
        Operator::Log => {
            if x > 0.0 {
                x.ln()
            } else {
                f64::NAN
            }
        }
        Operator::Sign => {
            if x.is_nan() {
                f64::NAN
            } else if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        _ => unreachable!("not a unary operator"),
    }
}

/// Elementwise binary operator; undefined results are NaN.
pub fn binary(op: Operator, x: f64, y: f64) -> f64 {
    match op {
        Operator::Add => x + y,
        Operator::Sub => x - y,
        Operator::Mul => x * y,
        Operator::Div => {
            if y == 0.0 {
                f64::NAN
            } else {
                x / y
            }
        }
        Operator::Pow => x.powf(y),
        Operator::Larger | Operator::Smaller if x.is_nan() || y.is_nan() => f64::NAN,
        Operator::Larger => x.max(y),
        Operator::Smaller => x.min(y),
        _ => unreachable!("not a binary operator"),
    }
}

/// `series` covers `back` extra leading days; output has `len - back` values.
fn rolling_column(op: Operator, span: usize, series: &[f64]) -> Vec<f64> {
    let back = own_lookback(op, span);
    let out_len = series.len() - back;
    match op {
        Operator::Ref => series[..out_len].to_vec(),
        Operator::Delta => (0..out_len).map(|r| series[r + span] - series[r]).collect(),
        _ => series.windows(span).map(|w| window_stat(op, w)).collect(),
    }
}

/// Rolling two-series statistic over one asset's column, NaN until the
/// first full window.
pub fn pair_column(op: Operator, span: usize, x: &[f64], y: &[f64]) -> Vec<f64> {
    x.windows(span)
        .zip(y.windows(span))
        .map(|(wx, wy)| {
            if wx.iter().chain(wy).any(|v| v.is_nan()) {
                return f64::NAN;
            }
            let n = span as f64;
            let mx = wx.iter().sum::<f64>() / n;
            let my = wy.iter().sum::<f64>() / n;
            let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
            for (a, b) in wx.iter().zip(wy) {
                sxy += (a - mx) * (b - my);
                sxx += (a - mx) * (a - mx);
                syy += (b - my) * (b - my);
            }
            match op {
                Operator::Cov => sxy / n,
                Operator::Corr => {
                    if sxx == 0.0 || syy == 0.0 {
                        f64::NAN
                    } else {
                        sxy / (sxx.sqrt() * syy.sqrt())
                    }
                }
                _ => unreachable!("not a paired operator"),
            }
        })
        .collect()
}

/// Statistic of one window, oldest value first.
pub fn window_stat(op: Operator, w: &[f64]) -> f64 {
    if w.iter().any(|v| v.is_nan()) {
        return f64::NAN;
    }
    let n = w.len() as f64;
    let mean = || w.iter().sum::<f64>() / n;
    let var = || {
        let m = mean();
        w.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n
    };
    match op {
        Operator::Sum => w.iter().sum(),
        Operator::Mean => mean(),
        Operator::Var => var(),
        Operator::Std => var().sqrt(),
        Operator::Max => w.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Operator::Min => w.iter().copied().fold(f64::INFINITY, f64::min),
        Operator::Med => {
            let mut s = w.to_vec();
            s.sort_by(|a, b| a.partial_cmp(b).unwrap());
            s[(s.len() - 1) / 2]
        }
        Operator::Mad => {
            let m = mean();
            w.iter().map(|v| (v - m).abs()).sum::<f64>() / n
        }
        Operator::Wma => {
            // newest value gets weight len, oldest weight 1
            let total: f64 = (1..=w.len()).map(|k| k as f64).sum();
            w.iter()
                .enumerate()
                .map(|(i, v)| (i + 1) as f64 * v)
                .sum::<f64>()
                / total
        }
        Operator::Ema => {
            let alpha = 2.0 / (n + 1.0);
            w[1..]
                .iter()
                .fold(w[0], |e, &v| alpha * v + (1.0 - alpha) * e)
        }
        _ => unreachable!("not a window statistic"),
    }
}
