use alphaforge::data::{synth_panel, Panel, SynthSpec};
use alphaforge::error::EvalError;
use alphaforge::eval::{max_lookback, Evaluation, Evaluator};
use alphaforge::expr::{parse_rpn, sample_tree, tokenize, ExprTree};
use alphaforge::grid::Grid;
use alphaforge::par::Exec;
use alphaforge::vocab::{Operator, TokenKind, Vocabulary};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tree(text: &str, v: &Vocabulary) -> ExprTree {
    parse_rpn(&tokenize(text, v).unwrap(), v).unwrap()
}

fn panel(seed: u64, assets: usize, days: usize) -> Panel {
    let spec = SynthSpec {
        seed,
        n_assets: assets,
        n_days: days,
        planted: None,
        noise_std: 1.0,
    };
    synth_panel(&spec, &Vocabulary::default()).unwrap().0
}

/// Value of `tree` for one asset on every day; `None` where the formula
/// would read before the first day.
fn oracle(tree: &ExprTree, v: &Vocabulary, p: &Panel, asset: usize) -> Vec<Option<f64>> {
    let days = p.n_days();
    match tree {
        ExprTree::Leaf(id) => match v.kind(*id) {
            TokenKind::Feature(name) => (0..days)
                .map(|d| Some(p.feature(name).unwrap().get(d, asset)))
                .collect(),
            TokenKind::Constant(c) => vec![Some(*c); days],
            other => panic!("unexpected leaf {other:?}"),
        },
        ExprTree::Node { op, children } => {
            let op = v.operator(*op).unwrap();
            let span = |t: &ExprTree| match v.kind(t.token()) {
                TokenKind::TimeSpan(s) => *s,
                other => panic!("expected span, got {other:?}"),
            };
            match op {
                Operator::Abs | Operator::Log | Operator::Sign => {
                    let x = oracle(&children[0], v, p, asset);
                    x.into_iter()
                        .map(|x| x.map(|x| elementwise1(op, x)))
                        .collect()
                }
                Operator::Add
                | Operator::Sub
                | Operator::Mul
                | Operator::Div
                | Operator::Pow
                | Operator::Larger
                | Operator::Smaller => {
                    let x = oracle(&children[0], v, p, asset);
                    let y = oracle(&children[1], v, p, asset);
                    x.into_iter()
                        .zip(y)
                        .map(|(x, y)| Some(elementwise2(op, x?, y?)))
                        .collect()
                }
                Operator::Ref | Operator::Delta => {
                    let l = span(&children[1]);
                    let x = oracle(&children[0], v, p, asset);
                    (0..days)
                        .map(|d| {
                            if d < l {
                                return None;
                            }
                            let past = x[d - l]?;
                            if op == Operator::Ref {
                                Some(past)
                            } else {
                                Some(x[d]? - past)
                            }
                        })
                        .collect()
                }
                Operator::Cov | Operator::Corr => {
                    let l = span(&children[2]);
                    let x = oracle(&children[0], v, p, asset);
                    let y = oracle(&children[1], v, p, asset);
                    (0..days)
                        .map(|d| {
                            if d + 1 < l {
                                return None;
                            }
                            let wx: Option<Vec<f64>> = (d + 1 - l..=d).map(|k| x[k]).collect();
                            let wy: Option<Vec<f64>> = (d + 1 - l..=d).map(|k| y[k]).collect();
                            Some(paired(op, &wx?, &wy?))
                        })
                        .collect()
                }
                _ => {
                    let l = span(&children[1]);
                    let x = oracle(&children[0], v, p, asset);
                    (0..days)
                        .map(|d| {
                            if d + 1 < l {
                                return None;
                            }
                            let w: Option<Vec<f64>> = (d + 1 - l..=d).map(|k| x[k]).collect();
                            Some(window(op, &w?))
                        })
                        .collect()
                }
            }
        }
    }
}

fn elementwise1(op: Operator, x: f64) -> f64 {
    match op {
        Operator::Abs => x.abs(),
        Operator::Log if x > 0.0 => x.ln(),
        Operator::Log => f64::NAN,
        Operator::Sign if x.is_nan() => f64::NAN,
        Operator::Sign if x == 0.0 => 0.0,
        Operator::Sign => x.signum(),
        _ => unreachable!(),
    }
}

fn elementwise2(op: Operator, x: f64, y: f64) -> f64 {
    if (x.is_nan() || y.is_nan()) && matches!(op, Operator::Larger | Operator::Smaller) {
        return f64::NAN;
    }
    match op {
        Operator::Add => x + y,
        Operator::Sub => x - y,
        Operator::Mul => x * y,
        Operator::Div if y == 0.0 => f64::NAN,
        Operator::Div => x / y,
        Operator::Pow => x.powf(y),
        Operator::Larger => {
            if x >= y {
                x
            } else {
                y
            }
        }
        Operator::Smaller => {
            if x <= y {
                x
            } else {
                y
            }
        }
        _ => unreachable!(),
    }
}

/// Window statistic, `w[0]` oldest.
fn window(op: Operator, w: &[f64]) -> f64 {
    if w.iter().any(|x| x.is_nan()) {
        return f64::NAN;
    }
    let n = w.len() as f64;
    let mut mean = 0.0;
    for x in w {
        mean += x;
    }
    mean /= n;
    let mut var = 0.0;
    for x in w {
        var += (x - mean) * (x - mean);
    }
    var /= n;
    match op {
        Operator::Mean => mean,
        Operator::Sum => mean * n,
        Operator::Var => var,
        Operator::Std => var.sqrt(),
        Operator::Max => {
            let mut m = w[0];
            for &x in w {
                if x > m {
                    m = x;
                }
            }
            m
        }
        Operator::Min => {
            let mut m = w[0];
            for &x in w {
                if x < m {
                    m = x;
                }
            }
            m
        }
        Operator::Med => {
            // the lower median: the smallest value with at least half the
            // window at or below it
            let need = w.len().div_ceil(2);
            let mut best = f64::INFINITY;
            for &c in w {
                let at_or_below = w.iter().filter(|&&x| x <= c).count();
                if at_or_below >= need && c < best {
                    best = c;
                }
            }
            best
        }
        Operator::Mad => w.iter().map(|x| (x - mean).abs()).sum::<f64>() / n,
        Operator::Wma => {
            let mut num = 0.0;
            let mut den = 0.0;
            for (age, x) in w.iter().rev().enumerate() {
                let weight = (w.len() - age) as f64;
                num += weight * x;
                den += weight;
            }
            num / den
        }
        Operator::Ema => {
            let alpha = 2.0 / (n + 1.0);
            let mut e = w[0];
            for x in &w[1..] {
                e = alpha * x + (1.0 - alpha) * e;
            }
            e
        }
        _ => unreachable!(),
    }
}

fn paired(op: Operator, x: &[f64], y: &[f64]) -> f64 {
    if x.iter().chain(y).any(|v| v.is_nan()) {
        return f64::NAN;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov = x
        .iter()
        .zip(y)
        .map(|(a, b)| (a - mx) * (b - my))
        .sum::<f64>()
        / n;
    if op == Operator::Cov {
        return cov;
    }
    let sx = (x.iter().map(|a| (a - mx) * (a - mx)).sum::<f64>() / n).sqrt();
    let sy = (y.iter().map(|b| (b - my) * (b - my)).sum::<f64>() / n).sqrt();
    if sx == 0.0 || sy == 0.0 {
        f64::NAN
    } else {
        cov / (sx * sy)
    }
}

fn close_enough(a: f64, b: f64) -> bool {
    if a.is_nan() || b.is_nan() {
        return a.is_nan() && b.is_nan();
    }
    if a.is_infinite() || b.is_infinite() {
        return a == b;
    }
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

fn check_against_oracle(t: &ExprTree, v: &Vocabulary, p: &Panel) {
    let lookback = max_lookback(t, v);
    assert!(lookback < p.n_days(), "sampled tree too deep");
    let ev = Evaluator::default().with_nan_tolerance(1.0);
    let m = ev
        .evaluate(t, v, p, lookback..p.n_days())
        .unwrap()
        .valid()
        .unwrap();
    for a in 0..p.n_assets() {
        let want = oracle(t, v, p, a);
        if lookback > 0 {
            assert!(
                want[lookback - 1].is_none(),
                "{}: history starts too early",
                t.to_infix(v)
            );
        }
        for d in lookback..p.n_days() {
            let w = want[d].unwrap_or_else(|| panic!("{}: no value on day {d}", t.to_infix(v)));
            let got = m.values.get(d - lookback, a);
            assert!(
                close_enough(got, w),
                "{} day {d} asset {a}: got {got}, oracle {w}",
                t.to_infix(v)
            );
        }
    }
}

#[test]
fn every_operator_matches_the_naive_oracle() {
    let v = Vocabulary::default();
    let p = panel(11, 5, 130);
    for op in Operator::ALL {
        let name = op.name();
        let text = match op.arity() {
            1 => format!("close {name} SEP"),
            2 if op.takes_span() => format!("close 10 {name} SEP"),
            2 => format!("close open {name} SEP"),
            _ => format!("close volume 20 {name} SEP"),
        };
        check_against_oracle(&tree(&text, &v), &v, &p);
    }
}

#[test]
fn random_trees_match_the_naive_oracle() {
    let v = Vocabulary::default();
    let p = panel(5, 4, 200);
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut checked = 0;
    while checked < 300 {
        let t = sample_tree(&v, &mut rng, 4);
        if max_lookback(&t, &v) + 5 > p.n_days() {
            continue;
        }
        check_against_oracle(&t, &v, &p);
        checked += 1;
    }
}

#[test]
fn documented_lookbacks() {
    let v = Vocabulary::default();
    assert_eq!(max_lookback(&tree("close SEP", &v), &v), 0);
    assert_eq!(max_lookback(&tree("close 10 Ref SEP", &v), &v), 10);
    assert_eq!(max_lookback(&tree("close 10 Ref 5 Mean SEP", &v), &v), 14);
    assert_eq!(max_lookback(&tree("close 5 Delta SEP", &v), &v), 5);
    assert_eq!(
        max_lookback(&tree("close volume 20 Corr 10 Std SEP", &v), &v),
        28
    );
}

#[test]
fn too_little_history_is_an_error() {
    let v = Vocabulary::default();
    let p = panel(2, 3, 60);
    let t = tree("close 10 Ref 5 Mean SEP", &v);
    let err = Evaluator::default()
        .evaluate(&t, &v, &p, 13..60)
        .unwrap_err();
    assert_eq!(
        err,
        EvalError::InsufficientHistory {
            required: 14,
            available: 13
        }
    );
    assert!(Evaluator::default().evaluate(&t, &v, &p, 14..60).is_ok());
}

#[test]
fn values_depend_only_on_the_lookback_window() {
    let v = Vocabulary::default();
    let p = panel(3, 4, 120);
    let t = tree("close 10 Ref 5 Mean volume Mul SEP", &v);
    let base = Evaluator::default()
        .evaluate(&t, &v, &p, 100..120)
        .unwrap()
        .valid()
        .unwrap();
    // scramble every day before 100 - 14
    let grids: Vec<Grid> = p
        .features()
        .iter()
        .map(|f| {
            let g = p.feature(f).unwrap();
            Grid::from_fn(g.rows(), g.cols(), |d, a| {
                if d < 86 {
                    1.0 + d as f64
                } else {
                    g.get(d, a)
                }
            })
        })
        .collect();
    let q = Panel::new(
        p.assets().to_vec(),
        p.features().to_vec(),
        p.dates().to_vec(),
        grids,
    )
    .unwrap();
    let again = Evaluator::default()
        .evaluate(&t, &v, &q, 100..120)
        .unwrap()
        .valid()
        .unwrap();
    assert_eq!(base.values, again.values);
}

#[test]
fn sequential_and_parallel_agree_bitwise() {
    let v = Vocabulary::default();
    let p = panel(8, 12, 150);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let t = sample_tree(&v, &mut rng, 4);
        let lb = max_lookback(&t, &v);
        if lb >= 140 {
            continue;
        }
        let a = Evaluator::default()
            .with_exec(Exec::Sequential)
            .with_nan_tolerance(1.0);
        let b = Evaluator::default()
            .with_exec(Exec::Parallel)
            .with_nan_tolerance(1.0);
        let x = a.evaluate(&t, &v, &p, lb..150).unwrap().valid().unwrap();
        let y = b.evaluate(&t, &v, &p, lb..150).unwrap().valid().unwrap();
        let bits = |g: &Grid| g.as_slice().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.values), bits(&y.values));
    }
}

#[test]
fn forced_nan_is_invalid() {
    let v = Vocabulary::default();
    let p = panel(4, 3, 30);
    let t = tree("close close Sub Log SEP", &v);
    match Evaluator::default().evaluate(&t, &v, &p, 0..30).unwrap() {
        Evaluation::Invalid { nonfinite_fraction } => assert_eq!(nonfinite_fraction, 1.0),
        other => panic!("expected invalid, got {other:?}"),
    }
}
