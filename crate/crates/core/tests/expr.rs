use std::sync::Arc;

use alphaforge::error::ExprError;
use alphaforge::expr::{
    parse_rpn, parse_rpn_lines, sample_masked, sample_tree, to_rpn, tokenize, ExprTree, Grammar,
    TokenSequence, DEFAULT_MAX_LEN,
};
use alphaforge::vocab::{TokenId, TokenKind, Vocabulary};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn ids(v: &Vocabulary, names: &[&str]) -> Vec<TokenId> {
    names.iter().map(|n| v.id_of(n).unwrap()).collect()
}

#[test]
fn demonstration_spellings() {
    let v = Vocabulary::default();
    let seq = tokenize("BEG high low Mul 0.5 Pow vwap Div SEP", &v).unwrap();
    assert_eq!(
        seq.0,
        ids(
            &v,
            &["high", "low", "Mul", "0.5", "Pow", "vwap", "Div", "SEP"]
        )
    );
    assert_eq!(tokenize("$close", &v).unwrap().0, vec![TokenId(23)]);
    assert_eq!(
        tokenize("open volume 10d Corr", &v).unwrap(),
        tokenize("open volume 10 Corr", &v).unwrap()
    );
    assert_eq!(
        tokenize("BEG frobnicate SEP", &v),
        Err(ExprError::UnknownToken {
            word: "frobnicate".into(),
            position: 1
        })
    );
    assert!(matches!(
        tokenize("close BEG SEP", &v),
        Err(ExprError::MisplacedIndicator { .. })
    ));
    assert!(matches!(
        tokenize("close SEP close", &v),
        Err(ExprError::MisplacedIndicator { .. })
    ));
}

#[test]
fn parses_demonstration_into_tree() {
    let v = Vocabulary::default();
    let seq = tokenize("BEG close open Sub high low Sub 0.001 Add Div SEP", &v).unwrap();
    let t = parse_rpn(&seq, &v).unwrap();
    assert_eq!(
        t.to_infix(&v),
        "Div(Sub(close, open), Add(Sub(high, low), 0.001))"
    );
    let t = parse_rpn(&tokenize("close SEP", &v).unwrap(), &v).unwrap();
    assert_eq!(t, ExprTree::Leaf(v.id_of("close").unwrap()));
}

#[test]
fn parse_errors() {
    let v = Vocabulary::default();
    let p = |text: &str| parse_rpn(&tokenize(text, &v).unwrap(), &v);
    assert_eq!(p("Add SEP"), Err(ExprError::ArityUnderflow { step: 1 }));
    assert_eq!(
        p("close open SEP"),
        Err(ExprError::DanglingOperands { count: 2 })
    );
    assert!(matches!(
        p("close 10 Abs SEP"),
        Err(ExprError::TimeSpanMisuse { .. })
    ));
    assert_eq!(
        p("close 10 SEP"),
        Err(ExprError::DanglingOperands { count: 2 })
    );
    assert!(matches!(p("10 SEP"), Err(ExprError::TimeSpanMisuse { .. })));
    assert!(matches!(
        p("close open Mean SEP"),
        Err(ExprError::TimeSpanMisuse { .. })
    ));
    assert_eq!(p("close"), Err(ExprError::MissingSep));
}

#[test]
fn emits_post_order() {
    let v = Vocabulary::default();
    let t = parse_rpn(&tokenize("open volume 10 Corr -1 Mul SEP", &v).unwrap(), &v).unwrap();
    assert_eq!(
        to_rpn(&t, &v).to_text(&v),
        "open volume 10 Corr -1.0 Mul SEP"
    );
    let vol = ExprTree::Leaf(v.id_of("volume").unwrap());
    assert_eq!(to_rpn(&vol, &v).0, ids(&v, &["volume", "SEP"]));
}

#[test]
fn demo_file_lines_and_comments() {
    let v = Vocabulary::default();
    let text = "# header\n\nclose SEP\nclose Frob SEP\n  BEG close 5 Delta SEP\n";
    let lines = parse_rpn_lines(text, &v);
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0].0, 3);
    assert!(lines[0].1.is_ok());
    assert_eq!(lines[1].0, 4);
    assert!(lines[1].1.is_err());
    assert_eq!(lines[2].1.as_ref().unwrap().len(), 4);
}

fn check_reachable_prefixes(
    g: &Grammar,
    v: &Vocabulary,
    prefix: &mut TokenSequence,
    seen: &mut usize,
) {
    *seen += 1;
    let mask = g.mask(prefix);
    assert!(
        mask.iter().any(|&m| m),
        "dead end after {}",
        prefix.to_text(v)
    );
    for id in v.ids() {
        if !mask[id.index()] {
            continue;
        }
        prefix.push(id);
        if id == v.sep() {
            parse_rpn(prefix, v).unwrap_or_else(|e| panic!("{}: {e}", prefix.to_text(v)));
            assert!(prefix.len() <= g.max_len());
        } else {
            check_reachable_prefixes(g, v, prefix, seen);
        }
        prefix.0.pop();
    }
}

#[test]
fn small_grammar_is_sound_and_complete_everywhere() {
    let table = "\
0 Abs op
1 Add op
2 Mean op
3 Corr op
4 close feature
5 1.0 const 1
6 5 span 5
7 SEP sep
";
    let v = Arc::new(Vocabulary::from_table(table).unwrap());
    for max_len in 2..=7 {
        let g = Grammar::new(v.clone(), max_len);
        let mut seen = 0;
        check_reachable_prefixes(&g, &v, &mut TokenSequence::new(), &mut seen);
        assert!(seen > 1);
    }
}

#[test]
fn default_length_fits_twenty_formula_tokens() {
    let v = Arc::new(Vocabulary::default());
    let g = Grammar::new(v.clone(), DEFAULT_MAX_LEN);
    // 20 formula tokens: close followed by 19 Abs
    let mut seq = tokenize("close", &v).unwrap();
    let abs = v.id_of("Abs").unwrap();
    for _ in 0..19 {
        assert!(g.legal_next(&seq, abs));
        seq.push(abs);
    }
    assert!(!g.legal_next(&seq, abs));
    assert!(g.legal_next(&seq, v.sep()));
}

fn masked_rollouts_parse(seed: u64, n: usize) {
    let v = Arc::new(Vocabulary::default());
    let g = Grammar::new(v.clone(), DEFAULT_MAX_LEN);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..n {
        let seq = sample_masked(&g, &mut rng);
        assert!(seq.len() <= DEFAULT_MAX_LEN);
        parse_rpn(&seq, &v).unwrap_or_else(|e| panic!("{}: {e}", seq.to_text(&v)));
    }
}

#[test]
fn masked_rollouts_always_parse() {
    masked_rollouts_parse(7, 5000);
}

fn no_span_outside_final_slot(t: &ExprTree, v: &Vocabulary) -> bool {
    match t {
        ExprTree::Leaf(id) => !matches!(v.kind(*id), TokenKind::TimeSpan(_)),
        ExprTree::Node { op, children } => {
            let op = v.operator(*op).unwrap();
            let n = children.len();
            children.iter().enumerate().all(|(i, c)| {
                if op.takes_span() && i == n - 1 {
                    matches!(c, ExprTree::Leaf(id) if matches!(v.kind(*id), TokenKind::TimeSpan(_)))
                } else {
                    no_span_outside_final_slot(c, v)
                }
            })
        }
    }
}

proptest! {
    #[test]
    fn round_trip_of_sampled_trees(seed in any::<u64>(), depth in 0usize..6) {
        let v = Vocabulary::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = sample_tree(&v, &mut rng, depth);
        prop_assert!(no_span_outside_final_slot(&t, &v));
        let seq = to_rpn(&t, &v);
        prop_assert_eq!(seq.len(), t.size() + 1);
        prop_assert_eq!(parse_rpn(&seq, &v).unwrap(), t.clone());
        let text = seq.to_text(&v);
        prop_assert_eq!(parse_rpn(&tokenize(&text, &v).unwrap(), &v).unwrap(), t);
    }

    #[test]
    fn masked_rollouts_from_any_seed(seed in any::<u64>()) {
        masked_rollouts_parse(seed, 20);
    }
}
