use alphaforge::error::ShapingError;
use alphaforge::expr::tokenize;
use alphaforge::shaping::*;
use alphaforge::vocab::TokenId;
use alphaforge::vocab::Vocabulary;

fn toy() -> (Vocabulary, DemoIndex) {
    let v = Vocabulary::default();
    // a = close, b/d = open / high as second operand, q = low
    let demos = [
        "close open Add SEP",
        "close open Sub SEP",
        "close low Add SEP",
    ];
    let seqs = demos.iter().map(|d| tokenize(d, &v).unwrap()).collect();
    let idx = DemoIndex::build(seqs, &v).unwrap();
    (v, idx)
}

fn ids(v: &Vocabulary, text: &str) -> Vec<TokenId> {
    text.split_whitespace()
        .map(|w| v.lookup(w).unwrap())
        .collect()
}

#[test]
fn counts_and_potentials() {
    let (v, idx) = toy();
    assert_eq!(idx.depth_total(0), 3);
    assert_eq!(idx.depth_total(1), 3);
    assert_eq!(idx.depth_total(3), 3);
    assert_eq!(idx.depth_total(5), 0);
    assert_eq!(idx.prefix_count(&ids(&v, "close")), 3);
    assert_eq!(idx.prefix_count(&ids(&v, "close open")), 2);
    assert_eq!(idx.potential(&[]), 1.0);
    assert_eq!(idx.potential(&ids(&v, "close")), 1.0);
    assert_eq!(idx.potential(&ids(&v, "close open")), 2.0 / 3.0);
    assert_eq!(idx.potential(&ids(&v, "volume")), 0.0);
    let f = tlrs_f(&idx, &ids(&v, "close"), &ids(&v, "close open")).unwrap();
    assert!((f + 1.0 / 3.0).abs() < 1e-15);
    assert_eq!(
        tlrs_f(&idx, &ids(&v, "close"), &ids(&v, "open open")),
        Err(ShapingError::NotAnExtension)
    );
}

#[test]
fn cursor_matches_walks() {
    let (v, idx) = toy();
    let path = ids(&v, "close open Add SEP");
    let mut c = idx.cursor();
    for t in 1..=path.len() {
        assert_eq!(c.advance(path[t - 1]), idx.potential(&path[..t]));
    }
    assert_eq!(c.advance(path[0]), 0.0);
}

#[test]
fn empty_and_bad_demo_sets() {
    let v = Vocabulary::default();
    assert_eq!(
        DemoIndex::build(vec![], &v).unwrap_err(),
        ShapingError::EmptyDemoSet
    );
    let err = DemoIndex::from_text("# header\nclose SEP\nclose Add SEP\n", &v).unwrap_err();
    assert!(matches!(err, ShapingError::UnparseableDemo { line: 3, .. }));
}

#[test]
fn shape_rule() {
    assert_eq!(shape(0.0, 0.2, false), 0.2);
    assert!((shape(0.7, -0.1, true) - 0.6).abs() < 1e-15);
    assert_eq!(shape(-1.0, 0.0, true), -1.0);
}

#[test]
fn distance_potentials_peak_on_demos() {
    let (v, idx) = toy();
    for enc in [Encoding::TokenId, Encoding::OneHot] {
        let dv = DemoVectors::new(idx.demos(), v.len(), 20, enc).unwrap();
        assert_eq!(dv.state_potential(&ids(&v, "close open")), 0.0);
        assert!(dv.state_potential(&ids(&v, "volume open")) < 0.0);
        assert_eq!(
            dv.pair_potential(&ids(&v, "close"), v.lookup("low").unwrap()),
            0.0
        );
        let s = ids(&v, "close");
        assert_eq!(pbrs_f(&dv, &s, &s, 1.0), 0.0);
    }
}

#[test]
fn episode_shaping_telescopes() {
    let (v, idx) = toy();
    let actions = ids(&v, "close open Mul SEP");
    let base = [0.0, 0.0, 0.0, 0.4];
    let shaper = Shaper::Tlrs(std::sync::Arc::new(idx));
    let steps = shaper.shape_episode(&actions, &base);
    let total: f64 = steps.iter().map(|s| s.f).sum();
    assert!((total + 1.0).abs() < 1e-15);
    assert!((steps[3].shaped - (0.4 + steps[3].f)).abs() < 1e-15);
    let plain = Shaper::None.shape_episode(&actions, &base);
    assert!(plain.iter().zip(&base).all(|(s, b)| s.shaped == *b));
}
