use alphaforge::data::Splits;
use alphaforge::data::TargetMatrix;
use alphaforge::runner::*;

#[test]
fn tails_are_masked_per_split() {
    let splits = Splits::new(2..10, 10..14, 14..20).unwrap();
    let targets = TargetMatrix {
        values: alphaforge::grid::Grid::zeros(20, 3),
        horizon: Some(3),
    };
    let m = mask_split_tails(targets, &splits);
    let hidden: Vec<usize> = (0..20).filter(|&d| !m.day_available(d)).collect();
    assert_eq!(hidden, [7, 8, 9, 11, 12, 13, 17, 18, 19]);
}

#[test]
fn planted_targets_are_not_masked() {
    let splits = Splits::new(2..10, 10..14, 14..20).unwrap();
    let targets = TargetMatrix {
        values: alphaforge::grid::Grid::zeros(20, 3),
        horizon: None,
    };
    let m = mask_split_tails(targets, &splits);
    assert!((0..20).all(|d| m.day_available(d)));
}

#[test]
fn metrics_line_round_trip() {
    let row = MetricsRow {
        step: 4096,
        train_ic: Some(0.51234567),
        valid_ic: None,
        valid_rank_ic: Some(-0.25),
        mean_episode_length: 12.5,
        r_bar: -0.001,
    };
    let line = row.to_csv_line();
    assert_eq!(line, "4096,0.512346,,-0.250000,12.5000,-0.001000");
    let back = MetricsRow::parse_csv_line(&line).unwrap();
    assert_eq!(back.valid_ic, None);
    assert_eq!(back.step, 4096);
}
