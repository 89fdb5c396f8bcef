use alphaforge::data::TargetMatrix;
use alphaforge::error::MetricsError;
use alphaforge::eval::FactorMatrix;
use alphaforge::grid::Grid;
use alphaforge::metrics::*;

#[test]
fn pearson_basics() {
    let z = [1.0, 2.0, 4.0, 7.0];
    let neg: Vec<f64> = z.iter().map(|v| -v).collect();
    assert!((pearson_ic(&z, &z).unwrap() - 1.0).abs() < 1e-15);
    assert!((pearson_ic(&z, &neg).unwrap() + 1.0).abs() < 1e-15);
    assert_eq!(
        pearson_ic(&[1.0, 1.0], &[1.0, 2.0]),
        Err(MetricsError::DegenerateDay)
    );
    assert_eq!(
        pearson_ic(&[1.0], &[1.0, 2.0]),
        Err(MetricsError::LengthMismatch(1, 2))
    );
    // deviations (-1,0,1) and (1,-1,0): r = -1 / 2
    assert!((pearson_ic(&[1.0, 2.0, 3.0], &[3.0, 1.0, 2.0]).unwrap() + 0.5).abs() < 1e-12);
}

#[test]
fn ranks_average_ties() {
    assert_eq!(
        average_ranks(&[10.0, 20.0, 10.0, 5.0]),
        vec![2.5, 4.0, 2.5, 1.0]
    );
    let z = [0.3, -1.0, 2.0, 0.5];
    let ez: Vec<f64> = z.iter().map(|v: &f64| v.exp()).collect();
    let y = [1.0, 0.0, 3.0, -2.0];
    assert_eq!(rank_ic(&z, &y), rank_ic(&ez, &y));
}

#[test]
fn zscore_properties() {
    let m = FactorMatrix {
        start: 3,
        values: Grid::from_vec(2, 4, vec![1.0, 2.0, 3.0, 10.0, 5.0, 5.0, 5.0, 5.0]),
    };
    let z = zscore_daily(&m);
    let row = z.values.row(0);
    let mean = row.iter().sum::<f64>() / 4.0;
    let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
    assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    assert!(z.values.row(1).iter().all(|&v| v == 0.0));
    let affine = FactorMatrix {
        start: 3,
        values: m.values.map(|v| 3.0 * v - 7.0),
    };
    let za = zscore_daily(&affine);
    for (a, b) in za.values.as_slice().iter().zip(z.values.as_slice()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn mean_ic_skips_degenerate_days() {
    let z = FactorMatrix {
        start: 0,
        values: Grid::from_vec(3, 3, vec![1.0, 2.0, 3.0, 1.0, 1.0, 1.0, 3.0, 2.0, 1.0]),
    };
    let y = TargetMatrix {
        values: Grid::from_vec(3, 3, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0]),
        horizon: None,
    };
    let s = mean_ic(&z, &y, 0..3).unwrap();
    assert_eq!(s.skipped, 1);
    assert_eq!(
        s.per_day.iter().map(|d| d.0).collect::<Vec<_>>(),
        vec![0, 2]
    );
    assert!((s.per_day[0].1 - 1.0).abs() < 1e-12 && (s.per_day[1].1 + 1.0).abs() < 1e-12);
    assert!(s.mean.abs() < 1e-12);
    assert_eq!(mean_ic(&z, &y, 1..2), Err(MetricsError::NoValidDays));
    let single = mean_ic(&z, &y, 2..3).unwrap();
    assert_eq!(single.mean, single.per_day[0].1);
}
