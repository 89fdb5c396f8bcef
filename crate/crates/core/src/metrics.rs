//! Information coefficients and cross-sectional normalization.

use std::ops::Range;

use crate::data::TargetMatrix;
use crate::error::MetricsError;
use crate::eval::FactorMatrix;
use crate::grid::Grid;
use crate::par::{map_indices, Exec};

/// Pearson correlation of two equally long vectors.
///
/// Returns `DegenerateDay` when either vector has zero variance or fewer than
/// two elements.
pub fn pearson_ic(z: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if z.len() != y.len() {
        return Err(MetricsError::LengthMismatch(z.len(), y.len()));
    }
    let n = z.len();
    if n < 2 {
        return Err(MetricsError::DegenerateDay);
    }
    let nf = n as f64;
    let mz = z.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let (mut szy, mut szz, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in z.iter().zip(y) {
        let (da, db) = (a - mz, b - my);
        szy += da * db;
        szz += da * da;
        syy += db * db;
    }
    if szz == 0.0 || syy == 0.0 || !(szz.is_finite() && syy.is_finite()) {
        return Err(MetricsError::DegenerateDay);
    }
    let r = szy / (szz.sqrt() * syy.sqrt());
    if r.is_finite() {
        Ok(r.clamp(-1.0, 1.0))
    } else {
        Err(MetricsError::DegenerateDay)
    }
}

/// Ranks starting at 1; tied values share the average of their ranks.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of the rank transforms.
pub fn rank_ic(z: &[f64], y: &[f64]) -> Result<f64, MetricsError> {
    if z.len() != y.len() {
        return Err(MetricsError::LengthMismatch(z.len(), y.len()));
    }
    pearson_ic(&average_ranks(z), &average_ranks(y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IcKind {
    Pearson,
    Rank,
}

/// Per-day ICs over an evaluation range.
#[derive(Debug, Clone, PartialEq)]
pub struct ICSeries {
    /// `(day, ic)` for every retained day.
    pub per_day: Vec<(usize, f64)>,
    pub mean: f64,
    /// Days dropped because the IC was undefined.
    pub skipped: usize,
}

impl ICSeries {
    pub fn len(&self) -> usize {
        self.per_day.len()
    }

    pub fn is_empty(&self) -> bool {
        self.per_day.is_empty()
    }
}

/// Mean daily Pearson IC of `z` against `y` over `days`.
pub fn mean_ic(
    z: &FactorMatrix,
    y: &TargetMatrix,
    days: Range<usize>,
) -> Result<ICSeries, MetricsError> {
    ic_series(z, y, days, IcKind::Pearson, Exec::default())
}

/// Mean daily Rank IC of `z` against `y` over `days`.
pub fn mean_rank_ic(
    z: &FactorMatrix,
    y: &TargetMatrix,
    days: Range<usize>,
) -> Result<ICSeries, MetricsError> {
    ic_series(z, y, days, IcKind::Rank, Exec::default())
}

/// Daily ICs of `z` against `y`. Within a day only assets where both values
/// are finite take part; days where the IC is undefined are skipped.
pub fn ic_series(
    z: &FactorMatrix,
    y: &TargetMatrix,
    days: Range<usize>,
    kind: IcKind,
    exec: Exec,
) -> Result<ICSeries, MetricsError> {
    let zd = z.days();
    if days.start < zd.start || days.end > zd.end || days.end > y.values.rows() {
        return Err(MetricsError::LengthMismatch(days.len(), zd.len()));
    }
    if z.n_assets() != y.values.cols() {
        return Err(MetricsError::LengthMismatch(z.n_assets(), y.values.cols()));
    }
    let first = days.start;
    let ics = map_indices(exec, days.len(), |k| {
        let d = first + k;
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (&zv, &yv) in z.day(d).iter().zip(y.values.row(d)) {
            if zv.is_finite() && yv.is_finite() {
                a.push(zv);
                b.push(yv);
            }
        }
        match kind {
            IcKind::Pearson => pearson_ic(&a, &b),
            IcKind::Rank => rank_ic(&a, &b),
        }
        .ok()
    });
    let per_day: Vec<(usize, f64)> = ics
        .iter()
        .enumerate()
        .filter_map(|(k, ic)| ic.map(|v| (first + k, v)))
        .collect();
    if per_day.is_empty() {
        return Err(MetricsError::NoValidDays);
    }
    let mean = per_day.iter().map(|(_, v)| v).sum::<f64>() / per_day.len() as f64;
    Ok(ICSeries {
        skipped: days.len() - per_day.len(),
        per_day,
        mean,
    })
}

/// Z-scores one cross-section in place. Non-finite entries are left as they
/// are and ignored; a constant cross-section becomes all zeros.
pub fn zscore_slice(row: &mut [f64]) {
    let finite = row.iter().filter(|v| v.is_finite());
    let n = finite.clone().count();
    if n == 0 {
        return;
    }
    let mean = finite.clone().sum::<f64>() / n as f64;
    let var = finite.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    for v in row.iter_mut().filter(|v| v.is_finite()) {
        *v = if std > 0.0 { (*v - mean) / std } else { 0.0 };
    }
}

/// Per day: subtract the cross-sectional mean and divide by the population std.
pub fn zscore_daily(m: &FactorMatrix) -> FactorMatrix {
    let mut values: Grid = m.values.clone();
    for r in 0..values.rows() {
        zscore_slice(values.row_mut(r));
    }
    FactorMatrix {
        start: m.start,
        values,
    }
}
