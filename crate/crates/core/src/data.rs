//! Market panels: CSV ingestion, seeded synthetic generation, forward-return
//! targets and train/valid/test day splits.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::DataError;
use crate::eval::{Evaluation, Evaluator};
use crate::expr::ExprTree;
use crate::grid::Grid;
use crate::metrics::zscore_daily;
use crate::vocab::Vocabulary;

/// The six price-volume columns, in file order.
pub const FEATURES: [&str; 6] = ["open", "high", "low", "close", "volume", "vwap"];

const DATE_FMT: &str = "%Y-%m-%d";

/// Asset x feature x day tensor, stored as one day-by-asset grid per feature.
#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    assets: Vec<String>,
    features: Vec<String>,
    dates: Vec<NaiveDate>,
    grids: Vec<Grid>,
}

impl Panel {
    pub fn new(
        assets: Vec<String>,
        features: Vec<String>,
        dates: Vec<NaiveDate>,
        grids: Vec<Grid>,
    ) -> Result<Panel, DataError> {
        if grids.len() != features.len() {
            return Err(DataError::Schema("one grid per feature required".into()));
        }
        for g in &grids {
            if g.rows() != dates.len() || g.cols() != assets.len() {
                return Err(DataError::Schema(
                    "grid shape does not match days x assets".into(),
                ));
            }
        }
        Ok(Panel {
            assets,
            features,
            dates,
            grids,
        })
    }

    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn features(&self) -> &[String] {
        &self.features
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn feature(&self, name: &str) -> Option<&Grid> {
        self.features
            .iter()
            .position(|f| f == name)
            .map(|i| &self.grids[i])
    }

    pub fn close(&self) -> &Grid {
        self.feature("close").expect("panel has a close column")
    }

    /// Index range of the days in `[first, last]`, both inclusive.
    pub fn day_range(&self, first: NaiveDate, last: NaiveDate) -> Range<usize> {
        let start = self.dates.partition_point(|d| *d < first);
        let end = self.dates.partition_point(|d| *d <= last);
        start..end.max(start)
    }

    /// Checks price ordering and non-negative volume.
    pub fn check_consistency(&self) -> Result<(), String> {
        let (o, h, l, c, v) = match (
            self.feature("open"),
            self.feature("high"),
            self.feature("low"),
            self.feature("close"),
            self.feature("volume"),
        ) {
            (Some(o), Some(h), Some(l), Some(c), Some(v)) => (o, h, l, c, v),
            _ => return Ok(()),
        };
        let tol = 1e-9;
        for d in 0..self.n_days() {
            for a in 0..self.n_assets() {
                let (op, hi, lo, cl, vol) = (
                    o.get(d, a),
                    h.get(d, a),
                    l.get(d, a),
                    c.get(d, a),
                    v.get(d, a),
                );
                let top = op.max(cl);
                let bottom = op.min(cl);
                if vol < 0.0 || hi < top - tol * top.abs() || bottom < lo - tol * lo.abs() {
                    return Err(format!(
                        "{} {}: open={op} high={hi} low={lo} close={cl} volume={vol}",
                        self.dates[d], self.assets[a]
                    ));
                }
            }
        }
        Ok(())
    }

    /// Writes the panel in the ingestion schema, rows sorted by date then symbol.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["date".to_string(), "symbol".to_string()];
        header.extend(self.features.iter().cloned());
        w.write_record(&header)?;
        for (d, date) in self.dates.iter().enumerate() {
            for (a, sym) in self.assets.iter().enumerate() {
                let mut rec = vec![date.format(DATE_FMT).to_string(), sym.clone()];
                rec.extend(self.grids.iter().map(|g| format!("{}", g.get(d, a))));
                w.write_record(&rec)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Copy with `extra` random-walk feature columns `f0..` appended.
    pub fn with_extra_features(&self, extra: usize, seed: u64) -> Panel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut features = self.features.clone();
        let mut grids = self.grids.clone();
        for k in 0..extra {
            features.push(format!("f{k}"));
            let mut g = Grid::zeros(self.n_days(), self.n_assets());
            for a in 0..self.n_assets() {
                let mut x = 0.0;
                for d in 0..self.n_days() {
                    x += rng.sample::<f64, _>(StandardNormal);
                    g.set(d, a, x);
                }
            }
            grids.push(g);
        }
        Panel {
            assets: self.assets.clone(),
            features,
            dates: self.dates.clone(),
            grids,
        }
    }
}

/// What to do with an asset that has missing cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    #[default]
    Reject,
    DropAsset,
}

/// Loads a panel from CSV with header `date,symbol,open,high,low,close,volume,vwap`
/// (column order free, extra columns ignored).
pub fn load_panel(path: &Path, policy: MissingPolicy) -> Result<Panel, DataError> {
    let file = std::fs::File::open(path)?;
    read_panel(file, policy)
}

pub fn read_panel<R: Read>(input: R, policy: MissingPolicy) -> Result<Panel, DataError> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    let col = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::Schema(format!("missing column `{name}`")))
    };
    let date_col = col("date")?;
    let sym_col = col("symbol")?;
    let feat_cols = FEATURES.map(col);
    let mut feat_idx = [0usize; 6];
    for (i, c) in feat_cols.into_iter().enumerate() {
        feat_idx[i] = c?;
    }

    let mut cells: BTreeMap<(NaiveDate, String), [Option<f64>; 6]> = BTreeMap::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let date_text = rec.get(date_col).unwrap_or("");
        let date = NaiveDate::parse_from_str(date_text, DATE_FMT).map_err(|_| {
            DataError::NonNumericCell {
                line,
                column: "date".into(),
                value: date_text.to_string(),
            }
        })?;
        let symbol = rec.get(sym_col).unwrap_or("").to_string();
        if symbol.is_empty() {
            return Err(DataError::Schema(format!("empty symbol at line {line}")));
        }
        let mut values = [None; 6];
        for (k, &c) in feat_idx.iter().enumerate() {
            let text = rec.get(c).unwrap_or("");
            if text.is_empty() || text.eq_ignore_ascii_case("nan") {
                continue;
            }
            let v: f64 = text.parse().map_err(|_| DataError::NonNumericCell {
                line,
                column: FEATURES[k].into(),
                value: text.to_string(),
            })?;
            values[k] = v.is_finite().then_some(v);
        }
        if cells.insert((date, symbol.clone()), values).is_some() {
            return Err(DataError::DuplicateRow {
                date: date.format(DATE_FMT).to_string(),
                symbol,
            });
        }
    }
    if cells.is_empty() {
        return Err(DataError::Schema("file has no data rows".into()));
    }

    let dates: Vec<NaiveDate> = cells
        .keys()
        .map(|(d, _)| *d)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let all_symbols: BTreeSet<String> = cells.keys().map(|(_, s)| s.clone()).collect();
    let mut assets = Vec::new();
    for sym in all_symbols {
        let complete = dates.iter().all(|d| {
            cells
                .get(&(*d, sym.clone()))
                .is_some_and(|v| v.iter().all(Option::is_some))
        });
        match (complete, policy) {
            (true, _) => assets.push(sym),
            (false, MissingPolicy::DropAsset) => {
                log::warn!("dropping asset {sym}: missing cells");
            }
            (false, MissingPolicy::Reject) => {
                return Err(DataError::MissingCells(format!("asset {sym} has gaps")));
            }
        }
    }
    if assets.is_empty() {
        return Err(DataError::MissingCells("no asset is complete".into()));
    }
    let mut grids: Vec<Grid> = (0..6)
        .map(|_| Grid::zeros(dates.len(), assets.len()))
        .collect();
    for (d, date) in dates.iter().enumerate() {
        for (a, sym) in assets.iter().enumerate() {
            let v = cells[&(*date, sym.clone())];
            for k in 0..6 {
                grids[k].set(d, a, v[k].unwrap());
            }
        }
    }
    let panel = Panel::new(
        assets,
        FEATURES.iter().map(|s| s.to_string()).collect(),
        dates,
        grids,
    )?;
    panel.check_consistency().map_err(DataError::Schema)?;
    Ok(panel)
}

/// Per-day, per-asset prediction targets. Days without a target hold NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    pub values: Grid,
    /// Forward-return horizon, or `None` for synthetic planted targets.
    pub horizon: Option<usize>,
}

impl TargetMatrix {
    pub fn day_available(&self, day: usize) -> bool {
        self.values.row(day).iter().all(|v| v.is_finite())
    }

    pub fn write_csv<W: Write>(&self, panel: &Panel, out: W) -> Result<(), DataError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["date", "symbol", "target"])?;
        for (d, date) in panel.dates().iter().enumerate() {
            for (a, sym) in panel.assets().iter().enumerate() {
                let v = self.values.get(d, a);
                let text = if v.is_finite() {
                    format!("{v}")
                } else {
                    String::new()
                };
                w.write_record([date.format(DATE_FMT).to_string(), sym.clone(), text])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Reads targets written by [`TargetMatrix::write_csv`], aligned to `panel`.
    pub fn read_csv<R: Read>(panel: &Panel, input: R) -> Result<TargetMatrix, DataError> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(input);
        let mut values = Grid::filled(panel.n_days(), panel.n_assets(), f64::NAN);
        for (i, rec) in reader.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let (date, sym, val) = (
                rec.get(0).unwrap_or(""),
                rec.get(1).unwrap_or(""),
                rec.get(2).unwrap_or(""),
            );
            let date = NaiveDate::parse_from_str(date, DATE_FMT).map_err(|_| {
                DataError::NonNumericCell {
                    line,
                    column: "date".into(),
                    value: date.to_string(),
                }
            })?;
            let (Some(d), Some(a)) = (
                panel.dates().iter().position(|x| *x == date),
                panel.assets().iter().position(|s| s == sym),
            ) else {
                continue;
            };
            if !val.is_empty() {
                let v: f64 = val.parse().map_err(|_| DataError::NonNumericCell {
                    line,
                    column: "target".into(),
                    value: val.to_string(),
                })?;
                values.set(d, a, v);
            }
        }
        Ok(TargetMatrix {
            values,
            horizon: None,
        })
    }
}

/// Simple forward returns `close[l+h]/close[l] - 1`; the last `h` days are NaN.
pub fn forward_returns(panel: &Panel, horizon: usize) -> Result<TargetMatrix, DataError> {
    let days = panel.n_days();
    if horizon == 0 {
        return Err(DataError::DegenerateConfig(
            "horizon must be at least 1".into(),
        ));
    }
    if horizon >= days {
        return Err(DataError::HorizonTooLarge { horizon, days });
    }
    let close = panel.close();
    let values = Grid::from_fn(days, panel.n_assets(), |d, a| {
        if d + horizon < days {
            close.get(d + horizon, a) / close.get(d, a) - 1.0
        } else {
            f64::NAN
        }
    });
    Ok(TargetMatrix {
        values,
        horizon: Some(horizon),
    })
}

/// Parameters of [`synth_panel`].
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub seed: u64,
    pub n_assets: usize,
    pub n_days: usize,
    pub planted: Option<ExprTree>,
    pub noise_std: f64,
}

/// Consecutive weekdays starting on the first Monday of 2016.
pub fn business_days(count: usize) -> Vec<NaiveDate> {
    let mut d = NaiveDate::from_ymd_opt(2016, 1, 4).unwrap();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d += Duration::days(1);
    }
    out
}

/// Seeded geometric random-walk panel. With a planted formula the targets
/// are its daily z-score plus Gaussian noise of `noise_std`; without one they
/// are unit Gaussian noise.
pub fn synth_panel(
    spec: &SynthSpec,
    vocab: &Vocabulary,
) -> Result<(Panel, TargetMatrix), DataError> {
    let SynthSpec {
        seed,
        n_assets: n,
        n_days: days,
        ..
    } = *spec;
    if n < 2 {
        return Err(DataError::DegenerateConfig(format!(
            "need at least 2 assets, got {n}"
        )));
    }
    if days < 2 {
        return Err(DataError::DegenerateConfig(format!(
            "need at least 2 days, got {days}"
        )));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(DataError::DegenerateConfig(
            "noise_std must be finite and >= 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = move |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let mut grids: Vec<Grid> = (0..6).map(|_| Grid::zeros(days, n)).collect();
    for a in 0..n {
        let p0 = 50.0 * (0.5 * normal(&mut rng)).exp();
        let drift = 2e-4 * normal(&mut rng);
        let vol = 0.01 + 0.02 * rng.gen::<f64>();
        let vol_scale = (13.0 + 0.5 * normal(&mut rng)).exp();
        let mut prev = p0;
        for d in 0..days {
            let open = prev * (0.3 * vol * normal(&mut rng)).exp();
            let close = if d == 0 {
                p0
            } else {
                prev * (drift + vol * normal(&mut rng)).exp()
            };
            let high = open.max(close) * (0.5 * vol * normal(&mut rng).abs()).exp();
            let low = open.min(close) * (-0.5 * vol * normal(&mut rng).abs()).exp();
            let volume = vol_scale * (0.3 * normal(&mut rng)).exp();
            let vwap = (high + low + close) / 3.0;
            for (k, v) in [open, high, low, close, volume, vwap]
                .into_iter()
                .enumerate()
            {
                grids[k].set(d, a, v);
            }
            prev = close;
        }
    }
    let panel = Panel::new(
        (0..n).map(|a| format!("S{a:03}")).collect(),
        FEATURES.iter().map(|s| s.to_string()).collect(),
        business_days(days),
        grids,
    )?;
    if let Err(msg) = panel.check_consistency() {
        log::warn!("synthetic panel inconsistency: {msg}");
    }

    let mut values = Grid::filled(days, n, f64::NAN);
    match &spec.planted {
        None => {
            for v in values.as_mut_slice() {
                *v = normal(&mut rng);
            }
        }
        Some(tree) => {
            let evaluator = Evaluator::default();
            let lookback = evaluator.max_lookback(tree, vocab);
            if lookback + 2 > days {
                return Err(DataError::DegenerateConfig(format!(
                    "planted formula needs {lookback} days of history, panel has {days}"
                )));
            }
            let m = match evaluator.evaluate(tree, vocab, &panel, lookback..days)? {
                Evaluation::Valid(m) => m,
                Evaluation::Invalid { .. } => {
                    return Err(DataError::DegenerateConfig(
                        "planted formula does not evaluate on the synthetic panel".into(),
                    ))
                }
            };
            let z = zscore_daily(&m);
            for d in lookback..days {
                for a in 0..n {
                    let noise = normal(&mut rng);
                    values.set(d, a, z.values.get(d - lookback, a) + spec.noise_std * noise);
                }
            }
        }
    }
    Ok((
        panel,
        TargetMatrix {
            values,
            horizon: None,
        },
    ))
}

/// Train / validation / test day ranges over one panel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Range<usize>,
    pub valid: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    /// Ranges must be non-empty, ordered train < valid < test, and disjoint.
    pub fn new(
        train: Range<usize>,
        valid: Range<usize>,
        test: Range<usize>,
    ) -> Result<Splits, DataError> {
        for (name, r) in [("train", &train), ("valid", &valid), ("test", &test)] {
            if r.is_empty() {
                return Err(DataError::DegenerateConfig(format!(
                    "{name} split is empty"
                )));
            }
        }
        if train.end > valid.start || valid.end > test.start {
            return Err(DataError::DegenerateConfig(
                "splits must be ordered train < valid < test without overlap".into(),
            ));
        }
        Ok(Splits { train, valid, test })
    }

    /// Splits by fractions of the days after `warmup`.
    pub fn by_fraction(
        days: usize,
        warmup: usize,
        train: f64,
        valid: f64,
    ) -> Result<Splits, DataError> {
        if warmup >= days {
            return Err(DataError::DegenerateConfig(
                "warmup covers the whole panel".into(),
            ));
        }
        let usable = (days - warmup) as f64;
        let t_end = warmup + (usable * train).round() as usize;
        let v_end = t_end + (usable * valid).round() as usize;
        Splits::new(warmup..t_end, t_end..v_end, v_end..days)
    }
}
