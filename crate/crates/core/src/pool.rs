//! The factor pool: accepted formulas, their combination weights, and the
//! combination IC that serves as the episode reward.

use std::io::{Read, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::{Panel, TargetMatrix};
use crate::error::{DataError, PoolError};
use crate::eval::{Evaluation, Evaluator, FactorMatrix};
use crate::expr::{parse_rpn, to_rpn, tokenize, ExprTree, TokenSequence};
use crate::grid::Grid;
use crate::metrics::{ic_series, zscore_daily, IcKind};
use crate::par::{map_indices, Exec};
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    pub lr: f64,
    pub steps: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            lr: 1e-2,
            steps: 500,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PoolEntry {
    pub tree: ExprTree,
    pub rpn: TokenSequence,
    /// Daily z-scored values on the training range, non-finite cells set to 0.
    pub cache: FactorMatrix,
    /// Mean IC of this factor alone on the training range.
    pub solo_ic: f64,
}

/// One exported pool record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolRecord {
    pub infix: String,
    pub rpn: String,
    pub weight: f64,
    pub ic: f64,
}

#[derive(Debug, Clone)]
pub struct FactorPool {
    entries: Vec<PoolEntry>,
    weights: Vec<f64>,
    capacity: usize,
    fit: FitConfig,
    train: Range<usize>,
    evaluator: Evaluator,
    exec: Exec,
    ic: f64,
    /// Target cells that take part in the fit, and the Gram matrix of the
    /// cached factors over those cells.
    gram_mask: Vec<bool>,
    gram: Vec<Vec<f64>>,
}

impl FactorPool {
    pub fn new(
        capacity: usize,
        fit: FitConfig,
        train: Range<usize>,
        evaluator: Evaluator,
    ) -> FactorPool {
        FactorPool {
            entries: Vec::new(),
            weights: Vec::new(),
            capacity,
            fit,
            train,
            exec: evaluator.exec,
            evaluator,
            ic: 0.0,
            gram_mask: Vec::new(),
            gram: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[PoolEntry] {
        &self.entries
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn train_days(&self) -> Range<usize> {
        self.train.clone()
    }

    /// Combination IC on the training range after the last admission.
    pub fn ic(&self) -> f64 {
        self.ic
    }

    pub fn contains(&self, rpn: &TokenSequence) -> bool {
        self.entries.iter().any(|e| e.rpn == *rpn)
    }

    /// Replaces the weights, e.g. when restoring a saved pool.
    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<(), PoolError> {
        if weights.len() != self.entries.len() {
            return Err(PoolError::Shape(format!(
                "{} weights for {} entries",
                weights.len(),
                self.entries.len()
            )));
        }
        self.weights = weights;
        Ok(())
    }

    /// Weighted sum of the cached factor matrices.
    pub fn combination(&self) -> Result<FactorMatrix, PoolError> {
        let first = self.entries.first().ok_or(PoolError::EmptyPool)?;
        let (rows, cols) = (first.cache.values.rows(), first.cache.values.cols());
        let mut out = Grid::zeros(rows, cols);
        for (e, &w) in self.entries.iter().zip(&self.weights) {
            for (o, v) in out.as_mut_slice().iter_mut().zip(e.cache.values.as_slice()) {
                *o += w * v;
            }
        }
        Ok(FactorMatrix {
            start: first.cache.start,
            values: out,
        })
    }

    fn fit_mask(&self, y: &TargetMatrix) -> Result<Vec<bool>, PoolError> {
        if y.values.rows() < self.train.end {
            return Err(PoolError::Shape(format!(
                "targets cover {} days, training range ends at {}",
                y.values.rows(),
                self.train.end
            )));
        }
        Ok(y.values
            .slice_rows(self.train.start, self.train.end)
            .as_slice()
            .iter()
            .map(|v| v.is_finite())
            .collect())
    }

    fn masked_dot(mask: &[bool], a: &[f64], b: &[f64]) -> f64 {
        let mut s = 0.0;
        for ((&m, &x), &y) in mask.iter().zip(a).zip(b) {
            if m {
                s += x * y;
            }
        }
        s
    }

    fn refresh_gram(&mut self, mask: Vec<bool>) {
        if mask != self.gram_mask {
            self.gram_mask = mask;
            self.gram.clear();
        }
        while self.gram.len() < self.entries.len() {
            let i = self.gram.len();
            let mask = &self.gram_mask;
            let entries = &self.entries;
            let row = map_indices(self.exec, i + 1, |j| {
                Self::masked_dot(
                    mask,
                    entries[i].cache.values.as_slice(),
                    entries[j].cache.values.as_slice(),
                )
            });
            for (j, &v) in row[..i].iter().enumerate() {
                self.gram[j].push(v);
            }
            self.gram.push(row);
        }
    }

    /// Full-batch gradient descent on the mean squared error between the
    /// combination and the targets, starting from the current weights.
    /// Returns the final loss; on failure the weights are left unchanged.
    pub fn fit_weights(&mut self, y: &TargetMatrix) -> Result<f64, PoolError> {
        if self.entries.is_empty() {
            return Err(PoolError::EmptyPool);
        }
        let mask = self.fit_mask(y)?;
        self.refresh_gram(mask);
        let cells = self.gram_mask.iter().filter(|&&m| m).count();
        if cells == 0 {
            return Err(PoolError::Shape(
                "no finite targets in the training range".into(),
            ));
        }
        let scale = 1.0 / cells as f64;
        let ys: Vec<f64> = y
            .values
            .slice_rows(self.train.start, self.train.end)
            .as_slice()
            .iter()
            .map(|v| if v.is_finite() { *v } else { 0.0 })
            .collect();
        let b: Vec<f64> = self
            .entries
            .iter()
            .map(|e| Self::masked_dot(&self.gram_mask, e.cache.values.as_slice(), &ys) * scale)
            .collect();
        let c = Self::masked_dot(&self.gram_mask, &ys, &ys) * scale;
        let g: Vec<Vec<f64>> = self
            .gram
            .iter()
            .map(|r| r.iter().map(|v| v * scale).collect())
            .collect();
        let k = self.entries.len();

        let loss_of = |w: &[f64], gw: &[f64]| -> f64 {
            let quad: f64 = w.iter().zip(gw).map(|(a, b)| a * b).sum();
            let lin: f64 = w.iter().zip(&b).map(|(a, b)| a * b).sum();
            (quad - 2.0 * lin + c).max(0.0)
        };
        let mut w = self.weights.clone();
        let mut gw = vec![0.0; k];
        let mut loss = f64::NAN;
        for _ in 0..=self.fit.steps {
            for i in 0..k {
                gw[i] = g[i].iter().zip(&w).map(|(a, b)| a * b).sum();
            }
            loss = loss_of(&w, &gw);
            if !loss.is_finite() {
                return Err(PoolError::NonFiniteLoss);
            }
            for i in 0..k {
                w[i] -= self.fit.lr * 2.0 * (gw[i] - b[i]);
            }
        }
        // the last pass only measured the loss of the final weights
        for i in 0..k {
            w[i] += self.fit.lr * 2.0 * (gw[i] - b[i]);
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(PoolError::NonFiniteLoss);
        }
        self.weights = w;
        Ok(loss)
    }

    /// Evaluates, z-scores and checks a candidate on the training range.
    pub fn prepare(
        &self,
        tree: &ExprTree,
        vocab: &Vocabulary,
        panel: &Panel,
        y: &TargetMatrix,
    ) -> Result<PoolEntry, PoolError> {
        let m = match self
            .evaluator
            .evaluate(tree, vocab, panel, self.train.clone())
        {
            Ok(Evaluation::Valid(m)) => m,
            Ok(Evaluation::Invalid { nonfinite_fraction }) => {
                return Err(PoolError::InvalidCandidate(format!(
                    "{:.1}% non-finite values",
                    100.0 * nonfinite_fraction
                )))
            }
            Err(e) => return Err(PoolError::InvalidCandidate(e.to_string())),
        };
        let mut cache = zscore_daily(&m);
        for v in cache.values.as_mut_slice() {
            if !v.is_finite() {
                *v = 0.0;
            }
        }
        if cache.values.as_slice().iter().all(|&v| v == 0.0) {
            return Err(PoolError::InvalidCandidate(
                "constant across assets on every day".into(),
            ));
        }
        let solo_ic = ic_series(&cache, y, self.train.clone(), IcKind::Pearson, self.exec)
            .map(|s| s.mean)
            .map_err(|e| PoolError::InvalidCandidate(e.to_string()))?;
        Ok(PoolEntry {
            tree: tree.clone(),
            rpn: to_rpn(tree, vocab),
            cache,
            solo_ic,
        })
    }

    /// Adds a candidate, refits, evicts the weakest factor when over capacity
    /// and returns the combination's mean IC on the training range.
    pub fn admit(
        &mut self,
        tree: &ExprTree,
        vocab: &Vocabulary,
        panel: &Panel,
        y: &TargetMatrix,
    ) -> Result<f64, PoolError> {
        let rpn = to_rpn(tree, vocab);
        if self.contains(&rpn) {
            return Ok(self.ic);
        }
        let entry = self.prepare(tree, vocab, panel, y)?;
        self.insert(entry, y)
    }

    /// Adds an already prepared entry; see [`FactorPool::admit`].
    pub fn insert(&mut self, entry: PoolEntry, y: &TargetMatrix) -> Result<f64, PoolError> {
        if self.contains(&entry.rpn) {
            return Ok(self.ic);
        }
        let saved_weights = self.weights.clone();
        self.entries.push(entry);
        self.weights.push(0.0);
        if let Err(e) = self.fit_weights(y) {
            self.remove(self.entries.len() - 1);
            self.weights = saved_weights;
            return Err(e);
        }
        if self.entries.len() > self.capacity {
            self.evict_weakest();
            if !self.entries.is_empty() {
                self.fit_weights(y)?;
            }
        }
        self.ic = self.combination_ic(y);
        Ok(self.ic)
    }

    fn combination_ic(&self, y: &TargetMatrix) -> f64 {
        match self.combination() {
            Ok(z) => ic_series(&z, y, self.train.clone(), IcKind::Pearson, self.exec)
                .map(|s| s.mean)
                .unwrap_or(0.0),
            Err(_) => 0.0,
        }
    }

    fn remove(&mut self, index: usize) -> PoolEntry {
        if index < self.gram.len() {
            self.gram.remove(index);
            for row in &mut self.gram {
                if index < row.len() {
                    row.remove(index);
                }
            }
        }
        self.weights.remove(index);
        self.entries.remove(index)
    }

    /// Removes the entry with the smallest |weight|; the oldest wins ties.
    pub fn evict_weakest(&mut self) -> Option<(PoolEntry, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for (i, w) in self.weights.iter().enumerate() {
            if best.map_or(true, |(_, b)| w.abs() < b) {
                best = Some((i, w.abs()));
            }
        }
        let (i, _) = best?;
        let w = self.weights[i];
        Some((self.remove(i), w))
    }

    /// Values of the weighted combination on `days`, evaluated afresh with
    /// the current weights held fixed.
    pub fn combination_on(
        &self,
        vocab: &Vocabulary,
        panel: &Panel,
        days: Range<usize>,
    ) -> Result<FactorMatrix, PoolError> {
        if self.entries.is_empty() {
            return Err(PoolError::EmptyPool);
        }
        let evaluator = self.evaluator.with_nan_tolerance(1.0);
        let mut out = Grid::zeros(days.len(), panel.n_assets());
        for (e, &w) in self.entries.iter().zip(&self.weights) {
            let m = match evaluator.evaluate(&e.tree, vocab, panel, days.clone()) {
                Ok(Evaluation::Valid(m)) => m,
                Ok(Evaluation::Invalid { .. }) => unreachable!("tolerance admits everything"),
                Err(err) => return Err(PoolError::InvalidCandidate(err.to_string())),
            };
            let z = zscore_daily(&m);
            for (o, v) in out.as_mut_slice().iter_mut().zip(z.values.as_slice()) {
                if v.is_finite() {
                    *o += w * v;
                }
            }
        }
        Ok(FactorMatrix {
            start: days.start,
            values: out,
        })
    }

    pub fn records(&self, vocab: &Vocabulary) -> Vec<PoolRecord> {
        self.entries
            .iter()
            .zip(&self.weights)
            .map(|(e, &w)| PoolRecord {
                infix: e.tree.to_infix(vocab),
                rpn: e.rpn.to_text(vocab),
                weight: w,
                ic: e.solo_ic,
            })
            .collect()
    }

    /// Rebuilds a pool from saved records, re-evaluating every factor.
    #[allow(clippy::too_many_arguments)]
    pub fn restore(
        records: &[PoolRecord],
        capacity: usize,
        fit: FitConfig,
        train: Range<usize>,
        evaluator: Evaluator,
        vocab: &Vocabulary,
        panel: &Panel,
        y: &TargetMatrix,
    ) -> Result<FactorPool, PoolError> {
        let mut pool = FactorPool::new(capacity, fit, train, evaluator);
        for r in records {
            let tree = tokenize(&r.rpn, vocab)
                .and_then(|s| parse_rpn(&s, vocab))
                .map_err(|e| PoolError::InvalidCandidate(e.to_string()))?;
            let entry = pool.prepare(&tree, vocab, panel, y)?;
            pool.entries.push(entry);
            pool.weights.push(r.weight);
        }
        if !pool.entries.is_empty() {
            pool.ic = pool.combination_ic(y);
        }
        Ok(pool)
    }
}

/// Writes pool records as CSV with header `infix,rpn,weight,ic`.
pub fn write_pool<W: Write>(records: &[PoolRecord], out: W) -> Result<(), DataError> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(["infix", "rpn", "weight", "ic"])?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_pool<R: Read>(input: R) -> Result<Vec<PoolRecord>, DataError> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for rec in reader.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}
