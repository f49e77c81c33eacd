//! Combines selected factors into one composite score.
//!
//! Each factor is z-scored across instruments day by day, then merged either
//! with equal weights or with a ridge regression fitted on training rows
//! against forward returns. Predictions produced elsewhere can be imported
//! as long-format CSV.

use std::collections::HashMap;
use std::ops::Range;
use std::path::Path;
use std::sync::Arc;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{evaluate_batch, SignalMatrix};
use crate::io_util::{csv_number, write_atomic};
use crate::metrics::pearson;
use crate::panel::{DateSplit, ForwardReturns, Panel, TradingCalendar, Universe};
use crate::pool::FactorRecord;

#[derive(Debug, Error)]
pub enum CombinerError {
    #[error("no factors to combine")]
    NoFactors,
    #[error("no usable training rows")]
    NoUsableRows,
    #[error("{rows} training rows, need at least {needed}")]
    InsufficientRows { rows: usize, needed: usize },
    #[error("normal equations are singular")]
    SingularSystem,
    #[error("factor mismatch: {0}")]
    FactorMismatch(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("factor {0} does not parse")]
    BadExpression(String),
    #[error("prediction file: {0}")]
    Csv(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CombinerKind {
    EqualWeight,
    Ridge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CombinerConfig {
    pub kind: CombinerKind,
    /// Ridge penalty; the intercept is not penalized.
    pub lambda: f64,
    /// Number of top-strength effective factors to combine.
    pub top_k: usize,
}

impl Default for CombinerConfig {
    fn default() -> Self {
        Self {
            kind: CombinerKind::Ridge,
            lambda: 1.0,
            top_k: 10,
        }
    }
}

impl CombinerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err("lambda must be finite and non-negative".into());
        }
        if self.top_k == 0 {
            return Err("top_k must be at least 1".into());
        }
        Ok(())
    }
}

/// Per-day cross-sectional z-score `(v - mean) / std` with the population
/// standard deviation. Days with fewer than two valid values or a constant
/// cross-section become all NaN.
pub fn zscore_by_day(values: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::from_elem(values.dim(), f64::NAN);
    for (t, row) in values.outer_iter().enumerate() {
        let valid: Vec<f64> = row.iter().copied().filter(|v| v.is_finite()).collect();
        if valid.len() < 2 || valid.iter().all(|v| *v == valid[0]) {
            continue;
        }
        let n = valid.len() as f64;
        let mean = valid.iter().sum::<f64>() / n;
        let sd = (valid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        for (j, v) in row.iter().enumerate() {
            if v.is_finite() {
                out[[t, j]] = (v - mean) / sd;
            }
        }
    }
    out
}

/// Z-scored signals of an ordered factor list over a whole panel.
#[derive(Debug, Clone)]
pub struct FactorFeatures {
    pub factor_ids: Vec<String>,
    pub calendar: Arc<TradingCalendar>,
    pub universe: Arc<Universe>,
    pub z: Vec<Array2<f64>>,
}

impl FactorFeatures {
    pub fn compute(factors: &[FactorRecord], panel: &Panel) -> Result<Self, CombinerError> {
        let exprs = factors
            .iter()
            .map(|f| f.expr().map_err(|_| CombinerError::BadExpression(f.id.clone())))
            .collect::<Result<Vec<_>, _>>()?;
        let signals = evaluate_batch(&exprs, panel);
        let ids = factors.iter().map(|f| f.id.clone()).collect();
        Self::from_signals(ids, &signals)
    }

    pub fn from_signals(factor_ids: Vec<String>, signals: &[SignalMatrix]) -> Result<Self, CombinerError> {
        let first = signals.first().ok_or(CombinerError::NoFactors)?;
        if factor_ids.len() != signals.len() {
            return Err(CombinerError::FactorMismatch(format!(
                "{} ids for {} signals",
                factor_ids.len(),
                signals.len()
            )));
        }
        if signals.iter().any(|s| s.values.dim() != first.values.dim()) {
            return Err(CombinerError::ShapeMismatch("signals differ in shape".into()));
        }
        Ok(Self {
            factor_ids,
            calendar: first.calendar.clone(),
            universe: first.universe.clone(),
            z: signals.iter().map(|s| zscore_by_day(&s.values)).collect(),
        })
    }

    pub fn k(&self) -> usize {
        self.z.len()
    }

    fn cell(&self, t: usize, j: usize) -> Option<Vec<f64>> {
        let x: Vec<f64> = self.z.iter().map(|m| m[[t, j]]).collect();
        x.iter().all(|v| v.is_finite()).then_some(x)
    }

    /// Training rows from the given date rows: every cell whose features and
    /// target are all defined, in row-major order.
    pub fn rows(&self, returns: &ForwardReturns, rows: Range<usize>) -> Result<FeatureAssembly, CombinerError> {
        if returns.values.dim() != self.z[0].dim() {
            return Err(CombinerError::ShapeMismatch(format!(
                "features {:?} vs returns {:?}",
                self.z[0].dim(),
                returns.values.dim()
            )));
        }
        let mut out = FeatureAssembly {
            factor_ids: self.factor_ids.clone(),
            cells: Vec::new(),
            x: Vec::new(),
            y: Vec::new(),
        };
        for t in rows {
            for j in 0..self.universe.len() {
                let y = returns.values[[t, j]];
                if !y.is_finite() {
                    continue;
                }
                if let Some(x) = self.cell(t, j) {
                    out.cells.push((t, j));
                    out.x.push(x);
                    out.y.push(y);
                }
            }
        }
        Ok(out)
    }
}

/// Feature rows `x` with targets `y` for cells `(date row, instrument)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureAssembly {
    pub factor_ids: Vec<String>,
    pub cells: Vec<(usize, usize)>,
    pub x: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl FeatureAssembly {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct SplitAssembly {
    pub features: FactorFeatures,
    pub train: FeatureAssembly,
    pub valid: FeatureAssembly,
    pub test: FeatureAssembly,
}

/// Evaluates `factors` on the full panel and cuts rows by `split`.
pub fn assemble(
    factors: &[FactorRecord],
    panel: &Panel,
    returns: &ForwardReturns,
    split: &DateSplit,
) -> Result<SplitAssembly, CombinerError> {
    if factors.is_empty() {
        return Err(CombinerError::NoFactors);
    }
    let features = FactorFeatures::compute(factors, panel)?;
    let cal = panel.calendar();
    let train = features.rows(returns, cal.rows_in(&split.train))?;
    if train.is_empty() {
        return Err(CombinerError::NoUsableRows);
    }
    let valid = features.rows(returns, cal.rows_in(&split.valid))?;
    let test = features.rows(returns, cal.rows_in(&split.test))?;
    Ok(SplitAssembly {
        features,
        train,
        valid,
        test,
    })
}

/// Fitted combination parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinerModel {
    pub kind: CombinerKind,
    pub factor_ids: Vec<String>,
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub lambda: f64,
}

impl CombinerModel {
    pub fn equal_weight(factor_ids: Vec<String>) -> Self {
        let k = factor_ids.len().max(1) as f64;
        Self {
            kind: CombinerKind::EqualWeight,
            weights: vec![1.0 / k; factor_ids.len()],
            factor_ids,
            intercept: 0.0,
            lambda: 0.0,
        }
    }

    pub fn score(&self, x: &[f64]) -> f64 {
        self.intercept + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    /// Penalized squared error `sum (y - score)^2 + lambda * |w|^2`.
    pub fn ridge_objective(&self, data: &FeatureAssembly, lambda: f64) -> f64 {
        let sse: f64 = data
            .x
            .iter()
            .zip(&data.y)
            .map(|(x, y)| (y - self.score(x)).powi(2))
            .sum();
        sse + lambda * self.weights.iter().map(|w| w * w).sum::<f64>()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedCombiner {
    pub model: CombinerModel,
    /// Mean daily IC of the model on the validation rows.
    pub validation_ic: Option<f64>,
}

fn fit_ridge(data: &FeatureAssembly, lambda: f64) -> Result<CombinerModel, CombinerError> {
    let k = data.factor_ids.len();
    let p = k + 1;
    if data.len() < p {
        return Err(CombinerError::InsufficientRows {
            rows: data.len(),
            needed: p,
        });
    }
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    let mut row = vec![1.0; p];
    for (x, y) in data.x.iter().zip(&data.y) {
        row[..k].copy_from_slice(x);
        for a in 0..p {
            rhs[a] += row[a] * y;
            for b in a..p {
                gram[(a, b)] += row[a] * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    for a in 0..k {
        gram[(a, a)] += lambda;
    }
    let svd = gram.svd(true, true);
    let smax = svd.singular_values.max();
    let tol = smax * 1e-12 * p as f64;
    if !(smax > 0.0) || svd.singular_values.min() <= tol {
        return Err(CombinerError::SingularSystem);
    }
    let beta = svd.solve(&rhs, tol).map_err(|_| CombinerError::SingularSystem)?;
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(CombinerError::SingularSystem);
    }
    Ok(CombinerModel {
        kind: CombinerKind::Ridge,
        factor_ids: data.factor_ids.clone(),
        weights: beta.iter().take(k).copied().collect(),
        intercept: beta[k],
        lambda,
    })
}

/// Mean over days (with at least three cells) of the Pearson correlation
/// between model scores and targets.
pub fn mean_daily_ic(model: &CombinerModel, data: &FeatureAssembly) -> Option<f64> {
    let mut ics = Vec::new();
    let mut i = 0;
    while i < data.len() {
        let day = data.cells[i].0;
        let mut pred = Vec::new();
        let mut target = Vec::new();
        while i < data.len() && data.cells[i].0 == day {
            pred.push(model.score(&data.x[i]));
            target.push(data.y[i]);
            i += 1;
        }
        if pred.len() >= 3 {
            if let Some(c) = pearson(&pred, &target) {
                ics.push(c);
            }
        }
    }
    (!ics.is_empty()).then(|| ics.iter().sum::<f64>() / ics.len() as f64)
}

/// Fits the combiner on `train`; `valid` only feeds the reported IC.
pub fn train(
    train: &FeatureAssembly,
    valid: Option<&FeatureAssembly>,
    cfg: &CombinerConfig,
) -> Result<TrainedCombiner, CombinerError> {
    if train.factor_ids.is_empty() {
        return Err(CombinerError::NoFactors);
    }
    let model = match cfg.kind {
        CombinerKind::EqualWeight => CombinerModel::equal_weight(train.factor_ids.clone()),
        CombinerKind::Ridge => fit_ridge(train, cfg.lambda)?,
    };
    let validation_ic = valid.and_then(|v| mean_daily_ic(&model, v));
    Ok(TrainedCombiner {
        model,
        validation_ic,
    })
}

/// Composite signal over every cell of `features`; NaN where any input is.
pub fn predict(model: &CombinerModel, features: &FactorFeatures) -> Result<SignalMatrix, CombinerError> {
    if model.factor_ids != features.factor_ids {
        return Err(CombinerError::FactorMismatch(format!(
            "model expects {:?}, features carry {:?}",
            model.factor_ids, features.factor_ids
        )));
    }
    let (t_len, n) = features.z[0].dim();
    let mut out = Array2::from_elem((t_len, n), f64::NAN);
    for t in 0..t_len {
        for j in 0..n {
            if let Some(x) = features.cell(t, j) {
                out[[t, j]] = model.score(&x);
            }
        }
    }
    Ok(SignalMatrix::new(
        features.calendar.clone(),
        features.universe.clone(),
        out,
    ))
}

/// Long-format `date,symbol,score` text; undefined cells are omitted.
pub fn predictions_to_csv(scores: &SignalMatrix) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["date", "symbol", "score"]).expect("in-memory write");
    for (t, d) in scores.calendar.dates().iter().enumerate() {
        for (j, sym) in scores.universe.ids().iter().enumerate() {
            let v = scores.values[[t, j]];
            if v.is_nan() {
                continue;
            }
            w.write_record([d.format("%Y-%m-%d").to_string(), sym.clone(), csv_number(v)])
                .expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

pub fn write_predictions(scores: &SignalMatrix, path: &Path) -> Result<(), CombinerError> {
    write_atomic(path, predictions_to_csv(scores).as_bytes())?;
    Ok(())
}

/// Reads long-format predictions onto the given calendar and universe.
/// Cells absent from the file are NaN; unknown dates or symbols are errors.
pub fn read_predictions(
    reader: impl std::io::Read,
    calendar: Arc<TradingCalendar>,
    universe: Arc<Universe>,
) -> Result<SignalMatrix, CombinerError> {
    let rows: HashMap<NaiveDate, usize> =
        calendar.dates().iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let cols: HashMap<&str, usize> =
        universe.ids().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut values = Array2::from_elem((calendar.len(), universe.len()), f64::NAN);
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers().map_err(|e| CombinerError::Csv(e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>() != ["date", "symbol", "score"] {
        return Err(CombinerError::Csv(format!("expected header date,symbol,score, got {headers:?}")));
    }
    for (i, rec) in r.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| CombinerError::Csv(format!("line {line}: {e}")))?;
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d")
            .map_err(|e| CombinerError::Csv(format!("line {line}: {e}")))?;
        let t = *rows
            .get(&date)
            .ok_or_else(|| CombinerError::Csv(format!("line {line}: date {date} not in calendar")))?;
        let j = *cols
            .get(&rec[1])
            .ok_or_else(|| CombinerError::Csv(format!("line {line}: unknown symbol {}", &rec[1])))?;
        let v = if rec[2].is_empty() {
            f64::NAN
        } else {
            rec[2]
                .parse::<f64>()
                .map_err(|e| CombinerError::Csv(format!("line {line}: {e}")))?
        };
        values[[t, j]] = v;
    }
    Ok(SignalMatrix::new(calendar, universe, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn zscore_hand_case() {
        let z = zscore_by_day(&array![[1.0, 2.0, 3.0], [5.0, 5.0, 5.0], [1.0, f64::NAN, 3.0]]);
        let s = (2.0f64 / 3.0).sqrt();
        assert!((z[[0, 0]] + 1.0 / s).abs() < 1e-12);
        assert_eq!(z[[0, 1]], 0.0);
        assert!(z.row(1).iter().all(|v| v.is_nan()));
        assert_eq!(z[[2, 0]], -1.0);
        assert!(z[[2, 1]].is_nan());
        assert_eq!(z[[2, 2]], 1.0);
    }

    #[test]
    fn equal_weight_ignores_targets() {
        let mut a = FeatureAssembly {
            factor_ids: vec!["a".into(), "b".into()],
            cells: vec![(0, 0), (0, 1), (0, 2)],
            x: vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]],
            y: vec![0.1, 0.2, 0.3],
        };
        let cfg = CombinerConfig {
            kind: CombinerKind::EqualWeight,
            ..CombinerConfig::default()
        };
        let m1 = train(&a, None, &cfg).unwrap().model;
        a.y = vec![-5.0, 7.0, 0.0];
        assert_eq!(m1, train(&a, None, &cfg).unwrap().model);
        assert_eq!(m1.weights, vec![0.5, 0.5]);
    }

    #[test]
    fn ridge_needs_k_plus_one_rows() {
        let a = FeatureAssembly {
            factor_ids: vec!["a".into(), "b".into()],
            cells: vec![(0, 0), (0, 1)],
            x: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            y: vec![0.1, 0.2],
        };
        assert!(matches!(
            train(&a, None, &CombinerConfig::default()),
            Err(CombinerError::InsufficientRows { rows: 2, needed: 3 })
        ));
    }
}
