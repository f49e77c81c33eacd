//! Factor and strategy metrics.
//!
//! Cross-sectional statistics are computed per day over the instruments where
//! both inputs are defined. Degenerate days (too few pairs, or no dispersion
//! on either side) are left out of the series rather than recorded as NaN.

use std::cmp::Ordering;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::{Array2, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::SignalMatrix;
use crate::io_util::{csv_number, write_atomic};
use crate::panel::ForwardReturns;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("series has {0} values, at least 2 are required")]
    SeriesTooShort(usize),
    #[error("series has zero dispersion")]
    ZeroDispersion,
    #[error("fewer than two days with enough valid signals")]
    InsufficientDays,
    #[error("series is empty")]
    EmptySeries,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub min_valid_pairs: usize,
    /// Share of scorable days (at least `min_valid_pairs` valid returns) on
    /// which a factor's RankIC must be defined for it to be scored at all.
    pub min_day_coverage: f64,
    pub k_fraction: f64,
    pub annualization: u32,
    pub diversity_k: usize,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            min_valid_pairs: 3,
            min_day_coverage: 0.5,
            k_fraction: 0.10,
            annualization: 252,
            diversity_k: 1,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_valid_pairs < 2 {
            return Err("min_valid_pairs must be at least 2".into());
        }
        if !(self.min_day_coverage >= 0.0 && self.min_day_coverage <= 1.0) {
            return Err("min_day_coverage must lie in [0, 1]".into());
        }
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err("k_fraction must lie in (0, 1]".into());
        }
        if self.annualization < 1 {
            return Err("annualization must be at least 1".into());
        }
        if self.diversity_k < 1 {
            return Err("diversity_k must be at least 1".into());
        }
        Ok(())
    }

    /// Size of the top set for `n` instruments: `max(1, floor(k_fraction * n))`.
    pub fn top_k(&self, n: usize) -> usize {
        ((self.k_fraction * n as f64).floor() as usize).max(1)
    }
}

/// A statistic observed on a subset of trading days.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DailySeries {
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

impl DailySeries {
    pub fn new(dates: Vec<NaiveDate>, values: Vec<f64>) -> Self {
        debug_assert_eq!(dates.len(), values.len());
        Self { dates, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> Result<f64, MetricError> {
        if self.values.is_empty() {
            return Err(MetricError::EmptySeries);
        }
        Ok(self.values.iter().sum::<f64>() / self.values.len() as f64)
    }

    /// Two-column `date,value` CSV.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("date,value\n");
        for (d, v) in self.dates.iter().zip(&self.values) {
            out.push_str(&format!("{},{}\n", d.format("%Y-%m-%d"), csv_number(*v)));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        write_atomic(path, self.to_csv_string().as_bytes())
    }
}

fn check_shapes(a: &Array2<f64>, b: &Array2<f64>, dates: usize) -> Result<(), MetricError> {
    if a.dim() != b.dim() || a.nrows() != dates {
        return Err(MetricError::ShapeMismatch(format!(
            "{:?} vs {:?} over {} dates",
            a.dim(),
            b.dim(),
            dates
        )));
    }
    Ok(())
}

/// Average 1-based ranks; tied values share the mean of their positions.
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
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn constant(x: &[f64]) -> bool {
    x.iter().all(|v| *v == x[0])
}

/// Pearson correlation, or None for fewer than two points or zero dispersion.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() < 2 || constant(x) || constant(y) {
        return None;
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    let r = sxy / (sxx * syy).sqrt();
    r.is_finite().then(|| r.clamp(-1.0, 1.0))
}

fn valid_pairs(a: ArrayView1<f64>, b: ArrayView1<f64>) -> (Vec<f64>, Vec<f64>) {
    a.iter()
        .zip(b.iter())
        .filter(|(x, y)| !x.is_nan() && !y.is_nan())
        .map(|(x, y)| (*x, *y))
        .unzip()
}

/// Correlation of one day's cross-section, None if the day is degenerate.
fn day_corr(
    a: ArrayView1<f64>,
    b: ArrayView1<f64>,
    min_pairs: usize,
    ranked: bool,
) -> Option<f64> {
    let (x, y) = valid_pairs(a, b);
    if x.len() < min_pairs {
        return None;
    }
    if ranked {
        if constant(&x) || constant(&y) {
            return None;
        }
        pearson(&average_ranks(&x), &average_ranks(&y))
    } else {
        pearson(&x, &y)
    }
}

fn daily_corr(
    a: &Array2<f64>,
    b: &Array2<f64>,
    dates: &[NaiveDate],
    cfg: &MetricConfig,
    ranked: bool,
) -> Result<DailySeries, MetricError> {
    check_shapes(a, b, dates.len())?;
    let mut out = DailySeries::default();
    for (t, date) in dates.iter().enumerate() {
        if let Some(r) = day_corr(a.row(t), b.row(t), cfg.min_valid_pairs, ranked) {
            out.dates.push(*date);
            out.values.push(r);
        }
    }
    Ok(out)
}

/// Per-day Pearson correlation between signal and forward returns.
pub fn daily_ic(
    signal: &SignalMatrix,
    returns: &ForwardReturns,
    cfg: &MetricConfig,
) -> Result<DailySeries, MetricError> {
    daily_corr(&signal.values, &returns.values, signal.calendar.dates(), cfg, false)
}

/// Per-day Spearman correlation between signal and forward returns.
pub fn daily_rank_ic(
    signal: &SignalMatrix,
    returns: &ForwardReturns,
    cfg: &MetricConfig,
) -> Result<DailySeries, MetricError> {
    daily_corr(&signal.values, &returns.values, signal.calendar.dates(), cfg, true)
}

/// Sample standard deviation (divisor `L - 1`).
fn sample_std(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// Mean over sample standard deviation; serves as ICIR and RankICIR.
pub fn ir_of_series(series: &DailySeries) -> Result<f64, MetricError> {
    if series.len() < 2 {
        return Err(MetricError::SeriesTooShort(series.len()));
    }
    if constant(&series.values) {
        return Err(MetricError::ZeroDispersion);
    }
    let sd = sample_std(&series.values);
    if sd == 0.0 || !sd.is_finite() {
        return Err(MetricError::ZeroDispersion);
    }
    Ok(series.mean()? / sd)
}

/// Indices of the `k` highest valid signals; ties go to the smaller identifier.
fn top_set(row: ArrayView1<f64>, ids: &[String], k: usize) -> Option<Vec<usize>> {
    let mut valid: Vec<usize> = (0..row.len()).filter(|&j| !row[j].is_nan()).collect();
    if valid.len() < k {
        return None;
    }
    valid.sort_by(|&a, &b| match row[b].total_cmp(&row[a]) {
        Ordering::Equal => ids[a].cmp(&ids[b]),
        o => o,
    });
    valid.truncate(k);
    valid.sort_unstable();
    Some(valid)
}

fn symmetric_difference(a: &[usize], b: &[usize]) -> usize {
    let common = a.iter().filter(|x| b.binary_search(x).is_ok()).count();
    a.len() + b.len() - 2 * common
}

/// Mean of `|TopK_t symmetric-difference TopK_{t-1}| / k` over consecutive
/// retained days. The result lies in `[0, 2]`.
pub fn factor_turnover(signal: &SignalMatrix, cfg: &MetricConfig) -> Result<f64, MetricError> {
    let k = cfg.top_k(signal.cols());
    let ids = signal.universe.ids();
    let sets: Vec<Vec<usize>> = signal
        .values
        .outer_iter()
        .filter_map(|row| top_set(row, ids, k))
        .collect();
    if sets.len() < 2 {
        return Err(MetricError::InsufficientDays);
    }
    let total: f64 = sets
        .windows(2)
        .map(|w| symmetric_difference(&w[0], &w[1]) as f64 / k as f64)
        .sum();
    Ok(total / (sets.len() - 1) as f64)
}

/// Mean over days of the cross-sectional Spearman correlation of two
/// signals; 0 when no day is usable.
pub fn mean_spearman(a: &SignalMatrix, b: &SignalMatrix, cfg: &MetricConfig) -> f64 {
    if a.values.dim() != b.values.dim() {
        return 0.0;
    }
    let days: Vec<f64> = (0..a.rows())
        .filter_map(|t| day_corr(a.values.row(t), b.values.row(t), cfg.min_valid_pairs, true))
        .collect();
    if days.is_empty() {
        0.0
    } else {
        days.iter().sum::<f64>() / days.len() as f64
    }
}

/// `1 - mean of the diversity_k largest |mean Spearman|` against the pool.
/// An empty pool gives 1.
pub fn diversity<'a>(
    candidate: &SignalMatrix,
    pool: impl IntoIterator<Item = &'a SignalMatrix>,
    cfg: &MetricConfig,
) -> f64 {
    let mut corrs: Vec<f64> = pool
        .into_iter()
        .map(|m| mean_spearman(candidate, m, cfg).abs())
        .collect();
    if corrs.is_empty() {
        return 1.0;
    }
    corrs.sort_by(|a, b| b.total_cmp(a));
    let k = cfg.diversity_k.max(1).min(corrs.len());
    let top = corrs[..k].iter().sum::<f64>() / k as f64;
    (1.0 - top).clamp(0.0, 1.0)
}

/// Arithmetic mean of daily returns times the annualization factor.
pub fn annualized_return(daily: &DailySeries, cfg: &MetricConfig) -> Result<f64, MetricError> {
    Ok(daily.mean()? * cfg.annualization as f64)
}

/// `mean * sqrt(P) / std` of daily returns.
pub fn information_ratio(daily: &DailySeries, cfg: &MetricConfig) -> Result<f64, MetricError> {
    if daily.len() < 2 {
        return Err(MetricError::SeriesTooShort(daily.len()));
    }
    if constant(&daily.values) {
        return Err(MetricError::ZeroDispersion);
    }
    let sd = sample_std(&daily.values);
    Ok(daily.mean()? * (cfg.annualization as f64).sqrt() / sd)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn series(values: &[f64]) -> DailySeries {
        let start = NaiveDate::from_ymd_opt(2021, 1, 4).unwrap();
        DailySeries::new(
            (0..values.len()).map(|i| start + chrono::Days::new(i as u64)).collect(),
            values.to_vec(),
        )
    }

    #[test]
    fn ir_hand_values() {
        assert_eq!(ir_of_series(&series(&[0.1, 0.1, 0.1])), Err(MetricError::ZeroDispersion));
        assert_eq!(ir_of_series(&series(&[0.1])), Err(MetricError::SeriesTooShort(1)));
        assert_abs_diff_eq!(ir_of_series(&series(&[0.0, 0.2])).unwrap(), 0.707107, epsilon = 1e-6);
        let a = ir_of_series(&series(&[0.01, 0.03, -0.02, 0.05])).unwrap();
        let b = ir_of_series(&series(&[0.02, 0.06, -0.04, 0.10])).unwrap();
        assert_abs_diff_eq!(a, b, epsilon = 1e-12);
    }

    #[test]
    fn information_ratio_hand_value() {
        // mean 0.001, sample std 0.01
        let s = series(&[
            0.001 + 0.01 / 2f64.sqrt(),
            0.001 - 0.01 / 2f64.sqrt(),
        ]);
        let ir = information_ratio(&s, &MetricConfig::default()).unwrap();
        assert_abs_diff_eq!(ir, 1.5875, epsilon = 1e-4);
        assert_eq!(
            information_ratio(&series(&[0.01; 5]), &MetricConfig::default()),
            Err(MetricError::ZeroDispersion)
        );
    }

    #[test]
    fn annualized_return_definition() {
        let cfg = MetricConfig::default();
        assert_abs_diff_eq!(annualized_return(&series(&[0.002; 10]), &cfg).unwrap(), 0.504, epsilon = 1e-12);
        assert_eq!(annualized_return(&series(&[0.0; 4]), &cfg).unwrap(), 0.0);
        assert_eq!(annualized_return(&series(&[]), &cfg), Err(MetricError::EmptySeries));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
        assert_eq!(average_ranks(&[]), Vec::<f64>::new());
    }

    #[test]
    fn top_k_floor_with_minimum_one() {
        let cfg = MetricConfig::default();
        assert_eq!(cfg.top_k(5), 1);
        assert_eq!(cfg.top_k(50), 5);
        assert_eq!(cfg.top_k(59), 5);
    }

    #[test]
    fn csv_export() {
        let s = series(&[0.5, -0.25]);
        assert_eq!(s.to_csv_string(), "date,value\n2021-01-04,0.5\n2021-01-05,-0.25\n");
    }
}
