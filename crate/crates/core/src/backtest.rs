//! Long-only top-k/drop-n strategy with daily rebalancing and trading costs.
//!
//! At each close the instruments with valid scores are ranked (higher is
//! better, ties to the lower instrument index). The target set is the top
//! `k = max(1, floor(k_fraction * valid))`. At most `n = ceil(k / horizon)`
//! held names outside the target are sold, worst first, and as many target
//! names as there are free slots are bought, best first, again at most `n`.
//! Holdings are equal-weighted and earn the next close-to-close return.
//! Costs of trades at close `t` are deducted from the return of day `t + 1`
//! in proportion to the traded weight.

use std::collections::BTreeSet;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::SignalMatrix;
use crate::expr::Field;
use crate::io_util::{csv_number, write_atomic};
use crate::metrics::{annualized_return, information_ratio, DailySeries, MetricConfig};
use crate::panel::Panel;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{days} days is too few, need at least {needed}")]
    TooFewDays { days: usize, needed: usize },
    #[error("strategy and benchmark share no dates")]
    NoOverlap,
    #[error("no day has a valid score")]
    NoScores,
    #[error("invalid strategy configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StrategyConfig {
    pub k_fraction: f64,
    /// Holding horizon `w`; at most `ceil(k / w)` names trade per day.
    pub horizon: usize,
    pub open_cost: f64,
    pub close_cost: f64,
    /// Fill empty slots at once instead of `n` names per day.
    pub instant_fill: bool,
    pub annualization: u32,
    /// External benchmark returns; the equal-weight universe when absent.
    #[serde(skip)]
    pub benchmark: Option<DailySeries>,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            k_fraction: 0.10,
            horizon: 10,
            open_cost: 0.0003,
            close_cost: 0.001,
            instant_fill: false,
            annualization: 252,
            benchmark: None,
        }
    }
}

impl StrategyConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.k_fraction > 0.0 && self.k_fraction <= 1.0) {
            return Err("k_fraction must be in (0, 1]".into());
        }
        if self.horizon == 0 {
            return Err("horizon must be at least 1".into());
        }
        if !(self.open_cost >= 0.0 && self.close_cost >= 0.0) {
            return Err("costs must be non-negative".into());
        }
        if self.annualization == 0 {
            return Err("annualization must be positive".into());
        }
        Ok(())
    }
}

/// Trades decided at one close and the resulting holdings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HoldingsDay {
    pub date: NaiveDate,
    pub held: Vec<String>,
    pub bought: Vec<String>,
    pub sold: Vec<String>,
    /// Sales forced by a missing price or a shrinking target, outside the cap.
    pub forced: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestReport {
    /// Net of costs, dated by the close at which the return is realised.
    pub daily_returns: DailySeries,
    pub gross_returns: DailySeries,
    pub costs: DailySeries,
    /// `prod(1 + r) - 1` up to each date.
    pub cumulative: DailySeries,
    pub benchmark: DailySeries,
    pub excess_cumulative: DailySeries,
    pub annualized_return: f64,
    pub information_ratio: f64,
    pub excess_annualized_return: f64,
    pub excess_information_ratio: f64,
    /// Mean daily bought plus sold weight.
    pub realized_turnover: f64,
    pub holdings: Vec<HoldingsDay>,
}

fn compound(daily: &DailySeries) -> DailySeries {
    let mut wealth = 1.0;
    let values = daily
        .values
        .iter()
        .map(|r| {
            wealth *= 1.0 + r;
            wealth - 1.0
        })
        .collect();
    DailySeries::new(daily.dates.clone(), values)
}

/// Daily strategy minus benchmark returns on shared dates, compounded.
pub fn excess_series(daily: &DailySeries, benchmark: &DailySeries) -> Result<DailySeries, BacktestError> {
    Ok(compound(&excess_daily(daily, benchmark)?))
}

fn excess_daily(daily: &DailySeries, benchmark: &DailySeries) -> Result<DailySeries, BacktestError> {
    let bench: std::collections::HashMap<NaiveDate, f64> = benchmark
        .dates
        .iter()
        .copied()
        .zip(benchmark.values.iter().copied())
        .collect();
    let (dates, values): (Vec<NaiveDate>, Vec<f64>) = daily
        .dates
        .iter()
        .zip(&daily.values)
        .filter_map(|(d, r)| bench.get(d).map(|b| (*d, r - b)))
        .unzip();
    if dates.is_empty() {
        return Err(BacktestError::NoOverlap);
    }
    Ok(DailySeries::new(dates, values))
}

/// Close-to-close return of instrument `j` into row `t`; NaN if either price is.
fn close_return(close: &ndarray::Array2<f64>, t: usize, j: usize) -> f64 {
    let (a, b) = (close[[t - 1, j]], close[[t, j]]);
    if a.is_finite() && b.is_finite() && a > 0.0 {
        b / a - 1.0
    } else {
        f64::NAN
    }
}

/// Equal-weight mean return of all instruments priced on both days.
pub fn equal_weight_benchmark(panel: &Panel, rows: std::ops::Range<usize>) -> DailySeries {
    let close = panel.field(Field::Close);
    let mut dates = Vec::new();
    let mut values = Vec::new();
    for t in rows.filter(|t| *t >= 1) {
        let rs: Vec<f64> = (0..panel.cols())
            .map(|j| close_return(close, t, j))
            .filter(|r| r.is_finite())
            .collect();
        dates.push(panel.dates()[t]);
        values.push(if rs.is_empty() { 0.0 } else { rs.iter().sum::<f64>() / rs.len() as f64 });
    }
    DailySeries::new(dates, values)
}

/// `(score desc, id asc)`; NaN scores rank below everything.
fn better(scores: &[f64], a: usize, b: usize) -> std::cmp::Ordering {
    let key = |i: usize| if scores[i].is_finite() { scores[i] } else { f64::NEG_INFINITY };
    key(b).total_cmp(&key(a)).then(a.cmp(&b))
}

pub fn run_backtest(
    scores: &SignalMatrix,
    panel: &Panel,
    cfg: &StrategyConfig,
) -> Result<BacktestReport, BacktestError> {
    cfg.validate().map_err(BacktestError::InvalidConfig)?;
    if scores.values.dim() != (panel.rows(), panel.cols()) || scores.calendar.dates() != panel.dates() {
        return Err(BacktestError::ShapeMismatch(format!(
            "scores {:?} vs panel {:?}",
            scores.values.dim(),
            (panel.rows(), panel.cols())
        )));
    }
    let t_len = panel.rows();
    let needed = cfg.horizon + 2;
    if t_len < needed {
        return Err(BacktestError::TooFewDays { days: t_len, needed });
    }
    let close = panel.field(Field::Close);
    let ids = panel.universe().ids();
    let name = |v: &[usize]| v.iter().map(|&j| ids[j].clone()).collect::<Vec<_>>();

    let first = (0..t_len - 1)
        .find(|&t| (0..panel.cols()).any(|j| scores.values[[t, j]].is_finite() && close[[t, j]].is_finite()))
        .ok_or(BacktestError::NoScores)?;

    let mut held: BTreeSet<usize> = BTreeSet::new();
    let mut dates = Vec::new();
    let mut gross = Vec::new();
    let mut net = Vec::new();
    let mut costs = Vec::new();
    let mut traded = Vec::new();
    let mut holdings = Vec::new();
    let mut pending_cost = 0.0;

    for t in first..t_len {
        if t > first {
            let rs: Vec<f64> = held
                .iter()
                .map(|&j| close_return(close, t, j))
                .map(|r| if r.is_finite() { r } else { 0.0 })
                .collect();
            let g = if rs.is_empty() { 0.0 } else { rs.iter().sum::<f64>() / rs.len() as f64 };
            dates.push(panel.dates()[t]);
            gross.push(g);
            costs.push(pending_cost);
            net.push(g - pending_cost);
        }
        if t == t_len - 1 {
            break;
        }

        let row: Vec<f64> = (0..panel.cols())
            .map(|j| if close[[t, j]].is_finite() { scores.values[[t, j]] } else { f64::NAN })
            .collect();
        let before = held.len();
        let forced: Vec<usize> = held.iter().copied().filter(|&j| !close[[t, j]].is_finite()).collect();
        for j in &forced {
            held.remove(j);
        }
        let mut forced = forced;

        let mut valid: Vec<usize> = (0..row.len()).filter(|&j| row[j].is_finite()).collect();
        let mut sold = Vec::new();
        let mut bought = Vec::new();
        if !valid.is_empty() {
            valid.sort_by(|&a, &b| better(&row, a, b));
            let k = ((cfg.k_fraction * valid.len() as f64).floor() as usize).max(1);
            let n = k.div_ceil(cfg.horizon);
            let target: BTreeSet<usize> = valid[..k].iter().copied().collect();

            let mut outside: Vec<usize> = held.difference(&target).copied().collect();
            outside.sort_by(|&a, &b| better(&row, b, a));
            let cap = n.max(held.len().saturating_sub(k));
            for (i, j) in outside.into_iter().take(cap).enumerate() {
                held.remove(&j);
                if i < n {
                    sold.push(j);
                } else {
                    forced.push(j);
                }
            }

            let slots = k.saturating_sub(held.len());
            let buy_cap = if cfg.instant_fill { slots } else { slots.min(n) };
            let buys: Vec<usize> = valid[..k]
                .iter()
                .copied()
                .filter(|j| !held.contains(j))
                .take(buy_cap)
                .collect();
            held.extend(&buys);
            bought = buys;
        }

        let sold_weight = if before == 0 { 0.0 } else { (sold.len() + forced.len()) as f64 / before as f64 };
        let bought_weight = if held.is_empty() { 0.0 } else { bought.len() as f64 / held.len() as f64 };
        pending_cost = cfg.open_cost * bought_weight + cfg.close_cost * sold_weight;
        traded.push(sold_weight + bought_weight);
        holdings.push(HoldingsDay {
            date: panel.dates()[t],
            held: name(&held.iter().copied().collect::<Vec<_>>()),
            bought: name(&bought),
            sold: name(&sold),
            forced: name(&forced),
        });
    }

    let daily_returns = DailySeries::new(dates.clone(), net);
    let benchmark = match &cfg.benchmark {
        Some(b) => b.clone(),
        None => equal_weight_benchmark(panel, first + 1..t_len),
    };
    let excess = excess_daily(&daily_returns, &benchmark)?;
    let mcfg = MetricConfig {
        annualization: cfg.annualization,
        ..MetricConfig::default()
    };
    let ar = |s: &DailySeries| annualized_return(s, &mcfg).unwrap_or(f64::NAN);
    let ir = |s: &DailySeries| information_ratio(s, &mcfg).unwrap_or(f64::NAN);
    Ok(BacktestReport {
        annualized_return: ar(&daily_returns),
        information_ratio: ir(&daily_returns),
        excess_annualized_return: ar(&excess),
        excess_information_ratio: ir(&excess),
        realized_turnover: if traded.is_empty() {
            0.0
        } else {
            traded.iter().sum::<f64>() / traded.len() as f64
        },
        cumulative: compound(&daily_returns),
        excess_cumulative: compound(&excess),
        gross_returns: DailySeries::new(dates.clone(), gross),
        costs: DailySeries::new(dates, costs),
        daily_returns,
        benchmark,
        holdings,
    })
}

impl BacktestReport {
    /// `date,net_return,cumulative,excess_cumulative,benchmark_return`.
    pub fn to_csv_string(&self) -> String {
        let excess: std::collections::HashMap<NaiveDate, f64> = self
            .excess_cumulative
            .dates
            .iter()
            .copied()
            .zip(self.excess_cumulative.values.iter().copied())
            .collect();
        let bench: std::collections::HashMap<NaiveDate, f64> = self
            .benchmark
            .dates
            .iter()
            .copied()
            .zip(self.benchmark.values.iter().copied())
            .collect();
        let mut out = String::from("date,net_return,cumulative,excess_cumulative,benchmark_return\n");
        for (i, d) in self.daily_returns.dates.iter().enumerate() {
            let get = |m: &std::collections::HashMap<NaiveDate, f64>| csv_number(m.get(d).copied().unwrap_or(f64::NAN));
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                d.format("%Y-%m-%d"),
                csv_number(self.daily_returns.values[i]),
                csv_number(self.cumulative.values[i]),
                get(&excess),
                get(&bench),
            ));
        }
        out
    }

    pub fn holdings_jsonl(&self) -> String {
        let mut out = String::new();
        for h in &self.holdings {
            out.push_str(&serde_json::to_string(h).expect("holdings serialize"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, daily_csv: &Path, holdings_jsonl: &Path) -> Result<(), BacktestError> {
        write_atomic(daily_csv, self.to_csv_string().as_bytes())?;
        write_atomic(holdings_jsonl, self.holdings_jsonl().as_bytes())?;
        Ok(())
    }
}

/// Reads a `date,value` benchmark return series.
pub fn read_benchmark(reader: impl std::io::Read) -> Result<DailySeries, String> {
    let mut r = csv::Reader::from_reader(reader);
    let mut dates = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| format!("line {}: {e}", i + 2))?;
        if rec.len() < 2 {
            return Err(format!("line {}: expected date,value", i + 2));
        }
        dates.push(
            NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|e| format!("line {}: {e}", i + 2))?,
        );
        values.push(rec[1].parse::<f64>().map_err(|e| format!("line {}: {e}", i + 2))?);
    }
    Ok(DailySeries::new(dates, values))
}
