//! Synthetic market with a planted mean-reversion signal.
//!
//! Prices follow a geometric random walk driven by a market factor and
//! idiosyncratic noise. Each day the cross-sectional z-score of
//! `Mean($close, 5) - $close` (computed on prices known so far) adds a drift
//! of `signal_strength * DRIFT_SCALE * sigma_i` to the next day's log return,
//! so the planted expression predicts forward returns with a strength that
//! grows with `signal_strength`. At strength 0 the driver has no effect.

use chrono::{Datelike, NaiveDate, Weekday};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Panel, TradingCalendar, Universe};
use crate::expr::{parse, Expr, Field};

const DRIFT_SCALE: f64 = 0.6;
const PLANTED: &str = "Sub(Mean($close, 5), $close)";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthParams {
    pub seed: u64,
    pub days: usize,
    pub instruments: usize,
    pub signal_strength: f64,
}

/// The expression whose cross-sectional ranking drives synthetic returns.
pub fn planted_expr() -> Expr {
    parse(PLANTED).expect("planted expression parses")
}

fn business_days(start: NaiveDate, count: usize) -> Vec<NaiveDate> {
    let mut out = Vec::with_capacity(count);
    let mut d = start;
    while out.len() < count {
        if !matches!(d.weekday(), Weekday::Sat | Weekday::Sun) {
            out.push(d);
        }
        d = d.succ_opt().expect("date in range");
    }
    out
}

/// Deterministic synthetic panel. `days >= 60`, `instruments >= 5` and
/// `signal_strength` in `[0, 1]` are required (values outside are clamped).
pub fn synthesize(params: SynthParams) -> (Panel, Expr) {
    let t_len = params.days.max(60);
    let n = params.instruments.max(5);
    let strength = params.signal_strength.clamp(0.0, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let z = move |rng: &mut ChaCha8Rng| -> f64 { std_normal.sample(rng) };

    let base_price: Vec<f64> = (0..n).map(|_| 10.0 * (0.3 * z(&mut rng)).exp()).collect();
    let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.015..0.025)).collect();
    let beta: Vec<f64> = (0..n).map(|_| rng.random_range(0.8..1.2)).collect();
    let size: Vec<f64> = (0..n).map(|_| 1e6 * (0.5 * z(&mut rng)).exp()).collect();

    let mut fields = vec![Array2::<f64>::zeros((t_len, n)); 8];
    // closes known so far, including one pre-sample day
    let mut history: Vec<Vec<f64>> = vec![base_price.clone()];
    let mut driver = vec![0.0; n];

    for t in 0..t_len {
        let market = 0.01 * z(&mut rng);
        let prev = history.last().unwrap().clone();
        let mut closes = vec![0.0; n];
        for i in 0..n {
            let s = sigma[i];
            let log_ret = beta[i] * market
                + s * z(&mut rng)
                + strength * DRIFT_SCALE * s * driver[i];
            let close = prev[i] * log_ret.exp();
            let open = prev[i] * (0.3 * s * z(&mut rng)).exp();
            let high = open.max(close) * (0.5 * s * z(&mut rng).abs()).exp();
            let low = open.min(close) * (-0.5 * s * z(&mut rng).abs()).exp();
            let vwap = low + (high - low) * rng.random_range(0.2..0.8);
            let volume = (size[i] * (0.4 * z(&mut rng)).exp()).round().max(1.0);
            let row = [
                open,
                high,
                low,
                close,
                volume,
                vwap * volume,
                close / prev[i] - 1.0,
                vwap,
            ];
            for (k, v) in row.into_iter().enumerate() {
                fields[k][[t, i]] = v;
            }
            closes[i] = close;
        }
        history.push(closes);
        driver = planted_zscores(&history);
    }

    let dates = business_days(NaiveDate::from_ymd_opt(2020, 1, 2).unwrap(), t_len);
    let universe = (0..n).map(|i| format!("SYN{i:04}")).collect();
    let panel = Panel::new(
        TradingCalendar::new(dates).expect("business days ascend"),
        Universe::new(universe).expect("generated ids unique"),
        fields,
    )
    .expect("shapes consistent");
    debug_assert_eq!(Field::ALL.len(), 8);
    (panel, planted_expr())
}

/// Cross-sectional z-score of `Mean(close, 5) - close` on the latest day of
/// `history`, clipped to [-3, 3]; zeros until five closes exist.
fn planted_zscores(history: &[Vec<f64>]) -> Vec<f64> {
    let n = history[0].len();
    // the pre-sample day does not count as a panel row
    if history.len() < 6 {
        return vec![0.0; n];
    }
    let last = &history[history.len() - 5..];
    let raw: Vec<f64> = (0..n)
        .map(|i| {
            let mean = last.iter().map(|row| row[i]).sum::<f64>() / 5.0;
            mean - last[4][i]
        })
        .collect();
    let mu = raw.iter().sum::<f64>() / n as f64;
    let var = raw.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n as f64;
    if var <= 0.0 {
        return vec![0.0; n];
    }
    let sd = var.sqrt();
    raw.iter().map(|v| ((v - mu) / sd).clamp(-3.0, 3.0)).collect()
}
