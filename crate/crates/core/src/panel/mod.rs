//! Market history panel: per-field `T x n` matrices over a shared trading
//! calendar and instrument universe, plus forward returns and date splits.

mod csv_io;
mod synth;

use std::ops::Range;
use std::sync::Arc;

use chrono::NaiveDate;
use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::expr::Field;

pub use csv_io::{load_csv, read_csv, write_csv, write_csv_string};
pub use synth::{planted_expr, synthesize, SynthParams};

#[derive(Debug, thiserror::Error)]
pub enum PanelError {
    #[error("missing required column `{0}`")]
    MissingRequiredColumn(String),
    #[error("row {row}: {message}")]
    UnparsableRow { row: usize, message: String },
    #[error("file contains no data rows")]
    EmptyFile,
    #[error("duplicate row for {date} / {symbol}")]
    DuplicateDateSymbol { date: NaiveDate, symbol: String },
    #[error("horizon {horizon} must be in 1..{rows}")]
    HorizonExceedsPanel { horizon: usize, rows: usize },
    #[error("date range selects no rows")]
    EmptySlice,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("calendar dates must be unique and ascending")]
    UnsortedCalendar,
    #[error("duplicate instrument `{0}`")]
    DuplicateInstrument(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Strictly increasing trading dates.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TradingCalendar(Vec<NaiveDate>);

impl TradingCalendar {
    pub fn new(dates: Vec<NaiveDate>) -> Result<Self, PanelError> {
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(PanelError::UnsortedCalendar);
        }
        Ok(Self(dates))
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Row indices falling inside `range`.
    pub fn rows_in(&self, range: &DateRange) -> Range<usize> {
        let start = self.0.partition_point(|d| *d < range.start);
        let end = self.0.partition_point(|d| *d < range.end);
        start..end.max(start)
    }
}

/// Ordered, unique instrument identifiers; column `j` of every matrix is
/// instrument `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Universe(Vec<String>);

impl Universe {
    pub fn new(ids: Vec<String>) -> Result<Self, PanelError> {
        let mut seen = std::collections::HashSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(PanelError::DuplicateInstrument(id.clone()));
            }
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Half-open date interval `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, d: NaiveDate) -> bool {
        self.start <= d && d < self.end
    }
}

/// Train / validation / test periods.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DateSplit {
    pub train: DateRange,
    pub valid: DateRange,
    pub test: DateRange,
}

impl DateSplit {
    pub fn new(train: DateRange, valid: DateRange, test: DateRange) -> Result<Self, String> {
        let ordered = [train, valid, test]
            .iter()
            .all(|r| r.start < r.end)
            && train.end <= valid.start
            && valid.end <= test.start;
        if !ordered {
            return Err("split ranges must be non-empty, ordered and non-overlapping".into());
        }
        Ok(Self { train, valid, test })
    }

    /// Splits a calendar by row fractions (the remainder goes to test).
    pub fn by_fraction(calendar: &TradingCalendar, train: f64, valid: f64) -> Result<Self, String> {
        let dates = calendar.dates();
        let t = dates.len();
        let a = ((t as f64) * train).round() as usize;
        let b = ((t as f64) * (train + valid)).round() as usize;
        if a == 0 || b <= a || b >= t {
            return Err(format!("calendar of {t} days is too short to split"));
        }
        let after_last = *dates.last().unwrap() + chrono::Days::new(1);
        Self::new(
            DateRange::new(dates[0], dates[a]),
            DateRange::new(dates[a], dates[b]),
            DateRange::new(dates[b], after_last),
        )
    }

    /// Training plus validation period: the range factors are mined on.
    pub fn mining_range(&self) -> DateRange {
        DateRange::new(self.train.start, self.valid.end)
    }
}

/// The market history tensor.
#[derive(Debug, Clone)]
pub struct Panel {
    calendar: Arc<TradingCalendar>,
    universe: Arc<Universe>,
    fields: Vec<Array2<f64>>,
}

impl Panel {
    /// `fields` must be given in [`Field::ALL`] order, each `T x n`.
    pub fn new(
        calendar: TradingCalendar,
        universe: Universe,
        fields: Vec<Array2<f64>>,
    ) -> Result<Self, PanelError> {
        if fields.len() != Field::ALL.len() {
            return Err(PanelError::ShapeMismatch(format!(
                "expected {} field matrices, got {}",
                Field::ALL.len(),
                fields.len()
            )));
        }
        let shape = (calendar.len(), universe.len());
        if let Some(m) = fields.iter().find(|m| m.dim() != shape) {
            return Err(PanelError::ShapeMismatch(format!(
                "field matrix {:?} does not match {:?}",
                m.dim(),
                shape
            )));
        }
        Ok(Self {
            calendar: Arc::new(calendar),
            universe: Arc::new(universe),
            fields,
        })
    }

    pub fn calendar(&self) -> &Arc<TradingCalendar> {
        &self.calendar
    }

    pub fn universe(&self) -> &Arc<Universe> {
        &self.universe
    }

    pub fn dates(&self) -> &[NaiveDate] {
        self.calendar.dates()
    }

    pub fn rows(&self) -> usize {
        self.calendar.len()
    }

    pub fn cols(&self) -> usize {
        self.universe.len()
    }

    pub fn field(&self, f: Field) -> &Array2<f64> {
        &self.fields[f.index()]
    }

    /// Rows whose dates fall in `range`; the universe is unchanged.
    pub fn slice(&self, range: &DateRange) -> Result<Panel, PanelError> {
        let rows = self.calendar.rows_in(range);
        if rows.is_empty() {
            return Err(PanelError::EmptySlice);
        }
        Ok(self.slice_rows(rows))
    }

    pub fn slice_rows(&self, rows: Range<usize>) -> Panel {
        let dates = self.calendar.dates()[rows.clone()].to_vec();
        Panel {
            calendar: Arc::new(TradingCalendar(dates)),
            universe: Arc::clone(&self.universe),
            fields: self
                .fields
                .iter()
                .map(|m| m.slice(s![rows.clone(), ..]).to_owned())
                .collect(),
        }
    }

    /// Restricts the universe to the given column indices, in that order.
    pub fn select_columns(&self, cols: &[usize]) -> Panel {
        let ids = cols.iter().map(|&j| self.universe.0[j].clone()).collect();
        Panel {
            calendar: Arc::clone(&self.calendar),
            universe: Arc::new(Universe(ids)),
            fields: self.fields.iter().map(|m| m.select(Axis(1), cols)).collect(),
        }
    }

    /// Cells breaking the price ordering `low <= min(open, close)`,
    /// `max(open, close) <= high`, or the sign constraints on prices and sizes.
    pub fn invariant_violations(&self) -> Vec<(usize, usize)> {
        let (o, h, l, c) = (
            self.field(Field::Open),
            self.field(Field::High),
            self.field(Field::Low),
            self.field(Field::Close),
        );
        let mut out = Vec::new();
        for ((t, j), &cv) in c.indexed_iter() {
            let (ov, hv, lv) = (o[[t, j]], h[[t, j]], l[[t, j]]);
            let prices = [ov, hv, lv, cv, self.field(Field::Vwap)[[t, j]]];
            let sizes = [
                self.field(Field::Volume)[[t, j]],
                self.field(Field::Amount)[[t, j]],
            ];
            let bad_sign =
                prices.iter().any(|p| *p <= 0.0) || sizes.iter().any(|s| *s < 0.0);
            let all_present = [ov, hv, lv, cv].iter().all(|v| !v.is_nan());
            let bad_order = all_present && !(lv <= ov.min(cv) && ov.max(cv) <= hv);
            if bad_sign || bad_order {
                out.push((t, j));
            }
        }
        out
    }
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.calendar == other.calendar
            && self.universe == other.universe
            && self
                .fields
                .iter()
                .zip(&other.fields)
                .all(|(a, b)| bitwise_eq(a, b))
    }
}

/// Shape and bit-pattern equality (NaN equals NaN).
pub fn bitwise_eq(a: &Array2<f64>, b: &Array2<f64>) -> bool {
    a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// `h`-day close-to-close forward returns; the last `h` rows are NaN.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardReturns {
    pub horizon: usize,
    pub calendar: Arc<TradingCalendar>,
    pub universe: Arc<Universe>,
    pub values: Array2<f64>,
}

impl ForwardReturns {
    pub fn slice_rows(&self, rows: Range<usize>) -> ForwardReturns {
        ForwardReturns {
            horizon: self.horizon,
            calendar: Arc::new(TradingCalendar(self.calendar.dates()[rows.clone()].to_vec())),
            universe: Arc::clone(&self.universe),
            values: self.values.slice(s![rows, ..]).to_owned(),
        }
    }
}

pub const DEFAULT_HORIZON: usize = 10;

pub fn forward_returns(panel: &Panel, horizon: usize) -> Result<ForwardReturns, PanelError> {
    let t = panel.rows();
    if horizon == 0 || horizon >= t {
        return Err(PanelError::HorizonExceedsPanel { horizon, rows: t });
    }
    let close = panel.field(Field::Close);
    let mut values = Array2::from_elem(close.dim(), f64::NAN);
    for row in 0..t - horizon {
        for j in 0..panel.cols() {
            let (now, later) = (close[[row, j]], close[[row + horizon, j]]);
            if !now.is_nan() && !later.is_nan() && now != 0.0 {
                values[[row, j]] = later / now - 1.0;
            }
        }
    }
    Ok(ForwardReturns {
        horizon,
        calendar: Arc::clone(panel.calendar()),
        universe: Arc::clone(panel.universe()),
        values,
    })
}
