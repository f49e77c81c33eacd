use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;
use std::path::Path;

use chrono::NaiveDate;
use ndarray::Array2;

use super::{Panel, PanelError, TradingCalendar, Universe};
use crate::expr::Field;
use crate::io_util::{csv_number, write_atomic};

const REQUIRED: [&str; 8] = [
    "date", "symbol", "open", "high", "low", "close", "volume", "amount",
];

pub fn load_csv(path: &Path) -> Result<Panel, PanelError> {
    let file = std::fs::File::open(path)?;
    read_csv(file)
}

/// Reads a long-format CSV (`date,symbol,open,high,low,close,volume,amount[,change][,vwap]`)
/// into a dense panel over the union of dates and symbols.
pub fn read_csv<R: Read>(reader: R) -> Result<Panel, PanelError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| PanelError::UnparsableRow {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    if headers.is_empty() || headers.iter().all(|h| h.is_empty()) {
        return Err(PanelError::EmptyFile);
    }
    for name in REQUIRED {
        if col(name).is_none() {
            return Err(PanelError::MissingRequiredColumn(name.to_string()));
        }
    }
    let date_col = col("date").unwrap();
    let sym_col = col("symbol").unwrap();
    let field_cols: Vec<Option<usize>> = Field::ALL.iter().map(|f| col(f.name())).collect();

    let mut cells: BTreeMap<(NaiveDate, String), [f64; 8]> = BTreeMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| PanelError::UnparsableRow {
            row: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let bad = |message: String| PanelError::UnparsableRow { row, message };
        let date_text = record.get(date_col).unwrap_or_default();
        let date = NaiveDate::parse_from_str(date_text, "%Y-%m-%d")
            .map_err(|e| bad(format!("date `{date_text}`: {e}")))?;
        let symbol = record.get(sym_col).unwrap_or_default().to_string();
        if symbol.is_empty() {
            return Err(bad("empty symbol".into()));
        }
        let mut values = [f64::NAN; 8];
        for (k, c) in field_cols.iter().enumerate() {
            let Some(c) = c else { continue };
            let text = record.get(*c).unwrap_or_default();
            if text.is_empty() {
                continue;
            }
            values[k] = text
                .parse::<f64>()
                .map_err(|_| bad(format!("{} value `{text}`", Field::ALL[k].name())))?;
        }
        if cells.insert((date, symbol.clone()), values).is_some() {
            return Err(PanelError::DuplicateDateSymbol { date, symbol });
        }
    }
    if cells.is_empty() {
        return Err(PanelError::EmptyFile);
    }

    let dates: Vec<NaiveDate> = cells
        .keys()
        .map(|(d, _)| *d)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let symbols: Vec<String> = cells
        .keys()
        .map(|(_, s)| s.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let row_of: HashMap<NaiveDate, usize> = dates.iter().enumerate().map(|(i, d)| (*d, i)).collect();
    let col_of: HashMap<&str, usize> = symbols
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();

    let shape = (dates.len(), symbols.len());
    let mut fields = vec![Array2::from_elem(shape, f64::NAN); 8];
    for ((date, symbol), values) in &cells {
        let (t, j) = (row_of[date], col_of[symbol.as_str()]);
        for (k, v) in values.iter().enumerate() {
            fields[k][[t, j]] = *v;
        }
    }

    if field_cols[Field::Vwap.index()].is_none() {
        let (amount, volume) = (&fields[Field::Amount.index()], &fields[Field::Volume.index()]);
        let vwap = ndarray::Zip::from(amount)
            .and(volume)
            .map_collect(|a, v| if *v == 0.0 { f64::NAN } else { a / v });
        fields[Field::Vwap.index()] = vwap;
    }
    if field_cols[Field::Change.index()].is_none() {
        let close = &fields[Field::Close.index()];
        let mut change = Array2::from_elem(shape, f64::NAN);
        for t in 1..shape.0 {
            for j in 0..shape.1 {
                let (prev, now) = (close[[t - 1, j]], close[[t, j]]);
                if prev != 0.0 {
                    change[[t, j]] = now / prev - 1.0;
                }
            }
        }
        fields[Field::Change.index()] = change;
    }

    Panel::new(TradingCalendar::new(dates)?, Universe::new(symbols)?, fields)
}

/// Serializes a panel in the long CSV format with all ten columns. Cells
/// where every field is missing are omitted.
pub fn write_csv_string(panel: &Panel) -> String {
    let mut out = String::from("date,symbol");
    for f in Field::ALL {
        out.push(',');
        out.push_str(f.name());
    }
    out.push('\n');
    for (t, date) in panel.dates().iter().enumerate() {
        for (j, sym) in panel.universe().ids().iter().enumerate() {
            let vals: Vec<f64> = Field::ALL.iter().map(|f| panel.field(*f)[[t, j]]).collect();
            if vals.iter().all(|v| v.is_nan()) {
                continue;
            }
            out.push_str(&date.format("%Y-%m-%d").to_string());
            out.push(',');
            out.push_str(sym);
            for v in vals {
                out.push(',');
                out.push_str(&csv_number(v));
            }
            out.push('\n');
        }
    }
    out
}

pub fn write_csv(panel: &Panel, path: &Path) -> Result<(), PanelError> {
    write_atomic(path, write_csv_string(panel).as_bytes())?;
    Ok(())
}
