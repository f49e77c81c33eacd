//! Factor scoring, the effective/deprecated pools and their persistence.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::{evaluate, SignalMatrix};
use crate::expr::{parse, Expr};
use crate::io_util::write_atomic;
use crate::metrics::{
    daily_rank_ic, diversity, factor_turnover, ir_of_series, MetricConfig, MetricError,
};
use crate::panel::{ForwardReturns, Panel};

#[derive(Debug, Error)]
pub enum PoolError {
    #[error("signal is entirely undefined")]
    EvaluationDegenerate,
    #[error("RankIC defined on {defined} of {scorable} scorable days")]
    InsufficientCoverage { defined: usize, scorable: usize },
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    SchemaViolation { line: usize, reason: String },
}

/// Four-dimensional factor score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Score {
    /// Mean daily RankIC.
    pub strength: f64,
    /// RankICIR.
    pub consistency: f64,
    /// Factor turnover, in `[0, 2]`.
    pub efficiency: f64,
    /// In `[0, 1]`.
    pub diversity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub min_strength: f64,
    pub min_consistency: f64,
    pub max_efficiency: f64,
    pub min_diversity: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            min_strength: 0.015,
            min_consistency: 0.2,
            max_efficiency: 1.5,
            min_diversity: 0.2,
        }
    }
}

/// Whether `score` clears every threshold (boundaries inclusive).
pub fn check(score: &Score, t: &Thresholds) -> bool {
    score.strength >= t.min_strength
        && score.consistency >= t.min_consistency
        && score.efficiency <= t.max_efficiency
        && score.diversity >= t.min_diversity
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Status {
    Effective,
    Deprecated,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Status::Effective => "effective",
            Status::Deprecated => "deprecated",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    /// Id of the seed this factor was refined from; None for seeds.
    pub seed_id: Option<String>,
    /// 0 for seeds, `i` for the i-th optimization step.
    pub step: u32,
}

impl Lineage {
    pub fn seed() -> Self {
        Self {
            seed_id: None,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactorRecord {
    pub id: String,
    pub expr_text: String,
    pub hash: u64,
    pub name: String,
    pub description: String,
    pub score: Score,
    pub status: Status,
    pub lineage: Lineage,
    /// Logical admission clock of the pool that produced the record.
    pub created_at: u64,
}

/// Identifier derived from the canonical hash.
pub fn record_id(hash: u64) -> String {
    format!("{hash:016x}")
}

impl FactorRecord {
    /// Builds a record whose status follows `check(score, thresholds)`.
    pub fn new(
        expr: &Expr,
        name: impl Into<String>,
        description: impl Into<String>,
        score: Score,
        thresholds: &Thresholds,
        lineage: Lineage,
        created_at: u64,
    ) -> Self {
        let hash = expr.canonical_hash();
        Self {
            id: record_id(hash),
            expr_text: expr.to_string(),
            hash,
            name: name.into(),
            description: description.into(),
            score,
            status: if check(&score, thresholds) {
                Status::Effective
            } else {
                Status::Deprecated
            },
            lineage,
            created_at,
        }
    }

    pub fn expr(&self) -> Result<Expr, String> {
        parse(&self.expr_text).map_err(|e| e.to_string())
    }

    fn well_formed(&self) -> Result<(), String> {
        let expr = self.expr()?;
        if expr.canonical_hash() != self.hash {
            return Err(format!("hash does not match expression {}", self.expr_text));
        }
        if self.id != record_id(self.hash) {
            return Err(format!("id {} does not match hash", self.id));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Admission {
    Admitted(Status),
    DuplicateHash,
    Malformed(String),
}

/// Effective (F^e) and deprecated (F^d) pools with a shared hash index.
#[derive(Debug, Clone, Default)]
pub struct PoolState {
    effective: Vec<FactorRecord>,
    deprecated: Vec<FactorRecord>,
    hashes: HashSet<u64>,
    signals: HashMap<u64, Arc<SignalMatrix>>,
    clock: u64,
}

impl PartialEq for PoolState {
    fn eq(&self, other: &Self) -> bool {
        self.effective == other.effective && self.deprecated == other.deprecated
    }
}

impl PoolState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn effective(&self) -> &[FactorRecord] {
        &self.effective
    }

    pub fn deprecated(&self) -> &[FactorRecord] {
        &self.deprecated
    }

    pub fn len(&self) -> usize {
        self.effective.len() + self.deprecated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains_hash(&self, hash: u64) -> bool {
        self.hashes.contains(&hash)
    }

    /// Next value of the logical admission clock.
    pub fn next_tick(&self) -> u64 {
        self.clock
    }

    /// Cached signal of an effective member.
    pub fn cached_signal(&self, hash: u64) -> Option<&Arc<SignalMatrix>> {
        self.signals.get(&hash)
    }

    /// Evaluates and caches the signals of effective members that lack one.
    pub fn warm_cache(&mut self, panel: &Panel) {
        for rec in &self.effective {
            if !self.signals.contains_key(&rec.hash) {
                if let Ok(e) = rec.expr() {
                    self.signals.insert(rec.hash, Arc::new(evaluate(&e, panel)));
                }
            }
        }
    }

    /// Adds `record` unless its hash is already present. `signal` is cached
    /// for diversity computations when the record is effective.
    pub fn admit(&mut self, record: FactorRecord, signal: Option<SignalMatrix>) -> Admission {
        if let Err(reason) = record.well_formed() {
            return Admission::Malformed(reason);
        }
        if self.hashes.contains(&record.hash) {
            return Admission::DuplicateHash;
        }
        self.hashes.insert(record.hash);
        self.clock = self.clock.max(record.created_at + 1);
        let status = record.status;
        match status {
            Status::Effective => {
                if let Some(s) = signal {
                    self.signals.insert(record.hash, Arc::new(s));
                }
                self.effective.push(record);
            }
            Status::Deprecated => self.deprecated.push(record),
        }
        Admission::Admitted(status)
    }

    /// Writes one JSON record per line, effective members first.
    pub fn persist(&self, path: &Path) -> Result<(), PoolError> {
        write_atomic(path, self.to_jsonl().as_bytes())?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for rec in self.effective.iter().chain(&self.deprecated) {
            out.push_str(&serde_json::to_string(rec).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<PoolState, PoolError> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(std::io::BufReader::new(file))
    }

    pub fn from_reader(reader: impl BufRead) -> Result<PoolState, PoolError> {
        let mut pool = PoolState::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let number = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FactorRecord =
                serde_json::from_str(&line).map_err(|e| PoolError::SchemaViolation {
                    line: number,
                    reason: e.to_string(),
                })?;
            match pool.admit(rec, None) {
                Admission::Admitted(_) => {}
                Admission::DuplicateHash => {
                    return Err(PoolError::SchemaViolation {
                        line: number,
                        reason: "duplicate hash".into(),
                    })
                }
                Admission::Malformed(reason) => {
                    return Err(PoolError::SchemaViolation {
                        line: number,
                        reason,
                    })
                }
            }
        }
        Ok(pool)
    }

    /// `id,expr,strength,consistency,efficiency,diversity,status` for every record.
    pub fn to_csv_string(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "id",
            "expr",
            "strength",
            "consistency",
            "efficiency",
            "diversity",
            "status",
        ])
        .expect("in-memory write");
        for r in self.effective.iter().chain(&self.deprecated) {
            let s = &r.score;
            w.write_record([
                r.id.clone(),
                r.expr_text.clone(),
                s.strength.to_string(),
                s.consistency.to_string(),
                s.efficiency.to_string(),
                s.diversity.to_string(),
                r.status.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

/// Scores `expr` on `panel` against the effective pool. The evaluated signal
/// is returned alongside so callers can cache it on admission.
pub fn evaluate_factor(
    expr: &Expr,
    panel: &Panel,
    returns: &ForwardReturns,
    pool: &PoolState,
    cfg: &MetricConfig,
) -> Result<(Score, SignalMatrix), PoolError> {
    let signal = evaluate(expr, panel);
    if signal.is_all_nan() {
        return Err(PoolError::EvaluationDegenerate);
    }
    let ric = daily_rank_ic(&signal, returns, cfg)?;
    let scorable = returns
        .values
        .outer_iter()
        .filter(|row| row.iter().filter(|v| v.is_finite()).count() >= cfg.min_valid_pairs)
        .count();
    // A handful of defined days can fake a high mean and IR.
    if ric.is_empty() {
        return Err(PoolError::EvaluationDegenerate);
    }
    if (ric.len() as f64) < cfg.min_day_coverage * scorable as f64 {
        return Err(PoolError::InsufficientCoverage {
            defined: ric.len(),
            scorable,
        });
    }
    let strength = ric.mean()?;
    let consistency = ir_of_series(&ric)?;
    let efficiency = factor_turnover(&signal, cfg)?;
    let mut uncached = Vec::new();
    for rec in &pool.effective {
        if !pool.signals.contains_key(&rec.hash) {
            if let Ok(e) = rec.expr() {
                uncached.push(evaluate(&e, panel));
            }
        }
    }
    let members = pool
        .effective
        .iter()
        .filter_map(|r| pool.signals.get(&r.hash).map(|s| s.as_ref()))
        .chain(uncached.iter());
    let diversity = diversity(&signal, members, cfg);
    Ok((
        Score {
            strength,
            consistency,
            efficiency,
            diversity,
        },
        signal,
    ))
}

/// The `min(k, |F^e|)` effective records with the highest strength; ties
/// keep admission order.
pub fn select_top(pool: &PoolState, k: usize) -> Vec<FactorRecord> {
    let mut out = pool.effective.clone();
    out.sort_by(|a, b| b.score.strength.total_cmp(&a.score.strength));
    out.truncate(k);
    out
}
