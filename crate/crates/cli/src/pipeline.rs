use std::path::{Path, PathBuf};

use alphachain_core::backtest::{read_benchmark, run_backtest, BacktestReport, StrategyConfig};
use alphachain_core::chains::run_mining;
use alphachain_core::combiner::{assemble, predict, read_predictions, train, write_predictions, CombinerModel};
use alphachain_core::eval::{evaluate, SignalMatrix};
use alphachain_core::io_util::{csv_number, write_atomic};
use alphachain_core::llm::{build_backend, BackendKind, LlmBackend, LlmError, TranscriptBackend};
use alphachain_core::metrics::{daily_ic, daily_rank_ic, ir_of_series, DailySeries, MetricConfig};
use alphachain_core::panel::{
    forward_returns, load_csv, synthesize, write_csv, DateSplit, ForwardReturns, Panel, SynthParams,
};
use alphachain_core::pool::{select_top, FactorRecord, PoolState};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::CliError;

pub const PANEL_CSV: &str = "panel.csv";
pub const POOL_JSONL: &str = "pool.jsonl";
pub const POOL_CSV: &str = "pool.csv";
pub const MINING_LOG: &str = "mining_log.jsonl";
pub const MINING_SUMMARY: &str = "mining_summary.json";
pub const SELECTED_CSV: &str = "selected.csv";
pub const MODEL_JSON: &str = "model.json";
pub const PREDICTIONS_CSV: &str = "predictions.csv";
pub const BACKTEST_DAILY: &str = "backtest_daily.csv";
pub const HOLDINGS_JSONL: &str = "holdings.jsonl";
pub const BACKTEST_SUMMARY: &str = "backtest_summary.json";
pub const SUMMARY_CSV: &str = "summary.csv";

/// Panel, split and full-panel forward returns shared by every stage.
struct Data {
    panel: Panel,
    split: DateSplit,
    returns: ForwardReturns,
}

fn load_data(cfg: &RunConfig) -> Result<Data, CliError> {
    let panel = match (&cfg.data.csv, &cfg.data.synth) {
        (Some(path), _) => load_csv(path)?,
        (None, Some(s)) => synth_panel(s),
        (None, None) => unreachable!("validated at load"),
    };
    let split = DateSplit::by_fraction(panel.calendar(), cfg.data.split.train, cfg.data.split.valid).map_err(|reason| {
        CliError::ConfigInvalid {
            field: "data.split".into(),
            reason,
        }
    })?;
    let returns = forward_returns(&panel, cfg.data.horizon)?;
    Ok(Data { panel, split, returns })
}

fn synth_panel(s: &crate::config::SynthSection) -> Panel {
    synthesize(SynthParams {
        seed: s.seed,
        days: s.days,
        instruments: s.instruments,
        signal_strength: s.signal_strength,
    })
    .0
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.output_dir().join(name)
}

fn upstream(cfg: &RunConfig, name: &str, stage: &'static str) -> Result<PathBuf, CliError> {
    let path = out(cfg, name);
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::UpstreamArtifactMissing { path, stage })
    }
}

fn artifact_invalid(path: &Path, reason: impl std::fmt::Display) -> CliError {
    CliError::ArtifactInvalid {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifacts serialize");
    text.push('\n');
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| artifact_invalid(path, e))
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn synth(cfg: &RunConfig) -> Result<(), CliError> {
    let Some(s) = &cfg.data.synth else {
        return Err(CliError::ConfigInvalid {
            field: "data.synth".into(),
            reason: "synth needs a [data.synth] section".into(),
        });
    };
    let path = out(cfg, PANEL_CSV);
    let panel = synth_panel(s);
    write_csv(&panel, &path)?;
    println!("synth: {} days x {} instruments -> {}", panel.rows(), panel.cols(), path.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct MiningSummary {
    budget: u64,
    candidates_spent: u64,
    seeds_generated: u64,
    seeds_discarded: u64,
    generation_stalls: u64,
    effective: usize,
    deprecated: usize,
    error: Option<String>,
}

pub fn mine(cfg: &RunConfig, transcript: Option<&Path>) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let rows = data.panel.calendar().rows_in(&data.split.mining_range());
    let panel = data.panel.slice_rows(rows);
    let returns = forward_returns(&panel, cfg.data.horizon)?;
    let settings = cfg.mining_settings();

    if cfg.llm.kind == BackendKind::Http && std::env::var_os(&cfg.llm.api_key_env).is_none() {
        return Err(LlmError::AuthMissing(cfg.llm.api_key_env.clone()).into());
    }
    let backend = build_backend(&cfg.llm, &settings.limits)?;
    let backend: Box<dyn LlmBackend> = match transcript {
        Some(path) => Box::new(TranscriptBackend::new(backend, path)?),
        None => backend,
    };
    let result = run_mining(&panel, &returns, backend.as_ref(), &settings)?;

    result.pool.persist(&out(cfg, POOL_JSONL))?;
    write_atomic(&out(cfg, POOL_CSV), result.pool.to_csv_string().as_bytes())?;
    result.write_log(&out(cfg, MINING_LOG))?;
    let summary = MiningSummary {
        budget: settings.chain.total_budget,
        candidates_spent: result.candidates_spent,
        seeds_generated: result.seeds_generated,
        seeds_discarded: result.seeds_discarded,
        generation_stalls: result.generation_stalls,
        effective: result.pool.effective().len(),
        deprecated: result.pool.deprecated().len(),
        error: result.error.clone(),
    };
    write_json(&out(cfg, MINING_SUMMARY), &summary)?;
    println!(
        "mine: spent {}/{} candidates, {} effective, {} deprecated",
        summary.candidates_spent, summary.budget, summary.effective, summary.deprecated
    );
    match result.error {
        Some(e) => Err(CliError::MiningAborted(e)),
        None => Ok(()),
    }
}

fn selected_to_csv(records: &[FactorRecord]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["rank", "id", "name", "expr", "strength", "consistency", "efficiency", "diversity"])
        .expect("in-memory write");
    for (i, r) in records.iter().enumerate() {
        let s = &r.score;
        w.write_record([
            (i + 1).to_string(),
            r.id.clone(),
            r.name.clone(),
            r.expr_text.clone(),
            csv_number(s.strength),
            csv_number(s.consistency),
            csv_number(s.efficiency),
            csv_number(s.diversity),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

fn load_pool(cfg: &RunConfig) -> Result<PoolState, CliError> {
    Ok(PoolState::load(&upstream(cfg, POOL_JSONL, "mine")?)?)
}

/// Selected records in file order, looked up in the mined pool.
fn load_selected(cfg: &RunConfig) -> Result<Vec<FactorRecord>, CliError> {
    let path = upstream(cfg, SELECTED_CSV, "select")?;
    let pool = load_pool(cfg)?;
    let mut r = csv::Reader::from_path(&path).map_err(|e| artifact_invalid(&path, e))?;
    let headers = r.headers().map_err(|e| artifact_invalid(&path, e))?.clone();
    let col = headers
        .iter()
        .position(|h| h == "id")
        .ok_or_else(|| artifact_invalid(&path, "no id column"))?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| artifact_invalid(&path, e))?;
        let id = &rec[col];
        let found = pool
            .effective()
            .iter()
            .chain(pool.deprecated())
            .find(|f| f.id == id)
            .ok_or_else(|| artifact_invalid(&path, format!("factor {id} is not in the pool")))?;
        out.push(found.clone());
    }
    Ok(out)
}

pub fn select(cfg: &RunConfig) -> Result<(), CliError> {
    let pool = load_pool(cfg)?;
    let top = select_top(&pool, cfg.combiner.top_k);
    let path = out(cfg, SELECTED_CSV);
    write_atomic(&path, selected_to_csv(&top).as_bytes())?;
    println!("select: {} of {} effective factors -> {}", top.len(), pool.effective().len(), path.display());
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    model: CombinerModel,
    validation_ic: Option<f64>,
    train_rows: usize,
    valid_rows: usize,
}

pub fn train_stage(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let selected = load_selected(cfg)?;
    let parts = assemble(&selected, &data.panel, &data.returns, &data.split)?;
    let trained = train(&parts.train, Some(&parts.valid), &cfg.combiner)?;
    let scores = predict(&trained.model, &parts.features)?;
    write_predictions(&scores, &out(cfg, PREDICTIONS_CSV))?;
    let file = ModelFile {
        model: trained.model,
        validation_ic: trained.validation_ic.and_then(finite),
        train_rows: parts.train.len(),
        valid_rows: parts.valid.len(),
    };
    write_json(&out(cfg, MODEL_JSON), &file)?;
    println!(
        "train: {} factors on {} rows, validation IC {}",
        file.model.factor_ids.len(),
        file.train_rows,
        file.validation_ic.map_or("n/a".into(), |v| format!("{v:.4}"))
    );
    Ok(())
}

fn strategy(cfg: &RunConfig) -> Result<StrategyConfig, CliError> {
    let mut s = cfg.backtest.clone();
    if let Some(path) = &cfg.data.benchmark_csv {
        let file = std::fs::File::open(path)?;
        s.benchmark = Some(read_benchmark(file).map_err(|e| artifact_invalid(path, e))?);
    }
    Ok(s)
}

fn test_backtest(data: &Data, scores: &SignalMatrix, strategy: &StrategyConfig) -> Result<BacktestReport, CliError> {
    let rows = data.panel.calendar().rows_in(&data.split.test);
    Ok(run_backtest(&scores.slice_rows(rows.clone()), &data.panel.slice_rows(rows), strategy)?)
}

fn load_predictions(cfg: &RunConfig, data: &Data) -> Result<SignalMatrix, CliError> {
    let path = upstream(cfg, PREDICTIONS_CSV, "train")?;
    let file = std::fs::File::open(&path)?;
    Ok(read_predictions(
        file,
        data.panel.calendar().clone(),
        data.panel.universe().clone(),
    )?)
}

#[derive(Debug, Serialize, Deserialize)]
struct BacktestSummary {
    days: usize,
    final_cumulative: Option<f64>,
    annualized_return: Option<f64>,
    information_ratio: Option<f64>,
    excess_annualized_return: Option<f64>,
    excess_information_ratio: Option<f64>,
    realized_turnover: Option<f64>,
}

pub fn backtest(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let scores = load_predictions(cfg, &data)?;
    let report = test_backtest(&data, &scores, &strategy(cfg)?)?;
    report.write(&out(cfg, BACKTEST_DAILY), &out(cfg, HOLDINGS_JSONL))?;
    let summary = BacktestSummary {
        days: report.daily_returns.len(),
        final_cumulative: report.cumulative.values.last().copied().and_then(finite),
        annualized_return: finite(report.annualized_return),
        information_ratio: finite(report.information_ratio),
        excess_annualized_return: finite(report.excess_annualized_return),
        excess_information_ratio: finite(report.excess_information_ratio),
        realized_turnover: finite(report.realized_turnover),
    };
    write_json(&out(cfg, BACKTEST_SUMMARY), &summary)?;
    println!(
        "backtest: {} days, AR {}, IR {}",
        summary.days,
        fmt_opt(summary.annualized_return),
        fmt_opt(summary.information_ratio)
    );
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("n/a".into(), |v| format!("{v:.4}"))
}

/// IC, RankIC, ICIR, RankICIR of `signal` over the test rows.
fn ic_block(data: &Data, signal: &SignalMatrix, metrics: &MetricConfig) -> [f64; 4] {
    let rows = data.panel.calendar().rows_in(&data.split.test);
    let s = signal.slice_rows(rows.clone());
    let r = data.returns.slice_rows(rows);
    let stats = |series: Option<DailySeries>| match series {
        Some(d) => (
            d.mean().unwrap_or(f64::NAN),
            ir_of_series(&d).unwrap_or(f64::NAN),
        ),
        None => (f64::NAN, f64::NAN),
    };
    let (ic, icir) = stats(daily_ic(&s, &r, metrics).ok());
    let (ric, ricir) = stats(daily_rank_ic(&s, &r, metrics).ok());
    [ic, ric, icir, ricir]
}

pub fn report(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_data(cfg)?;
    let summary: BacktestSummary = read_json(&upstream(cfg, BACKTEST_SUMMARY, "backtest")?)?;
    let composite = load_predictions(cfg, &data)?;
    let selected = load_selected(cfg)?;
    let strategy = strategy(cfg)?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["name", "expr", "IC", "RankIC", "ICIR", "RankICIR", "AR", "IR"])
        .expect("in-memory write");
    let mut row = |name: &str, expr: &str, ics: [f64; 4], ar: f64, ir: f64| {
        let mut rec = vec![name.to_string(), expr.to_string()];
        rec.extend(ics.iter().chain([&ar, &ir]).map(|v| csv_number(*v)));
        w.write_record(&rec).expect("in-memory write");
    };
    let nan = f64::NAN;
    row(
        "composite",
        "",
        ic_block(&data, &composite, &cfg.metrics),
        summary.annualized_return.unwrap_or(nan),
        summary.information_ratio.unwrap_or(nan),
    );
    for rec in &selected {
        let expr = rec.expr().map_err(|e| artifact_invalid(&out(cfg, SELECTED_CSV), e))?;
        let signal = evaluate(&expr, &data.panel);
        let (ar, ir) = match test_backtest(&data, &signal, &strategy) {
            Ok(r) => (r.annualized_return, r.information_ratio),
            Err(_) => (nan, nan),
        };
        row(&rec.id, &rec.expr_text, ic_block(&data, &signal, &cfg.metrics), ar, ir);
    }
    let path = out(cfg, SUMMARY_CSV);
    write_atomic(&path, &w.into_inner().expect("flush"))?;
    println!("report: {} rows -> {}", selected.len() + 1, path.display());
    Ok(())
}

pub fn run_all(cfg: &RunConfig, transcript: Option<&Path>) -> Result<(), CliError> {
    if cfg.data.synth.is_some() {
        synth(cfg)?;
    }
    mine(cfg, transcript)?;
    select(cfg)?;
    train_stage(cfg)?;
    backtest(cfg)?;
    report(cfg)
}
