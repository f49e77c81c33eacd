//! The generation and optimization chains.
//!
//! The generation chain asks the model for seed factors one at a time, each
//! prompt showing the current effective and deprecated pools. Every seed then
//! gets an optimization chain: up to `m_max` refinement rounds, each prompted
//! with the seed, all earlier variants and their scores, and directives
//! derived from whichever selection criteria the latest variant missed.
//!
//! Budget is counted in backend completion attempts, so unparseable answers,
//! invalid expressions and duplicates all cost one unit.

mod feedback;
mod log;
mod prompt;
mod steps;

use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::expr::ExprLimits;
use crate::io_util::write_atomic;
use crate::llm::{LlmBackend, LlmError};
use crate::metrics::MetricConfig;
use crate::panel::{ForwardReturns, Panel};
use crate::pool::{FactorRecord, PoolState, Status, Thresholds};

pub use feedback::{Correlated, Dimension, FeedbackSummary};
pub use log::{events_to_jsonl, text_hash, ChainKind, RunEvent, RunLog};
pub use prompt::{build_generation_prompt, build_optimization_prompt};
pub use steps::{run_generation_step, run_optimization_chain, GenerationOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChainConfig {
    /// Maximum number of backend completions for the whole run.
    pub total_budget: u64,
    /// Maximum refinement steps per seed.
    pub m_max: u32,
    pub stop_on_first_effective: bool,
    /// Attempts per step before the step is abandoned.
    pub parse_retries: u32,
    /// Effective and deprecated references shown in a generation prompt, each.
    pub prompt_pool_sample: usize,
    pub max_parallel_opt_chains: usize,
    pub rng_seed: u64,
    /// Seeds generated before their optimization chains are dispatched.
    pub seed_batch: usize,
    pub optimize_effective_seeds: bool,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            total_budget: 1000,
            m_max: 5,
            stop_on_first_effective: true,
            parse_retries: 3,
            prompt_pool_sample: 10,
            max_parallel_opt_chains: 1,
            rng_seed: 0,
            seed_batch: 5,
            optimize_effective_seeds: true,
        }
    }
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.m_max == 0 {
            return Err("m_max must be at least 1".into());
        }
        if self.parse_retries == 0 {
            return Err("parse_retries must be at least 1".into());
        }
        if self.max_parallel_opt_chains == 0 {
            return Err("max_parallel_opt_chains must be at least 1".into());
        }
        if self.seed_batch == 0 {
            return Err("seed_batch must be at least 1".into());
        }
        Ok(())
    }

    /// Seed hint for one completion, derived from the run seed and the
    /// position of the request in the run.
    pub fn seed_hint(&self, parts: &[u64]) -> u64 {
        let mut h = Sha256::new();
        h.update(self.rng_seed.to_be_bytes());
        for p in parts {
            h.update(p.to_be_bytes());
        }
        let d = h.finalize();
        u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
    }
}

/// Shared completion budget.
#[derive(Debug)]
pub struct Budget {
    total: u64,
    spent: AtomicU64,
}

impl Budget {
    pub fn new(total: u64) -> Self {
        Self {
            total,
            spent: AtomicU64::new(0),
        }
    }

    /// Reserves one completion; returns the spent count including it.
    pub fn try_spend(&self) -> Option<u64> {
        self.spent
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |s| (s < self.total).then_some(s + 1))
            .ok()
            .map(|prev| prev + 1)
    }

    pub fn spent(&self) -> u64 {
        self.spent.load(Ordering::SeqCst)
    }

    pub fn remaining(&self) -> u64 {
        self.total - self.spent()
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

#[derive(Debug, Error)]
pub enum ChainError {
    #[error("completion budget exhausted")]
    BudgetExhausted,
    #[error("backend failure: {0}")]
    BackendFailure(#[from] LlmError),
    #[error("no usable response after {attempts} attempts")]
    GenerationStalled { attempts: u32 },
    #[error("invalid chain configuration: {0}")]
    InvalidConfig(String),
}

/// Everything a mining run needs besides data and backend.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MiningSettings {
    pub chain: ChainConfig,
    pub limits: ExprLimits,
    pub thresholds: Thresholds,
    pub metrics: MetricConfig,
}

/// Borrowed state shared by the steps of one run.
pub struct ChainContext<'a> {
    pub panel: &'a Panel,
    pub returns: &'a ForwardReturns,
    pub settings: &'a MiningSettings,
    pub budget: &'a Budget,
    pub log: &'a RunLog,
}

/// Why an optimization chain ended.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    FirstEffective,
    MaxSteps,
    BudgetExhausted,
    Stalled,
    BackendFailure(String),
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StopReason::FirstEffective => f.write_str("first_effective"),
            StopReason::MaxSteps => f.write_str("max_steps"),
            StopReason::BudgetExhausted => f.write_str("budget_exhausted"),
            StopReason::Stalled => f.write_str("stalled"),
            StopReason::BackendFailure(e) => write!(f, "backend_failure: {e}"),
        }
    }
}

/// A seed and its refinement trail. `steps[i].0.lineage` is `{seed.id, i + 1}`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OptimizationHistory {
    pub seed: FactorRecord,
    pub seed_feedback: FeedbackSummary,
    pub steps: Vec<(FactorRecord, FeedbackSummary)>,
    /// Seed was not effective and no variant became effective.
    pub discarded: bool,
    pub stop: StopReason,
}

impl OptimizationHistory {
    pub fn new(seed: FactorRecord, seed_feedback: FeedbackSummary) -> Self {
        Self {
            seed,
            seed_feedback,
            steps: Vec::new(),
            discarded: false,
            stop: StopReason::MaxSteps,
        }
    }

    /// The expression the next refinement starts from.
    pub fn current(&self) -> &FactorRecord {
        self.steps.last().map(|(r, _)| r).unwrap_or(&self.seed)
    }

    pub fn any_effective_variant(&self) -> bool {
        self.steps.iter().any(|(r, _)| r.status == Status::Effective)
    }
}

#[derive(Debug)]
pub struct MiningResult {
    pub pool: PoolState,
    pub candidates_spent: u64,
    pub seeds_generated: u64,
    pub seeds_discarded: u64,
    pub generation_stalls: u64,
    pub histories: Vec<OptimizationHistory>,
    pub events: Vec<RunEvent>,
    /// Set when the run stopped early on a backend failure.
    pub error: Option<String>,
}

impl MiningResult {
    pub fn log_jsonl(&self) -> String {
        events_to_jsonl(&self.events)
    }

    pub fn write_log(&self, path: &Path) -> std::io::Result<()> {
        write_atomic(path, self.log_jsonl().as_bytes())
    }
}

/// Runs both chains on a fresh pool until the budget is spent.
pub fn run_mining(
    panel: &Panel,
    returns: &ForwardReturns,
    backend: &dyn LlmBackend,
    settings: &MiningSettings,
) -> Result<MiningResult, ChainError> {
    settings.chain.validate().map_err(ChainError::InvalidConfig)?;
    let cfg = &settings.chain;
    let pool = Mutex::new(PoolState::new());
    let budget = Budget::new(cfg.total_budget);
    let log = RunLog::new();
    let ctx = ChainContext {
        panel,
        returns,
        settings,
        budget: &budget,
        log: &log,
    };

    let mut seeds_generated = 0u64;
    let mut stalls = 0u64;
    let mut histories = Vec::new();
    let mut error = None;
    let mut generation_index = 0u64;

    while budget.remaining() > 0 && error.is_none() {
        let mut batch = Vec::new();
        while batch.len() < cfg.seed_batch && budget.remaining() > 0 {
            let outcome = run_generation_step(&pool, backend, &ctx, generation_index);
            generation_index += 1;
            match outcome {
                Ok(o) => {
                    seeds_generated += 1;
                    batch.push(o);
                }
                Err(ChainError::GenerationStalled { .. }) => stalls += 1,
                Err(ChainError::BudgetExhausted) => break,
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        let queue: Vec<GenerationOutcome> = batch
            .into_iter()
            .filter(|o| o.seed.status == Status::Deprecated || cfg.optimize_effective_seeds)
            .collect();
        if budget.remaining() == 0 || error.is_some() || queue.is_empty() {
            continue;
        }
        for h in run_chains(queue, &pool, backend, &ctx) {
            if let StopReason::BackendFailure(e) = &h.stop {
                error.get_or_insert_with(|| e.clone());
            }
            histories.push(h);
        }
    }

    let pool = pool.into_inner().unwrap_or_else(|e| e.into_inner());
    tracing::info!(
        spent = budget.spent(),
        effective = pool.effective().len(),
        deprecated = pool.deprecated().len(),
        "mining finished"
    );
    Ok(MiningResult {
        pool,
        candidates_spent: budget.spent(),
        seeds_generated,
        seeds_discarded: histories.iter().filter(|h| h.discarded).count() as u64,
        generation_stalls: stalls,
        histories,
        events: log.into_events(),
        error,
    })
}

/// Optimization chains for a batch of seeds, results in seed order.
fn run_chains(
    seeds: Vec<GenerationOutcome>,
    pool: &Mutex<PoolState>,
    backend: &dyn LlmBackend,
    ctx: &ChainContext<'_>,
) -> Vec<OptimizationHistory> {
    let workers = ctx.settings.chain.max_parallel_opt_chains.min(seeds.len());
    let abort = AtomicBool::new(false);
    let run_one = |o: &GenerationOutcome| {
        let h = run_optimization_chain(o.seed.clone(), o.feedback.clone(), pool, backend, ctx);
        if matches!(h.stop, StopReason::BackendFailure(_)) {
            abort.store(true, Ordering::SeqCst);
        }
        h
    };
    if workers <= 1 {
        let mut out = Vec::new();
        for o in &seeds {
            if abort.load(Ordering::SeqCst) || ctx.budget.remaining() == 0 {
                break;
            }
            out.push(run_one(o));
        }
        return out;
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<OptimizationHistory>>> = Mutex::new(vec![None; seeds.len()]);
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= seeds.len() || abort.load(Ordering::SeqCst) || ctx.budget.remaining() == 0 {
                    break;
                }
                let h = run_one(&seeds[i]);
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(h);
            });
        }
    });
    slots
        .into_inner()
        .unwrap_or_else(|e| e.into_inner())
        .into_iter()
        .flatten()
        .collect()
}
