use std::sync::{Mutex, MutexGuard};

use super::feedback::{Correlated, FeedbackSummary};
use super::log::{text_hash, ChainKind, RunEvent};
use super::prompt::{build_generation_prompt, build_optimization_prompt};
use super::{ChainContext, ChainError, OptimizationHistory, StopReason};
use crate::eval::SignalMatrix;
use crate::expr::validate;
use crate::llm::{parse_proposal, CompletionRequest, LlmBackend};
use crate::metrics::{mean_spearman, MetricConfig};
use crate::pool::{evaluate_factor, Admission, FactorRecord, Lineage, PoolState, Status};

/// Effective members listed in diversity feedback.
const CORRELATED_LISTED: usize = 3;

#[derive(Debug, Clone)]
pub struct GenerationOutcome {
    pub seed: FactorRecord,
    pub feedback: FeedbackSummary,
    /// Completions used by this step, including rejected attempts.
    pub spent: u64,
}

struct Accepted {
    record: FactorRecord,
    feedback: FeedbackSummary,
}

enum Attempt {
    Accepted(Accepted),
    Unusable(String),
}

fn lock(pool: &Mutex<PoolState>) -> MutexGuard<'_, PoolState> {
    pool.lock().unwrap_or_else(|e| e.into_inner())
}

fn correlated_members(signal: &SignalMatrix, pool: &PoolState, cfg: &MetricConfig) -> Vec<Correlated> {
    let mut out: Vec<Correlated> = pool
        .effective()
        .iter()
        .filter_map(|r| {
            pool.cached_signal(r.hash).map(|s| Correlated {
                expr_text: r.expr_text.clone(),
                correlation: mean_spearman(signal, s, cfg),
            })
        })
        .collect();
    out.sort_by(|a, b| b.correlation.abs().total_cmp(&a.correlation.abs()));
    out.truncate(CORRELATED_LISTED);
    out
}

/// Where in the run a completion sits, for logging and seed hints.
struct Slot<'a> {
    kind: ChainKind,
    seed_id: Option<&'a str>,
    step: u32,
    attempt: u32,
    hint: u64,
}

/// One completion: spend, ask, parse, validate, score, admit.
fn attempt(
    ctx: &ChainContext<'_>,
    pool: &Mutex<PoolState>,
    backend: &dyn LlmBackend,
    system: &str,
    user: &str,
    slot: &Slot<'_>,
) -> Result<Attempt, ChainError> {
    let settings = ctx.settings;
    let spent = ctx.budget.try_spend().ok_or(ChainError::BudgetExhausted)?;
    let request = CompletionRequest::new(system, user).with_seed_hint(slot.hint);
    let response = backend.complete(&request);
    ctx.log.push(RunEvent::Completion {
        chain: slot.kind,
        seed_id: slot.seed_id.map(str::to_string),
        step: slot.step,
        attempt: slot.attempt,
        seed_hint: slot.hint,
        prompt_hash: text_hash(&[system, user]),
        response_hash: response.as_ref().ok().map(|r| text_hash(&[r])),
        error: response.as_ref().err().map(|e| e.to_string()),
        spent,
    });
    let text = response?;

    let proposal = match parse_proposal(&text) {
        Ok(p) => p,
        Err(e) => return Ok(Attempt::Unusable(format!("unparseable answer: {e}"))),
    };
    let expr = match proposal.expr() {
        Ok(e) => e,
        Err(e) => return Ok(Attempt::Unusable(format!("unparseable expression: {e}"))),
    };
    let violations = validate(&expr, &settings.limits);
    if !violations.is_empty() {
        let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
        return Ok(Attempt::Unusable(format!("invalid expression: {}", list.join("; "))));
    }
    let hash = expr.canonical_hash();
    let duplicate = || Attempt::Unusable(format!("duplicate of a pooled factor: {expr}"));

    let (snapshot, tick) = {
        let p = lock(pool);
        if p.contains_hash(hash) {
            return Ok(duplicate());
        }
        (p.clone(), p.next_tick())
    };
    let scored = evaluate_factor(&expr, ctx.panel, ctx.returns, &snapshot, &settings.metrics);
    let (mut score, mut signal) = match scored {
        Ok(s) => s,
        Err(e) => return Ok(Attempt::Unusable(format!("evaluation failed: {e}"))),
    };
    let mut correlated = correlated_members(&signal, &snapshot, &settings.metrics);
    drop(snapshot);

    let mut guard = lock(pool);
    if guard.contains_hash(hash) {
        return Ok(duplicate());
    }
    if guard.next_tick() != tick {
        // Another chain admitted factors meanwhile; rescore against the live pool.
        match evaluate_factor(&expr, ctx.panel, ctx.returns, &guard, &settings.metrics) {
            Ok((s, sig)) => {
                score = s;
                signal = sig;
            }
            Err(e) => return Ok(Attempt::Unusable(format!("evaluation failed: {e}"))),
        }
        correlated = correlated_members(&signal, &guard, &settings.metrics);
    }
    let lineage = match slot.seed_id {
        Some(id) => Lineage {
            seed_id: Some(id.to_string()),
            step: slot.step,
        },
        None => Lineage::seed(),
    };
    let record = FactorRecord::new(
        &expr,
        proposal.name,
        proposal.description,
        score,
        &settings.thresholds,
        lineage,
        guard.next_tick(),
    );
    match guard.admit(record.clone(), Some(signal)) {
        Admission::Admitted(status) => {
            ctx.log.push(RunEvent::Admitted {
                id: record.id.clone(),
                expr: record.expr_text.clone(),
                status,
                score,
                seed_id: record.lineage.seed_id.clone(),
                step: record.lineage.step,
            });
            Ok(Attempt::Accepted(Accepted {
                feedback: FeedbackSummary::new(score, settings.thresholds, correlated),
                record,
            }))
        }
        Admission::DuplicateHash => Ok(duplicate()),
        Admission::Malformed(reason) => Ok(Attempt::Unusable(format!("malformed record: {reason}"))),
    }
}

fn retry_prompt(base: &str, reason: &str) -> String {
    format!("{base}\n\nYour previous answer was rejected ({reason}). Answer again in the required format.")
}

fn log_rejection(ctx: &ChainContext<'_>, slot: &Slot<'_>, reason: String) {
    tracing::debug!(step = slot.step, attempt = slot.attempt, %reason, "candidate rejected");
    ctx.log.push(RunEvent::Rejected {
        chain: slot.kind,
        seed_id: slot.seed_id.map(str::to_string),
        step: slot.step,
        attempt: slot.attempt,
        reason,
    });
}

/// One seed from the generation chain. `index` numbers generation steps
/// within the run and feeds the seed hint. The seed is admitted whatever
/// its status.
pub fn run_generation_step(
    pool: &Mutex<PoolState>,
    backend: &dyn LlmBackend,
    ctx: &ChainContext<'_>,
    index: u64,
) -> Result<GenerationOutcome, ChainError> {
    let cfg = &ctx.settings.chain;
    let (system, base_user) = build_generation_prompt(&lock(pool), &ctx.settings.limits, cfg);
    let mut user = base_user.clone();
    for attempt_no in 0..cfg.parse_retries {
        let slot = Slot {
            kind: ChainKind::Generation,
            seed_id: None,
            step: 0,
            attempt: attempt_no,
            hint: cfg.seed_hint(&[0, index, u64::from(attempt_no)]),
        };
        match attempt(ctx, pool, backend, &system, &user, &slot)? {
            Attempt::Accepted(a) => {
                return Ok(GenerationOutcome {
                    seed: a.record,
                    feedback: a.feedback,
                    spent: u64::from(attempt_no) + 1,
                })
            }
            Attempt::Unusable(reason) => {
                user = retry_prompt(&base_user, &reason);
                log_rejection(ctx, &slot, reason);
            }
        }
    }
    Err(ChainError::GenerationStalled {
        attempts: cfg.parse_retries,
    })
}

/// Refines `seed` until a stop rule fires. Budget exhaustion and backend
/// failures end the chain with the history so far.
pub fn run_optimization_chain(
    seed: FactorRecord,
    seed_feedback: FeedbackSummary,
    pool: &Mutex<PoolState>,
    backend: &dyn LlmBackend,
    ctx: &ChainContext<'_>,
) -> OptimizationHistory {
    let cfg = &ctx.settings.chain;
    let mut history = OptimizationHistory::new(seed, seed_feedback.clone());
    let mut feedback = seed_feedback;
    let stop = 'chain: loop {
        if history.steps.len() >= cfg.m_max as usize {
            break StopReason::MaxSteps;
        }
        let step = history.steps.len() as u32 + 1;
        let (system, base_user) =
            build_optimization_prompt(&history, &feedback, &ctx.settings.limits);
        let mut user = base_user.clone();
        let mut accepted = None;
        for attempt_no in 0..cfg.parse_retries {
            let slot = Slot {
                kind: ChainKind::Optimization,
                seed_id: Some(&history.seed.id),
                step,
                attempt: attempt_no,
                hint: cfg.seed_hint(&[1, history.seed.hash, u64::from(step), u64::from(attempt_no)]),
            };
            match attempt(ctx, pool, backend, &system, &user, &slot) {
                Ok(Attempt::Accepted(a)) => {
                    accepted = Some(a);
                    break;
                }
                Ok(Attempt::Unusable(reason)) => {
                    user = retry_prompt(&base_user, &reason);
                    log_rejection(ctx, &slot, reason);
                }
                Err(ChainError::BudgetExhausted) => break 'chain StopReason::BudgetExhausted,
                Err(e) => break 'chain StopReason::BackendFailure(e.to_string()),
            }
        }
        let Some(a) = accepted else {
            break StopReason::Stalled;
        };
        let effective = a.record.status == Status::Effective;
        feedback = a.feedback.clone();
        history.steps.push((a.record, a.feedback));
        if effective && cfg.stop_on_first_effective {
            break StopReason::FirstEffective;
        }
    };
    history.discarded = history.seed.status != Status::Effective && !history.any_effective_variant();
    history.stop = stop;
    ctx.log.push(RunEvent::ChainEnd {
        seed_id: history.seed.id.clone(),
        steps: history.steps.len(),
        stop: history.stop.to_string(),
        discarded: history.discarded,
    });
    history
}
