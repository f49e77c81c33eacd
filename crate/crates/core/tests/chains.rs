use std::collections::{BTreeSet, HashMap};
use std::path::PathBuf;
use std::sync::Mutex;

use alphachain_core::chains::{
    build_generation_prompt, build_optimization_prompt, run_generation_step, run_mining,
    run_optimization_chain, Budget, ChainConfig, ChainContext, ChainError, FeedbackSummary,
    MiningResult, MiningSettings, OptimizationHistory, RunEvent, RunLog, StopReason,
};
use alphachain_core::expr::{parse, ExprLimits};
use alphachain_core::llm::{
    FactorProposal, LlmBackend, MockBackend, ScriptedBackend, OPTIMIZE_MARKER,
};
use alphachain_core::panel::{forward_returns, synthesize, ForwardReturns, Panel, SynthParams};
use alphachain_core::pool::{
    check, FactorRecord, Lineage, PoolState, Score, Status, Thresholds,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PLANTED: &str = "Sub(Mean($close, 5), $close)";
const INVERTED: &str = "Sub($close, Mean($close, 5))";

fn planted(days: usize, n: usize) -> (Panel, ForwardReturns) {
    let (panel, _) = synthesize(SynthParams {
        seed: 42,
        days,
        instruments: n,
        signal_strength: 0.5,
    });
    let returns = forward_returns(&panel, 10).unwrap();
    (panel, returns)
}

fn answer(expr: &str) -> String {
    FactorProposal {
        name: "scripted".into(),
        expr_text: expr.into(),
        description: "scripted answer".into(),
    }
    .render()
}

fn settings(budget: u64) -> MiningSettings {
    let mut s = MiningSettings::default();
    s.chain.total_budget = budget;
    s
}

struct Harness {
    panel: Panel,
    returns: ForwardReturns,
    settings: MiningSettings,
    budget: Budget,
    log: RunLog,
}

impl Harness {
    fn new(budget: u64) -> Self {
        let (panel, returns) = planted(300, 30);
        Self {
            panel,
            returns,
            settings: settings(budget),
            budget: Budget::new(budget),
            log: RunLog::new(),
        }
    }

    fn ctx(&self) -> ChainContext<'_> {
        ChainContext {
            panel: &self.panel,
            returns: &self.returns,
            settings: &self.settings,
            budget: &self.budget,
            log: &self.log,
        }
    }
}

fn lineage_is_intact(pool: &PoolState) -> Result<(), String> {
    let all: Vec<&FactorRecord> = pool.effective().iter().chain(pool.deprecated()).collect();
    let seeds: BTreeSet<&str> = all
        .iter()
        .filter(|r| r.lineage.seed_id.is_none())
        .map(|r| r.id.as_str())
        .collect();
    let mut steps: HashMap<&str, Vec<u32>> = HashMap::new();
    for r in &all {
        match &r.lineage.seed_id {
            None if r.lineage.step == 0 => {}
            None => return Err(format!("seed {} has step {}", r.id, r.lineage.step)),
            Some(s) => {
                if !seeds.contains(s.as_str()) {
                    return Err(format!("{} points at unknown seed {s}", r.id));
                }
                steps.entry(s.as_str()).or_default().push(r.lineage.step);
            }
        }
    }
    for (seed, mut v) in steps {
        v.sort_unstable();
        if v != (1..=v.len() as u32).collect::<Vec<_>>() {
            return Err(format!("steps of {seed} are not contiguous: {v:?}"));
        }
    }
    Ok(())
}

fn completions(result: &MiningResult) -> u64 {
    result
        .events
        .iter()
        .filter(|e| matches!(e, RunEvent::Completion { .. }))
        .count() as u64
}

#[test]
fn zero_budget_is_a_no_op() {
    let (panel, returns) = planted(200, 20);
    let backend = ScriptedBackend::sequence(vec![answer(PLANTED)]);
    let r = run_mining(&panel, &returns, &backend, &settings(0)).unwrap();
    assert!(r.pool.is_empty());
    assert_eq!(r.candidates_spent, 0);
    assert_eq!(backend.calls(), 0);
}

#[test]
fn garbage_three_times_stalls_generation() {
    let h = Harness::new(100);
    let pool = Mutex::new(PoolState::new());
    let backend = ScriptedBackend::sequence(vec!["I would rather not.".into()]);
    match run_generation_step(&pool, &backend, &h.ctx(), 0) {
        Err(ChainError::GenerationStalled { attempts }) => assert_eq!(attempts, 3),
        other => panic!("unexpected {other:?}"),
    }
    assert_eq!(h.budget.spent(), 3);
    assert_eq!(backend.calls(), 3);
    assert!(pool.lock().unwrap().is_empty());
}

#[test]
fn duplicate_then_fresh_costs_two() {
    let h = Harness::new(100);
    let pool = Mutex::new(PoolState::new());
    let first = ScriptedBackend::sequence(vec![answer(PLANTED)]);
    run_generation_step(&pool, &first, &h.ctx(), 0).unwrap();
    let spent_before = h.budget.spent();

    let backend = ScriptedBackend::sequence(vec![answer(PLANTED), answer("Delta($volume, 3)")]);
    let out = run_generation_step(&pool, &backend, &h.ctx(), 1).unwrap();
    assert_eq!(out.spent, 2);
    assert_eq!(h.budget.spent() - spent_before, 2);
    assert_eq!(out.seed.expr_text, "Delta($volume, 3)");
    assert_eq!(pool.lock().unwrap().len(), 2);
}

#[test]
fn budget_exhaustion_inside_a_step() {
    let h = Harness::new(2);
    let pool = Mutex::new(PoolState::new());
    let backend = ScriptedBackend::sequence(vec!["nothing useful".into()]);
    assert!(matches!(
        run_generation_step(&pool, &backend, &h.ctx(), 0),
        Err(ChainError::BudgetExhausted)
    ));
    assert_eq!(h.budget.spent(), 2);
    assert_eq!(backend.calls(), 2);
}

#[test]
fn mock_generation_step_is_deterministic() {
    let run = || {
        let h = Harness::new(10);
        let pool = Mutex::new(PoolState::new());
        let backend = MockBackend::new(ExprLimits::default());
        run_generation_step(&pool, &backend, &h.ctx(), 0).unwrap().seed
    };
    let a = run();
    assert_eq!(a, run());
    assert_eq!(a.lineage, Lineage::seed());
    assert_eq!(a.expr_text, "Quantile($vwap, 10, 0.1)");
}

/// Generation answers with `seed`; optimization answers from `variants` in turn.
fn rigged(seed: &'static str, variants: Vec<String>) -> ScriptedBackend {
    let opt_calls = std::sync::atomic::AtomicUsize::new(0);
    ScriptedBackend::new(move |req, _| {
        if req.system_text.contains(OPTIMIZE_MARKER) {
            let i = opt_calls.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
            Ok(answer(&variants[i.min(variants.len() - 1)]))
        } else {
            Ok(answer(seed))
        }
    })
}

fn seed_then_chain(
    h: &Harness,
    backend: &dyn LlmBackend,
) -> (Mutex<PoolState>, OptimizationHistory) {
    let pool = Mutex::new(PoolState::new());
    let out = run_generation_step(&pool, backend, &h.ctx(), 0).unwrap();
    let history = run_optimization_chain(out.seed, out.feedback, &pool, backend, &h.ctx());
    (pool, history)
}

#[test]
fn chain_stops_at_first_effective_variant() {
    let h = Harness::new(100);
    let backend = rigged(
        INVERTED,
        vec!["Mul(Sub($close, Mean($close, 5)), 2)".into(), PLANTED.into()],
    );
    let (pool, history) = seed_then_chain(&h, &backend);
    assert_eq!(history.seed.status, Status::Deprecated);
    assert_eq!(history.steps.len(), 2);
    assert_eq!(history.steps[0].0.status, Status::Deprecated);
    assert_eq!(history.steps[1].0.status, Status::Effective);
    assert_eq!(history.stop, StopReason::FirstEffective);
    assert!(!history.discarded);
    for (i, (rec, _)) in history.steps.iter().enumerate() {
        assert_eq!(rec.lineage.seed_id.as_deref(), Some(history.seed.id.as_str()));
        assert_eq!(rec.lineage.step, i as u32 + 1);
    }
    assert_eq!(pool.lock().unwrap().effective().len(), 1);
    assert_eq!(h.budget.spent(), 3);
}

#[test]
fn chain_without_effective_variant_discards_seed() {
    let h = Harness::new(100);
    let variants = (2..=8)
        .map(|k| format!("Mul(Sub($close, Mean($close, 5)), {k})"))
        .collect();
    let backend = rigged(INVERTED, variants);
    let (pool, history) = seed_then_chain(&h, &backend);
    assert_eq!(history.steps.len(), 5);
    assert_eq!(history.stop, StopReason::MaxSteps);
    assert!(history.discarded);
    let pool = pool.lock().unwrap();
    assert!(pool.effective().is_empty());
    assert_eq!(pool.deprecated().len(), 6);
}

#[test]
fn chain_runs_all_steps_when_not_stopping_early() {
    let mut h = Harness::new(100);
    h.settings.chain.stop_on_first_effective = false;
    let backend = MockBackend::new(ExprLimits::default());
    let (pool, history) = seed_then_chain(&h, &backend);
    assert_eq!(history.steps.len(), 5);
    let pool = pool.lock().unwrap();
    for (rec, fb) in &history.steps {
        let listed = match rec.status {
            Status::Effective => pool.effective(),
            Status::Deprecated => pool.deprecated(),
        };
        assert!(listed.iter().any(|r| r.id == rec.id));
        assert_eq!(fb.score, rec.score);
    }
    let texts: Vec<&str> = history.steps.iter().map(|(r, _)| r.expr_text.as_str()).collect();
    assert_eq!(
        texts,
        [
            "Rank(Quantile($vwap, 10, 0.1), 5)",
            "Rank(Abs(Quantile($vwap, 10, 0.1)), 5)",
            "Max(Abs(Quantile($vwap, 10, 0.1)), 5)",
            "Max(Abs(Quantile($vwap, 10, 0.1)), 3)",
            "Delta(Abs(Quantile($vwap, 10, 0.1)), 3)",
        ]
    );
}

#[test]
fn mock_mining_is_serially_deterministic_and_sound() {
    let (panel, returns) = planted(300, 30);
    let s = settings(120);
    let backend = MockBackend::new(ExprLimits::default());
    let a = run_mining(&panel, &returns, &backend, &s).unwrap();
    let b = run_mining(&panel, &returns, &backend, &s).unwrap();
    assert_eq!(a.pool.to_jsonl(), b.pool.to_jsonl());
    assert_eq!(a.log_jsonl(), b.log_jsonl());
    assert_eq!(a.candidates_spent, 120);
    assert_eq!(completions(&a), 120);
    assert!(!a.pool.effective().is_empty());
    for r in a.pool.effective() {
        assert!(check(&r.score, &s.thresholds));
    }
    for r in a.pool.deprecated() {
        assert!(!check(&r.score, &s.thresholds));
    }
    lineage_is_intact(&a.pool).unwrap();
    assert_eq!(
        a.seeds_discarded,
        a.histories.iter().filter(|h| h.discarded).count() as u64
    );
}

#[test]
fn doubling_the_budget_keeps_every_effective_factor() {
    let (panel, returns) = planted(300, 30);
    let backend = MockBackend::new(ExprLimits::default());
    let small = run_mining(&panel, &returns, &backend, &settings(80)).unwrap();
    let large = run_mining(&panel, &returns, &backend, &settings(160)).unwrap();
    let ids = |r: &MiningResult| -> BTreeSet<String> {
        r.pool.effective().iter().map(|f| f.id.clone()).collect()
    };
    assert!(ids(&small).is_subset(&ids(&large)));
    assert!(large.pool.effective().len() >= small.pool.effective().len());
}

#[test]
fn parallel_mining_keeps_invariants() {
    let (panel, returns) = planted(300, 30);
    let mut s = settings(100);
    s.chain.max_parallel_opt_chains = 4;
    let backend = MockBackend::new(ExprLimits::default());
    let r = run_mining(&panel, &returns, &backend, &s).unwrap();
    assert_eq!(r.candidates_spent, 100);
    assert_eq!(completions(&r), 100);
    for f in r.pool.effective() {
        assert!(check(&f.score, &s.thresholds));
    }
    lineage_is_intact(&r.pool).unwrap();
}

#[test]
fn budget_accounting_is_exact_under_random_failures() {
    let (panel, returns) = planted(160, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for run in 0..50u64 {
        let mut s = MiningSettings::default();
        s.chain = ChainConfig {
            total_budget: rng.random_range(0..50),
            m_max: rng.random_range(1..4),
            parse_retries: rng.random_range(1..4),
            seed_batch: rng.random_range(1..4),
            max_parallel_opt_chains: [1, 1, 2, 3][rng.random_range(0..4)],
            rng_seed: run,
            stop_on_first_effective: rng.random_bool(0.5),
            ..ChainConfig::default()
        };
        let garbage_rate = rng.random_range(0.0..0.6);
        let mock = MockBackend::new(ExprLimits::default());
        let backend = ScriptedBackend::new(move |req, i| {
            let mut r = ChaCha8Rng::seed_from_u64(run * 1000 + i);
            if r.random_bool(garbage_rate) {
                Ok("EXPR: Mean($close".into())
            } else {
                mock.complete(req)
            }
        });
        let r = run_mining(&panel, &returns, &backend, &s).unwrap();
        assert_eq!(r.candidates_spent, backend.calls(), "run {run}");
        assert_eq!(completions(&r), backend.calls(), "run {run}");
        assert!(r.candidates_spent <= s.chain.total_budget, "run {run}");
        lineage_is_intact(&r.pool).unwrap();
    }
}

fn scored(expr: &str, strength: f64, status_effective: bool, tick: u64) -> FactorRecord {
    let score = Score {
        strength,
        consistency: if status_effective { 0.5 } else { 0.0 },
        efficiency: 0.5,
        diversity: 0.9,
    };
    FactorRecord::new(
        &parse(expr).unwrap(),
        "fixture",
        "fixture",
        score,
        &Thresholds::default(),
        Lineage::seed(),
        tick,
    )
}

fn fixture_pool() -> PoolState {
    let mut pool = PoolState::new();
    for w in 1..=25u64 {
        let strength = 0.02 + 0.001 * ((w * 7) % 25) as f64;
        pool.admit(scored(&format!("Mean($close, {w})"), strength, true, w), None);
    }
    for w in 1..=12u64 {
        pool.admit(scored(&format!("Std($volume, {})", w + 1), -0.01, false, 100 + w), None);
    }
    pool
}

fn section<'a>(text: &'a str, header: &str) -> Vec<&'a str> {
    let start = text.find(header).unwrap();
    text[start..]
        .lines()
        .skip(1)
        .take_while(|l| !l.is_empty())
        .filter(|l| l.chars().next().is_some_and(|c| c.is_ascii_digit()))
        .collect()
}

#[test]
fn generation_prompt_embeds_top_ten_by_strength() {
    let pool = fixture_pool();
    let (_, user) = build_generation_prompt(&pool, &ExprLimits::default(), &ChainConfig::default());
    let eff = section(&user, "Effective factors");
    assert_eq!(eff.len(), 10);
    let mut expected: Vec<&FactorRecord> = pool.effective().iter().collect();
    expected.sort_by(|a, b| b.score.strength.total_cmp(&a.score.strength));
    for (line, rec) in eff.iter().zip(expected) {
        assert!(line.ends_with(&rec.expr_text), "{line} vs {}", rec.expr_text);
    }
    let dep = section(&user, "Deprecated factors");
    assert_eq!(dep.len(), 10);
    assert!(dep[0].ends_with("Std($volume, 13)"));
}

fn fixture_history() -> (OptimizationHistory, FeedbackSummary) {
    let t = Thresholds::default();
    let seed = scored("Sub($close, Mean($close, 5))", -0.03, false, 0);
    let seed_fb = FeedbackSummary::new(seed.score, t, vec![]);
    let mut history = OptimizationHistory::new(seed.clone(), seed_fb);
    for (i, text) in ["Sub(Mean($close, 5), $close)", "Sub(Mean($close, 10), $close)"]
        .iter()
        .enumerate()
    {
        let mut rec = scored(text, 0.01 * (i + 1) as f64, false, i as u64 + 1);
        rec.lineage = Lineage {
            seed_id: Some(seed.id.clone()),
            step: i as u32 + 1,
        };
        let fb = FeedbackSummary::new(rec.score, t, vec![]);
        history.steps.push((rec, fb));
    }
    let fb = history.steps[1].1.clone();
    (history, fb)
}

#[test]
fn optimization_prompt_lists_variants_in_order() {
    let (history, fb) = fixture_history();
    let (system, user) = build_optimization_prompt(&history, &fb, &ExprLimits::default());
    assert!(system.starts_with(OPTIMIZE_MARKER));
    let first = user.find("1. Sub(Mean($close, 5), $close)").unwrap();
    let second = user.find("2. Sub(Mean($close, 10), $close)").unwrap();
    assert!(first < second);
    assert!(user.contains("strength 0.0100"));
    assert!(user.contains("strength 0.0200"));
    assert!(user.contains("Current expression: Sub(Mean($close, 10), $close)"));
    assert!(user.contains("Seed factor: Sub($close, Mean($close, 5))"));
}

fn golden(name: &str, actual: &str) {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name);
    if std::env::var_os("ALPHACHAIN_BLESS").is_some() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, actual).unwrap();
    }
    let expected = std::fs::read_to_string(&path)
        .unwrap_or_else(|_| panic!("missing golden file {}", path.display()));
    assert_eq!(actual, expected, "golden mismatch for {name}");
}

#[test]
fn generation_prompt_matches_golden() {
    let (system, user) =
        build_generation_prompt(&fixture_pool(), &ExprLimits::default(), &ChainConfig::default());
    golden("generation_prompt.txt", &format!("{system}\n=====\n{user}\n"));
}

#[test]
fn optimization_prompt_matches_golden() {
    let (history, fb) = fixture_history();
    let (system, user) = build_optimization_prompt(&history, &fb, &ExprLimits::default());
    golden("optimization_prompt.txt", &format!("{system}\n=====\n{user}\n"));
}
