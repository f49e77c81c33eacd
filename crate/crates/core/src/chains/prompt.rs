use std::fmt::Write;

use super::feedback::FeedbackSummary;
use super::{ChainConfig, OptimizationHistory};
use crate::expr::{Category, ExprLimits, Field};
use crate::llm::{CURRENT_EXPR_PREFIX, GENERATE_MARKER, OPTIMIZE_MARKER};
use crate::pool::{select_top, FactorRecord, PoolState, Score};

const OUTPUT_PROTOCOL: &str = "\
Reason step by step if it helps, then finish with exactly one fenced block in this format:
```
NAME: <short identifier>
EXPR: <expression>
DESC: <one sentence explaining the intuition>
```";

fn catalog(limits: &ExprLimits) -> String {
    let mut out = String::from("Data fields (daily, per stock):\n");
    for f in Field::ALL {
        let _ = writeln!(out, "- ${}: {}", f.name(), f.description());
    }
    let _ = write!(
        out,
        "\nOperators. x, y and cond are expressions; N is a positive integer window of at most {} days; \
         n and q are real constants. Rolling operators look back over the current and previous N-1 days.\n",
        limits.max_window
    );
    let allowed = limits.allowed_operators();
    let mut categories: Vec<Category> = Vec::new();
    for op in &allowed {
        if !categories.contains(&op.category()) {
            categories.push(op.category());
        }
    }
    for cat in categories {
        let _ = writeln!(out, "{}:", cat.label());
        for op in allowed.iter().filter(|o| o.category() == cat) {
            let _ = writeln!(out, "- {}: {}", op.signature(), op.description());
        }
    }
    let _ = write!(
        out,
        "\nRules:\n\
         - Use only the fields and operators above; numeric constants may appear as arguments.\n\
         - Nesting depth at most {}, at most {} operator nodes.\n\
         - The value on a day may only use data up to that day's close.",
        limits.max_depth, limits.max_nodes
    );
    out
}

fn score_line(s: &Score) -> String {
    format!(
        "strength {:.4}, consistency {:.4}, turnover {:.4}, diversity {:.4}",
        s.strength, s.consistency, s.efficiency, s.diversity
    )
}

fn reference_list(out: &mut String, records: &[FactorRecord]) {
    if records.is_empty() {
        out.push_str("(none)\n");
    }
    for (i, r) in records.iter().enumerate() {
        let _ = writeln!(out, "{}. {}", i + 1, r.expr_text);
        let _ = writeln!(out, "   {}", score_line(&r.score));
    }
}

/// Prompt asking for a new seed factor conditioned on both pools.
pub fn build_generation_prompt(
    pool: &PoolState,
    limits: &ExprLimits,
    cfg: &ChainConfig,
) -> (String, String) {
    let system = format!(
        "{GENERATE_MARKER}\n\
         You are a quantitative researcher designing formulaic alpha factors for daily \
         cross-sectional stock selection. A factor maps each stock's recent market data to a \
         score; stocks with higher scores should earn higher future returns.\n\
         Diversity has the highest priority: each new factor should capture behaviour the \
         existing effective factors miss, through a different combination of fields, operators \
         and lookback windows.\n\n\
         {}\n\n{OUTPUT_PROTOCOL}",
        catalog(limits)
    );

    let effective = select_top(pool, cfg.prompt_pool_sample);
    let deprecated: Vec<FactorRecord> = pool
        .deprecated()
        .iter()
        .rev()
        .take(cfg.prompt_pool_sample)
        .cloned()
        .collect();
    let mut user = String::from(
        "Effective factors already in the pool. Treat them as positive references but do not \
         reproduce them:\n",
    );
    reference_list(&mut user, &effective);
    user.push_str(
        "\nDeprecated factors that failed selection. Treat them as negative references and avoid \
         similar constructions:\n",
    );
    reference_list(&mut user, &deprecated);
    user.push_str("\nPropose one new seed factor.");
    (system, user)
}

/// Prompt asking for a refined variant of the latest expression in `history`.
pub fn build_optimization_prompt(
    history: &OptimizationHistory,
    feedback: &FeedbackSummary,
    limits: &ExprLimits,
) -> (String, String) {
    let t = &feedback.thresholds;
    let system = format!(
        "{OPTIMIZE_MARKER}\n\
         You are a quantitative researcher refining a formulaic alpha factor using its backtest \
         results. Effectiveness has the highest priority: the refined factor should pass every \
         selection criterion.\n\
         Selection criteria:\n\
         - strength (mean daily RankIC) at least {}\n\
         - consistency (mean RankIC divided by its standard deviation) at least {}\n\
         - turnover (daily replacement of the top holdings, 0 to 2) at most {}\n\
         - diversity (one minus correlation with effective factors) at least {}\n\n\
         {}\n\n{OUTPUT_PROTOCOL}",
        t.min_strength,
        t.min_consistency,
        t.max_efficiency,
        t.min_diversity,
        catalog(limits)
    );

    let seed = &history.seed;
    let mut user = String::new();
    let _ = writeln!(user, "Seed factor: {}", seed.expr_text);
    let _ = writeln!(user, "   {} [{}]", score_line(&seed.score), seed.status);
    user.push_str("\nPrevious variants, oldest first:\n");
    if history.steps.is_empty() {
        user.push_str("(none)\n");
    }
    for (i, (rec, _)) in history.steps.iter().enumerate() {
        let _ = writeln!(user, "{}. {}", i + 1, rec.expr_text);
        let _ = writeln!(user, "   {} [{}]", score_line(&rec.score), rec.status);
    }
    let _ = writeln!(user, "\n{CURRENT_EXPR_PREFIX} {}", history.current().expr_text);
    let _ = writeln!(user, "Latest results: {}", score_line(&feedback.score));
    let _ = writeln!(user, "\nGuidance:\n{}", feedback.directive_text);
    user.push_str("\nPropose one refined variant of the current expression.");
    (system, user)
}
