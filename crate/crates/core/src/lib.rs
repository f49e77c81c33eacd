//! Formulaic alpha mining engine.
//!
//! The crate is organised around the life cycle of a factor:
//!
//! - [`expr`] parses, prints, validates and hashes alpha expressions.
//! - [`panel`] holds the market history, forward returns and a synthetic generator.
//! - [`eval`] turns an expression and a panel into a signal matrix.
//! - [`metrics`] scores signals (IC, RankIC, ICIR, turnover, diversity, AR, IR).
//! - [`pool`] gates factors into effective/deprecated pools and persists them.
//! - [`llm`] talks to a chat-completions service or a deterministic mock.
//! - [`chains`] runs the generation and optimization chains.
//! - [`combiner`] merges selected factors into one composite signal.
//! - [`backtest`] runs the top-k/drop-n strategy with transaction costs.
//! - [`io_util`] holds atomic file writes shared by every artifact writer.

pub mod backtest;
pub mod chains;
pub mod combiner;
pub mod eval;
pub mod expr;
pub mod llm;
pub mod metrics;
pub mod panel;
pub mod pool;

pub mod io_util;

pub use eval::{evaluate, evaluate_batch, SignalMatrix};
pub use expr::{Expr, ExprLimits, Field, Operator};
pub use panel::{ForwardReturns, Panel};
