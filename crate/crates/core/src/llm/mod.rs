//! Text-completion backends and the factor proposal protocol.
//!
//! A model answers with a fenced block holding three tagged lines:
//!
//! ```text
//! NAME: VWAP_Stability_Enhance
//! EXPR: Div(Sub($close, Mean($vwap, 2)), Std($amount, 5))
//! DESC: Deviation of the close from the short VWAP average, scaled by amount volatility.
//! ```

mod http;
mod mock;
mod transcript;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::expr::{parse, Expr, ParseError};

pub use http::HttpBackend;
pub use mock::{mock_generate, mock_optimize, MockBackend, ScriptedBackend};
pub use transcript::TranscriptBackend;

/// Marker the generation prompt carries so the mock knows which mode to run.
pub const GENERATE_MARKER: &str = "[task: generate-seed-factor]";
/// Marker carried by optimization prompts.
pub const OPTIMIZE_MARKER: &str = "[task: optimize-factor]";
/// Prefix of the line naming the expression under optimization.
pub const CURRENT_EXPR_PREFIX: &str = "Current expression:";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub system_text: String,
    pub user_text: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed_hint: Option<u64>,
}

impl CompletionRequest {
    pub fn new(system_text: impl Into<String>, user_text: impl Into<String>) -> Self {
        Self {
            system_text: system_text.into(),
            user_text: user_text.into(),
            temperature: 1.0,
            max_tokens: 1024,
            seed_hint: None,
        }
    }

    pub fn with_seed_hint(mut self, seed: u64) -> Self {
        self.seed_hint = Some(seed);
        self
    }
}

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("environment variable {0} holding the API key is not set")]
    AuthMissing(String),
    #[error("http status {code}: {body}")]
    HttpStatus { code: u16, body: String },
    #[error("request timed out")]
    Timeout,
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<LlmError> },
    #[error("transport error: {0}")]
    Transport(String),
    #[error("invalid backend configuration: {0}")]
    InvalidConfig(String),
}

/// A chat-style text-completion service.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError>;

    /// Retries performed so far (0 for backends that never retry).
    fn retry_count(&self) -> u64 {
        0
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for Box<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }

    fn retry_count(&self) -> u64 {
        (**self).retry_count()
    }
}

impl<B: LlmBackend + ?Sized> LlmBackend for std::sync::Arc<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        (**self).complete(request)
    }

    fn retry_count(&self) -> u64 {
        (**self).retry_count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Http,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model: Option<String>,
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub backoff_initial_ms: u64,
    pub backoff_multiplier: f64,
    pub max_in_flight: usize,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint: None,
            model: None,
            api_key_env: "ALPHACHAIN_API_KEY".into(),
            timeout_secs: 60.0,
            max_retries: 3,
            backoff_initial_ms: 500,
            backoff_multiplier: 2.0,
            max_in_flight: 4,
            temperature: 1.0,
            max_tokens: 1024,
        }
    }
}

impl BackendConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.kind == BackendKind::Http {
            if self.endpoint.as_deref().is_none_or(str::is_empty) {
                return Err(LlmError::InvalidConfig("http backend needs an endpoint".into()));
            }
            if self.model.as_deref().is_none_or(str::is_empty) {
                return Err(LlmError::InvalidConfig("http backend needs a model".into()));
            }
        }
        if !(self.temperature >= 0.0) {
            return Err(LlmError::InvalidConfig("temperature must be non-negative".into()));
        }
        if !(self.timeout_secs > 0.0) {
            return Err(LlmError::InvalidConfig("timeout must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(LlmError::InvalidConfig("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }
}

/// Builds the backend described by `config`. The mock uses `limits` for its
/// expression grammar.
pub fn build_backend(
    config: &BackendConfig,
    limits: &crate::expr::ExprLimits,
) -> Result<Box<dyn LlmBackend>, LlmError> {
    config.validate()?;
    Ok(match config.kind {
        BackendKind::Http => Box::new(HttpBackend::new(config.clone())?),
        BackendKind::Mock => Box::new(MockBackend::new(limits.clone())),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorProposal {
    pub name: String,
    pub expr_text: String,
    pub description: String,
}

impl FactorProposal {
    pub fn expr(&self) -> Result<Expr, ParseError> {
        parse(&self.expr_text)
    }

    /// The response text a well-behaved model would send for this proposal.
    pub fn render(&self) -> String {
        format!(
            "```\nNAME: {}\nEXPR: {}\nDESC: {}\n```\n",
            self.name, self.expr_text, self.description
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProposalField {
    Name,
    Expr,
    Desc,
}

impl fmt::Display for ProposalField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProposalField::Name => "name",
            ProposalField::Expr => "expr",
            ProposalField::Desc => "desc",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProposalError {
    #[error("response lacks the {0} field")]
    MissingField(ProposalField),
    #[error("expression does not parse: {0}")]
    ExprParseFailed(ParseError),
}

/// Text between the first pair of ``` fences, or the whole text when no
/// complete fenced block exists.
fn fenced_body(text: &str) -> &str {
    let Some(open) = text.find("```") else {
        return text;
    };
    let after = &text[open + 3..];
    // skip an info string such as ```text
    let body_start = after.find('\n').map_or(after.len(), |i| i + 1);
    let body = &after[body_start..];
    match body.find("```") {
        Some(close) => &body[..close],
        None => text,
    }
}

fn tagged<'a>(body: &'a str, tag: &str) -> Option<&'a str> {
    body.lines().find_map(|line| {
        let line = line.trim();
        let rest = line.strip_prefix(tag)?;
        let value = rest.strip_prefix(':')?.trim();
        (!value.is_empty()).then_some(value)
    })
}

/// Extracts a proposal from a model response; prose around the block is ignored.
pub fn parse_proposal(text: &str) -> Result<FactorProposal, ProposalError> {
    let body = fenced_body(text);
    let name = tagged(body, "NAME").ok_or(ProposalError::MissingField(ProposalField::Name))?;
    let expr_text = tagged(body, "EXPR").ok_or(ProposalError::MissingField(ProposalField::Expr))?;
    let description =
        tagged(body, "DESC").ok_or(ProposalError::MissingField(ProposalField::Desc))?;
    let expr = parse(expr_text).map_err(ProposalError::ExprParseFailed)?;
    Ok(FactorProposal {
        name: name.to_string(),
        expr_text: expr.to_string(),
        description: description.to_string(),
    })
}
