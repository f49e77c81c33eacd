use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{
    CompletionRequest, FactorProposal, LlmBackend, LlmError, CURRENT_EXPR_PREFIX, OPTIMIZE_MARKER,
};
use crate::expr::{parse, validate, Expr, ExprLimits, ExprSampler, Operator};

const WINDOWS: [usize; 5] = [2, 3, 5, 10, 20];

fn sampler(limits: &ExprLimits) -> ExprSampler {
    ExprSampler::new(limits.clone())
}

fn describe(expr: &Expr) -> String {
    let fields: Vec<String> = expr.fields().iter().map(|f| format!("${}", f.name())).collect();
    format!(
        "Combines {} through {} operator node(s) with a {}-day lookback.",
        fields.join(", "),
        expr.node_count(),
        expr.warmup_rows()
    )
}

/// A random valid factor drawn from the expression grammar.
pub fn mock_generate(seed: u64, limits: &ExprLimits) -> FactorProposal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let expr = sampler(limits).sample(&mut rng);
    FactorProposal {
        name: format!("mock_seed_{:08x}", seed as u32),
        description: describe(&expr),
        expr_text: expr.to_string(),
    }
}

/// Paths (child indices from the root) of every operator node.
fn node_paths(expr: &Expr) -> Vec<Vec<usize>> {
    fn walk(e: &Expr, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if let Expr::Node(n) = e {
            out.push(path.clone());
            for (i, c) in n.children.iter().enumerate() {
                path.push(i);
                walk(c, path, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(expr, &mut Vec::new(), &mut out);
    out
}

fn all_paths(expr: &Expr) -> Vec<Vec<usize>> {
    fn walk(e: &Expr, path: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        out.push(path.clone());
        if let Expr::Node(n) = e {
            for (i, c) in n.children.iter().enumerate() {
                path.push(i);
                walk(c, path, out);
                path.pop();
            }
        }
    }
    let mut out = Vec::new();
    walk(expr, &mut Vec::new(), &mut out);
    out
}

fn subtree<'a>(expr: &'a Expr, path: &[usize]) -> &'a Expr {
    match (expr, path.split_first()) {
        (_, None) => expr,
        (Expr::Node(n), Some((i, rest))) => subtree(&n.children[*i], rest),
        _ => unreachable!("path leads through a leaf"),
    }
}

fn replace(expr: &Expr, path: &[usize], new: Expr) -> Expr {
    match path.split_first() {
        None => new,
        Some((i, rest)) => {
            let Expr::Node(n) = expr else {
                unreachable!("path leads through a leaf")
            };
            let mut n = n.clone();
            n.children[*i] = replace(&n.children[*i], rest, new);
            Expr::Node(n)
        }
    }
}

fn perturb_window(expr: &Expr, rng: &mut ChaCha8Rng) -> Option<Expr> {
    let paths: Vec<Vec<usize>> = node_paths(expr)
        .into_iter()
        .filter(|p| matches!(subtree(expr, p), Expr::Node(n) if !n.windows.is_empty()))
        .collect();
    let path = paths.choose(rng)?;
    let Expr::Node(node) = subtree(expr, path) else {
        return None;
    };
    let w = node.windows[0];
    let pos = WINDOWS.iter().position(|x| *x >= w).unwrap_or(WINDOWS.len() - 1);
    let mut options = Vec::new();
    if pos > 0 {
        options.push(WINDOWS[pos - 1]);
    }
    if WINDOWS[pos] != w {
        options.push(WINDOWS[pos]);
    } else if pos + 1 < WINDOWS.len() {
        options.push(WINDOWS[pos + 1]);
    }
    let options: Vec<usize> = options
        .into_iter()
        .filter(|x| *x >= node.op.min_window())
        .collect();
    let new_w = *options.choose(rng)?;
    let mut n = node.clone();
    n.windows[0] = new_w;
    Some(replace(expr, path, Expr::Node(n)))
}

fn same_shape(a: Operator, b: Operator) -> bool {
    a != b
        && a.category() == b.category()
        && a.arity() == b.arity()
        && a.window_params() == b.window_params()
        && a.extra_params() == b.extra_params()
}

fn swap_operator(expr: &Expr, rng: &mut ChaCha8Rng, limits: &ExprLimits) -> Option<Expr> {
    let path = node_paths(expr).choose(rng)?.clone();
    let Expr::Node(node) = subtree(expr, &path) else {
        return None;
    };
    let peers: Vec<Operator> = Operator::ALL
        .into_iter()
        .filter(|op| same_shape(node.op, *op) && limits.allows(*op))
        .filter(|op| node.windows.iter().all(|w| *w >= op.min_window()))
        .collect();
    let op = *peers.choose(rng)?;
    let mut n = node.clone();
    n.op = op;
    Some(replace(expr, &path, Expr::Node(n)))
}

fn wrap_subtree(expr: &Expr, rng: &mut ChaCha8Rng) -> Option<Expr> {
    let path = all_paths(expr).choose(rng)?.clone();
    let inner = subtree(expr, &path).clone();
    let wrapped = if rng.random_bool(0.5) {
        Expr::call(Operator::Abs, vec![inner])
    } else {
        Expr::rolling(Operator::Rank, vec![inner], 5)
    }
    .ok()?;
    Some(replace(expr, &path, wrapped))
}

/// One seeded local mutation of `base`: a window step, an operator swap
/// within its category, or wrapping a subtree in `Abs` / `Rank(., 5)`.
/// The result is valid under `limits` and differs from `base`.
pub fn mock_optimize(seed: u64, base: &Expr, limits: &ExprLimits) -> FactorProposal {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base_hash = base.canonical_hash();
    let mut found = None;
    for _ in 0..64 {
        let candidate = match rng.random_range(0..3) {
            0 => perturb_window(base, &mut rng),
            1 => swap_operator(base, &mut rng, limits),
            _ => wrap_subtree(base, &mut rng),
        };
        if let Some(c) = candidate {
            if c.canonical_hash() != base_hash && validate(&c, limits).is_empty() {
                found = Some(c);
                break;
            }
        }
    }
    let expr = found.unwrap_or_else(|| {
        // no local move fits the limits; restart from a fresh sample
        let mut e = sampler(limits).sample(&mut rng);
        while e.canonical_hash() == base_hash {
            e = sampler(limits).sample(&mut rng);
        }
        e
    });
    FactorProposal {
        name: format!("mock_opt_{:08x}", seed as u32),
        description: describe(&expr),
        expr_text: expr.to_string(),
    }
}

fn text_seed(req: &CompletionRequest) -> u64 {
    let mut h = Sha256::new();
    h.update(req.system_text.as_bytes());
    h.update([0u8]);
    h.update(req.user_text.as_bytes());
    if let Some(s) = req.seed_hint {
        h.update(s.to_be_bytes());
    }
    let digest = h.finalize();
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Offline backend: a pure function of the request text and seed hint.
#[derive(Debug, Clone)]
pub struct MockBackend {
    limits: ExprLimits,
}

impl MockBackend {
    pub fn new(limits: ExprLimits) -> Self {
        Self { limits }
    }

    fn base_expression(req: &CompletionRequest) -> Option<Expr> {
        req.user_text
            .lines()
            .find_map(|l| l.trim().strip_prefix(CURRENT_EXPR_PREFIX))
            .and_then(|rest| parse(rest.trim()).ok())
    }
}

impl LlmBackend for MockBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let seed = text_seed(request);
        let optimize = request.system_text.contains(OPTIMIZE_MARKER)
            || request.user_text.contains(OPTIMIZE_MARKER);
        let proposal = match (optimize, Self::base_expression(request)) {
            (true, Some(base)) => mock_optimize(seed, &base, &self.limits),
            _ => mock_generate(seed, &self.limits),
        };
        Ok(format!("Proposed factor:\n{}", proposal.render()))
    }
}

type Responder = dyn Fn(&CompletionRequest, u64) -> Result<String, LlmError> + Send + Sync;

/// Backend driven by a caller-supplied function of (request, call index).
pub struct ScriptedBackend {
    responder: Box<Responder>,
    calls: AtomicU64,
}

impl ScriptedBackend {
    pub fn new(
        f: impl Fn(&CompletionRequest, u64) -> Result<String, LlmError> + Send + Sync + 'static,
    ) -> Self {
        Self {
            responder: Box::new(f),
            calls: AtomicU64::new(0),
        }
    }

    /// Replays `responses` in order, repeating the last one when exhausted.
    pub fn sequence(responses: Vec<String>) -> Self {
        assert!(!responses.is_empty(), "scripted backend needs a response");
        Self::new(move |_, i| Ok(responses[(i as usize).min(responses.len() - 1)].clone()))
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let i = self.calls.fetch_add(1, Ordering::SeqCst);
        (self.responder)(request, i)
    }
}
