use std::sync::Mutex;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::pool::{Score, Status};

/// Which chain issued a completion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ChainKind {
    Generation,
    Optimization,
}

/// One entry of the JSON-lines run log.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum RunEvent {
    Completion {
        chain: ChainKind,
        seed_id: Option<String>,
        step: u32,
        attempt: u32,
        seed_hint: u64,
        prompt_hash: String,
        response_hash: Option<String>,
        error: Option<String>,
        /// Budget spent after this completion.
        spent: u64,
    },
    Rejected {
        chain: ChainKind,
        seed_id: Option<String>,
        step: u32,
        attempt: u32,
        reason: String,
    },
    Admitted {
        id: String,
        expr: String,
        status: Status,
        score: Score,
        seed_id: Option<String>,
        step: u32,
    },
    ChainEnd {
        seed_id: String,
        steps: usize,
        stop: String,
        discarded: bool,
    },
}

/// Hex of the first 8 bytes of the SHA-256 of the given parts.
pub fn text_hash(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0u8]);
    }
    let d = h.finalize();
    d[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Default)]
pub struct RunLog {
    events: Mutex<Vec<RunEvent>>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&self, event: RunEvent) {
        self.events.lock().unwrap_or_else(|e| e.into_inner()).push(event);
    }

    pub fn into_events(self) -> Vec<RunEvent> {
        self.events.into_inner().unwrap_or_else(|e| e.into_inner())
    }
}

pub fn events_to_jsonl(events: &[RunEvent]) -> String {
    let mut out = String::new();
    for e in events {
        out.push_str(&serde_json::to_string(e).expect("events serialize"));
        out.push('\n');
    }
    out
}
