use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::Serialize;

use super::{CompletionRequest, LlmBackend, LlmError};

#[derive(Serialize)]
struct Entry<'a> {
    request: &'a CompletionRequest,
    response: Option<&'a str>,
    error: Option<String>,
}

/// Wraps a backend and appends every exchange to a JSON-lines file.
pub struct TranscriptBackend<B> {
    inner: B,
    out: Mutex<File>,
}

impl<B: LlmBackend> TranscriptBackend<B> {
    pub fn new(inner: B, path: &Path) -> io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let out = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            inner,
            out: Mutex::new(out),
        })
    }

    pub fn into_inner(self) -> B {
        self.inner
    }
}

impl<B: LlmBackend> LlmBackend for TranscriptBackend<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let result = self.inner.complete(request);
        let entry = Entry {
            request,
            response: result.as_ref().ok().map(String::as_str),
            error: result.as_ref().err().map(|e| e.to_string()),
        };
        let line = serde_json::to_string(&entry).expect("transcript entries serialize");
        let mut f = self.out.lock().unwrap_or_else(|e| e.into_inner());
        if let Err(e) = writeln!(f, "{line}") {
            tracing::warn!(error = %e, "failed to append transcript");
        }
        result
    }

    fn retry_count(&self) -> u64 {
        self.inner.retry_count()
    }
}
