use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendConfig, CompletionRequest, LlmBackend, LlmError};

/// Counting semaphore bounding concurrent requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Client for an OpenAI-compatible `/chat/completions` endpoint.
pub struct HttpBackend {
    config: BackendConfig,
    url: String,
    client: reqwest::blocking::Client,
    gate: Gate,
    retries: AtomicU64,
}

impl HttpBackend {
    pub fn new(config: BackendConfig) -> Result<Self, LlmError> {
        config.validate()?;
        let endpoint = config.endpoint.clone().unwrap_or_default();
        let url = format!("{}/chat/completions", endpoint.trim_end_matches('/'));
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Transport(e.to_string()))?;
        Ok(Self {
            gate: Gate::new(config.max_in_flight),
            config,
            url,
            client,
            retries: AtomicU64::new(0),
        })
    }

    fn body(&self, req: &CompletionRequest) -> Value {
        json!({
            "model": self.config.model,
            "messages": [
                {"role": "system", "content": req.system_text},
                {"role": "user", "content": req.user_text},
            ],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        })
    }

    fn attempt(&self, key: &str, body: &Value) -> Result<String, LlmError> {
        let resp = self
            .client
            .post(&self.url)
            .bearer_auth(key)
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_string())
            .send()
            .map_err(classify)?;
        let status = resp.status();
        let text = resp.text().map_err(classify)?;
        if !status.is_success() {
            return Err(LlmError::HttpStatus {
                code: status.as_u16(),
                body: excerpt(&text),
            });
        }
        extract_content(&text)
    }
}

fn classify(e: reqwest::Error) -> LlmError {
    if e.is_timeout() {
        LlmError::Timeout
    } else {
        LlmError::Transport(e.to_string())
    }
}

fn excerpt(text: &str) -> String {
    text.chars().take(200).collect()
}

fn retryable(e: &LlmError) -> bool {
    match e {
        LlmError::Timeout => true,
        LlmError::HttpStatus { code, .. } => *code == 429 || (500..600).contains(code),
        _ => false,
    }
}

/// First choice's message content from a chat-completions response body.
pub(crate) fn extract_content(text: &str) -> Result<String, LlmError> {
    let v: Value = serde_json::from_str(text)
        .map_err(|e| LlmError::MalformedResponse(format!("invalid JSON: {e}")))?;
    v.get("choices")
        .and_then(|c| c.get(0))
        .and_then(|c| c.get("message"))
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| LlmError::MalformedResponse("no choices[0].message.content".into()))
}

impl LlmBackend for HttpBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<String, LlmError> {
        let key = std::env::var(&self.config.api_key_env)
            .ok()
            .filter(|k| !k.is_empty())
            .ok_or_else(|| LlmError::AuthMissing(self.config.api_key_env.clone()))?;
        let body = self.body(request);
        let _permit = self.gate.acquire();
        let mut delay = Duration::from_millis(self.config.backoff_initial_ms);
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match self.attempt(&key, &body) {
                Ok(content) => return Ok(content),
                Err(e) if retryable(&e) => {
                    if attempts > self.config.max_retries {
                        return Err(LlmError::RetriesExhausted {
                            attempts,
                            last: Box::new(e),
                        });
                    }
                    tracing::warn!(attempt = attempts, error = %e, "retrying completion");
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    std::thread::sleep(delay);
                    delay = delay.mul_f64(self.config.backoff_multiplier.max(1.0));
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn retry_count(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn extracts_first_choice() {
        let body = r#"{"choices":[{"message":{"role":"assistant","content":"hi"}},{"message":{"content":"no"}}]}"#;
        assert_eq!(extract_content(body).unwrap(), "hi");
        assert!(matches!(extract_content("{"), Err(LlmError::MalformedResponse(_))));
        assert!(matches!(extract_content(r#"{"choices":[]}"#), Err(LlmError::MalformedResponse(_))));
    }

    #[test]
    fn retry_classification() {
        let status = |code| LlmError::HttpStatus {
            code,
            body: String::new(),
        };
        assert!(retryable(&status(429)));
        assert!(retryable(&status(503)));
        assert!(!retryable(&status(400)));
        assert!(retryable(&LlmError::Timeout));
        assert!(!retryable(&LlmError::MalformedResponse(String::new())));
    }
}
