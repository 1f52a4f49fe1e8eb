use std::collections::HashSet;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{InstructionExample, Source};
use crate::error::{Error, Result};

/// Time source for rate limiting and backoff, so tests can run on a virtual clock.
pub trait Clock: Send + Sync {
    /// Time elapsed since the clock's origin.
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Advances only when slept on.
#[derive(Default)]
pub struct VirtualClock {
    t: Mutex<Duration>,
}

impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        *self.t.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        *self.t.lock().unwrap() += d;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateLimit {
    pub max_calls_per_second: f64,
}

impl RateLimit {
    fn interval(&self) -> Duration {
        if self.max_calls_per_second <= 0.0 || !self.max_calls_per_second.is_finite() {
            return Duration::ZERO;
        }
        // round up so that no one-second window sees more than the limit
        Duration::from_nanos((1e9 / self.max_calls_per_second).ceil() as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranslateError {
    pub message: String,
    /// Worth retrying (rate limited, server error, network failure).
    pub retryable: bool,
}

impl std::fmt::Display for TranslateError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

/// A machine translation backend.
pub trait TranslationClient: Send + Sync {
    fn translate(&self, text: &str, source_lang: &str, target_lang: &str) -> std::result::Result<String, TranslateError>;
    fn rate_limit(&self) -> RateLimit;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub initial_backoff: Duration,
    pub max_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 4,
            initial_backoff: Duration::from_millis(250),
            max_backoff: Duration::from_secs(8),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranslationFailure {
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TranslationReport {
    pub examples: Vec<InstructionExample>,
    pub failures: Vec<TranslationFailure>,
}

struct Caller<'a> {
    client: &'a dyn TranslationClient,
    clock: &'a dyn Clock,
    policy: RetryPolicy,
    interval: Duration,
    last: Option<Duration>,
}

impl Caller<'_> {
    fn call(&mut self, text: &str, src: &str, tgt: &str) -> std::result::Result<String, TranslateError> {
        let mut backoff = self.policy.initial_backoff;
        let mut attempt = 0;
        loop {
            if let Some(last) = self.last {
                let ready = last + self.interval;
                let now = self.clock.now();
                if now < ready {
                    self.clock.sleep(ready - now);
                }
            }
            self.last = Some(self.clock.now());
            match self.client.translate(text, src, tgt) {
                Ok(s) => return Ok(s),
                Err(e) if e.retryable && attempt < self.policy.max_retries => {
                    attempt += 1;
                    self.clock.sleep(backoff);
                    backoff = (backoff * 2).min(self.policy.max_backoff);
                }
                Err(e) => return Err(e),
            }
        }
    }
}

/// Translates instruction, input and response of every record. A record that
/// fails is reported and skipped; the batch fails only if every record does.
/// Calls are issued one at a time, spaced by the client's rate limit.
pub fn translate_dataset(
    examples: &[InstructionExample],
    client: &dyn TranslationClient,
    target_lang: &str,
    policy: RetryPolicy,
    clock: &dyn Clock,
) -> Result<TranslationReport> {
    let mut caller = Caller {
        client,
        clock,
        policy,
        interval: client.rate_limit().interval(),
        last: None,
    };
    let mut out = Vec::new();
    let mut failures = Vec::new();
    for (index, ex) in examples.iter().enumerate() {
        let src = ex.language.as_str();
        let result = (|| {
            let instruction = caller.call(&ex.instruction, src, target_lang)?;
            let input = match &ex.input {
                Some(s) => Some(caller.call(s, src, target_lang)?),
                None => None,
            };
            let response = caller.call(&ex.response, src, target_lang)?;
            Ok::<_, TranslateError>(InstructionExample {
                instruction,
                input,
                response,
                language: target_lang.to_string(),
                source: Source::Translated,
            })
        })();
        match result {
            Ok(t) => out.push(t),
            Err(e) => {
                log::warn!("record {index}: translation failed: {e}");
                failures.push(TranslationFailure {
                    index,
                    message: e.message,
                });
            }
        }
    }
    if out.is_empty() && !failures.is_empty() {
        let first = failures
            .iter()
            .map(|f| format!("record {}: {}", f.index, f.message))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(Error::AllTranslationsFailed {
            count: failures.len(),
            first,
        });
    }
    Ok(TranslationReport {
        examples: out,
        failures,
    })
}

/// Deterministic client for tests and dry runs: returns the text unchanged
/// (or with a fixed prefix), fails permanently on listed texts and records
/// the clock time of every call.
pub struct MockTranslator<'c> {
    pub prefix: String,
    pub fail_on: HashSet<String>,
    /// Fail this many times on each text before succeeding (retryable errors).
    pub transient_failures: u32,
    pub rate: RateLimit,
    clock: &'c dyn Clock,
    calls: Mutex<Vec<Duration>>,
    seen: Mutex<std::collections::HashMap<String, u32>>,
}

impl<'c> MockTranslator<'c> {
    pub fn identity(clock: &'c dyn Clock) -> Self {
        MockTranslator {
            prefix: String::new(),
            fail_on: HashSet::new(),
            transient_failures: 0,
            rate: RateLimit {
                max_calls_per_second: 0.0,
            },
            clock,
            calls: Mutex::new(Vec::new()),
            seen: Mutex::new(Default::default()),
        }
    }

    pub fn call_times(&self) -> Vec<Duration> {
        self.calls.lock().unwrap().clone()
    }
}

impl TranslationClient for MockTranslator<'_> {
    fn translate(&self, text: &str, _src: &str, _tgt: &str) -> std::result::Result<String, TranslateError> {
        self.calls.lock().unwrap().push(self.clock.now());
        if self.fail_on.contains(text) {
            return Err(TranslateError {
                message: format!("refused to translate {text:?}"),
                retryable: false,
            });
        }
        let mut seen = self.seen.lock().unwrap();
        let n = seen.entry(text.to_string()).or_default();
        if *n < self.transient_failures {
            *n += 1;
            return Err(TranslateError {
                message: "busy".into(),
                retryable: true,
            });
        }
        Ok(format!("{}{text}", self.prefix))
    }

    fn rate_limit(&self) -> RateLimit {
        self.rate
    }
}

#[derive(Serialize)]
struct HttpRequest<'a> {
    q: &'a str,
    source: &'a str,
    target: &'a str,
}

#[derive(Deserialize)]
struct HttpResponse {
    #[serde(rename = "translatedText")]
    translated_text: String,
}

/// Translation over HTTP: `POST {q, source, target}` answered by
/// `{translatedText}`. The key, if any, is read from `INDICLM_TRANSLATE_KEY`
/// and sent as a bearer token.
pub struct HttpTranslationClient {
    pub endpoint: String,
    pub rate: RateLimit,
    api_key: Option<String>,
    http: reqwest::blocking::Client,
}

pub const TRANSLATE_KEY_ENV: &str = "INDICLM_TRANSLATE_KEY";

impl HttpTranslationClient {
    pub fn new(endpoint: &str, rate: RateLimit) -> Result<Self> {
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(30))
            .build()
            .map_err(|e| Error::Config(format!("http client: {e}")))?;
        Ok(HttpTranslationClient {
            endpoint: endpoint.to_string(),
            rate,
            api_key: std::env::var(TRANSLATE_KEY_ENV).ok().filter(|k| !k.is_empty()),
            http,
        })
    }
}

impl TranslationClient for HttpTranslationClient {
    fn translate(&self, text: &str, source_lang: &str, target_lang: &str) -> std::result::Result<String, TranslateError> {
        let mut req = self.http.post(&self.endpoint).json(&HttpRequest {
            q: text,
            source: source_lang,
            target: target_lang,
        });
        if let Some(k) = &self.api_key {
            req = req.bearer_auth(k);
        }
        let resp = req.send().map_err(|e| TranslateError {
            message: e.to_string(),
            retryable: true,
        })?;
        let status = resp.status();
        if !status.is_success() {
            return Err(TranslateError {
                message: format!("server answered {status}"),
                retryable: status.as_u16() == 429 || status.is_server_error(),
            });
        }
        resp.json::<HttpResponse>()
            .map(|r| r.translated_text)
            .map_err(|e| TranslateError {
                message: format!("bad response body: {e}"),
                retryable: false,
            })
    }

    fn rate_limit(&self) -> RateLimit {
        self.rate
    }
}
