//! HTTP + JSON clients for model servers.

use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tracing::warn;

use super::{
    BackendError, Decoding, EntailmentModel, EntailmentRequest, GenerationRequest, Generator, NliProbabilities,
    DEFAULT_INFLIGHT_LIMIT,
};

#[derive(Debug, Clone)]
pub struct HttpSettings {
    pub base_url: String,
    /// Sent as `Authorization: Bearer <key>` when set.
    pub api_key: Option<String>,
    pub timeout: Duration,
    /// Extra attempts after a transport error.
    pub retries: u32,
    pub inflight_limit: usize,
}

impl HttpSettings {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpSettings {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: None,
            timeout: Duration::from_secs(120),
            retries: 2,
            inflight_limit: DEFAULT_INFLIGHT_LIMIT,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
struct InflightLimiter {
    limit: usize,
    active: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a InflightLimiter);

impl InflightLimiter {
    fn new(limit: usize) -> Self {
        InflightLimiter {
            limit: limit.max(1),
            active: Mutex::new(0),
            freed: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut active = self.active.lock().expect("poisoned");
        while *active >= self.limit {
            active = self.freed.wait(active).expect("poisoned");
        }
        *active += 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.active.lock().expect("poisoned") -= 1;
        self.0.freed.notify_one();
    }
}

/// Shared JSON POST client with retries on transport errors. Requests are
/// idempotent, so a retry never duplicates an effect.
pub(crate) struct JsonClient {
    settings: HttpSettings,
    agent: ureq::Agent,
    limiter: InflightLimiter,
}

impl JsonClient {
    pub(crate) fn new(settings: HttpSettings) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(settings.timeout))
            .build()
            .into();
        let limiter = InflightLimiter::new(settings.inflight_limit);
        JsonClient {
            settings,
            agent,
            limiter,
        }
    }

    pub(crate) fn post<B: Serialize, R: DeserializeOwned>(&self, path: &str, body: &B) -> Result<R, BackendError> {
        let url = format!("{}{}", self.settings.base_url, path);
        let mut attempt = 0;
        loop {
            let result = {
                let _permit = self.limiter.acquire();
                self.post_once(&url, body)
            };
            match result {
                Err(e) if e.is_retryable() && attempt < self.settings.retries => {
                    attempt += 1;
                    warn!(%url, attempt, error = %e, "retrying request");
                    std::thread::sleep(Duration::from_millis(100 * u64::from(attempt)));
                }
                other => return other,
            }
        }
    }

    fn post_once<B: Serialize, R: DeserializeOwned>(&self, url: &str, body: &B) -> Result<R, BackendError> {
        let mut req = self.agent.post(url);
        if let Some(key) = &self.settings.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let resp = req.send_json(body).map_err(classify)?;
        resp.into_body().read_json::<R>().map_err(|e| match e {
            ureq::Error::Json(e) => BackendError::Protocol(format!("{url}: malformed response: {e}")),
            other => classify(other),
        })
    }
}

fn classify(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::StatusCode(code) if code >= 500 || code == 429 => {
            BackendError::Transport(format!("server returned status {code}"))
        }
        ureq::Error::StatusCode(code) => BackendError::Protocol(format!("server returned status {code}")),
        ureq::Error::Json(e) => BackendError::Protocol(format!("malformed response: {e}")),
        ureq::Error::BadUri(u) => BackendError::InvalidRequest(format!("bad url {u}")),
        other => BackendError::Transport(other.to_string()),
    }
}

#[derive(Debug, Serialize)]
struct GenerateBody<'a> {
    prompt: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    greedy: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    temperature: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sample_index: Option<u32>,
    stop: &'a [String],
    max_tokens: u32,
}

#[derive(Debug, Deserialize)]
struct GenerateResponse {
    text: String,
}

pub struct HttpGenerator {
    client: JsonClient,
}

impl HttpGenerator {
    pub fn new(settings: HttpSettings) -> Self {
        HttpGenerator {
            client: JsonClient::new(settings),
        }
    }
}

impl Generator for HttpGenerator {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let (greedy, temperature, sample_index) = match request.decoding {
            Decoding::Greedy => (Some(true), None, None),
            Decoding::Sampled { temperature } => (None, Some(temperature), Some(request.sample_index)),
        };
        let body = GenerateBody {
            prompt: &request.prompt,
            greedy,
            temperature,
            sample_index,
            stop: &request.stop_markers,
            max_tokens: request.max_tokens,
        };
        let resp: GenerateResponse = self.client.post("/generate", &body)?;
        Ok(resp.text)
    }
}

pub struct HttpEntailment {
    client: JsonClient,
}

impl HttpEntailment {
    pub fn new(settings: HttpSettings) -> Self {
        HttpEntailment {
            client: JsonClient::new(settings),
        }
    }
}

impl EntailmentModel for HttpEntailment {
    fn probabilities(&self, request: &EntailmentRequest) -> Result<NliProbabilities, BackendError> {
        self.client.post("/entail", request)
    }
}
