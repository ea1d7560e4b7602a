use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::limit::InflightLimit;
use super::retry::{RetryPolicy, TransportError};
use super::{truncate_top_k, Backend, GenerationParams, ModelCapabilities};
use crate::error::{Error, Result};
use crate::types::{word_units, FinishReason, GenerationOutput, OutToken, StepLogprobs};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpenAiConfig {
    pub name: String,
    pub base_url: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    /// Per-step log-probability cap advertised by the service; `None` for text-only endpoints.
    #[serde(default = "default_cap")]
    pub top_logprobs: Option<usize>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

fn default_cap() -> Option<usize> {
    Some(20)
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout() -> u64 {
    60
}

/// Client for `POST {base_url}/v1/chat/completions`.
pub struct OpenAiBackend {
    config: OpenAiConfig,
    client: reqwest::blocking::Client,
    retry: RetryPolicy,
    limit: Arc<InflightLimit>,
}

impl OpenAiBackend {
    pub fn new(config: OpenAiConfig) -> Result<Self> {
        let client = http_client(config.timeout_secs)?;
        let limit = Arc::new(InflightLimit::new(config.max_in_flight));
        Ok(Self {
            config,
            client,
            retry: RetryPolicy::default(),
            limit,
        })
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn config(&self) -> &OpenAiConfig {
        &self.config
    }

    fn request_body(&self, prompt: &str, params: &GenerationParams) -> Value {
        let mut body = json!({
            "model": self.config.model,
            "messages": [{"role": "user", "content": prompt}],
            "max_tokens": params.max_tokens,
            "temperature": params.temperature,
        });
        if let Some(k) = params.effective_k(&self.capabilities()) {
            body["logprobs"] = json!(true);
            body["top_logprobs"] = json!(k);
        }
        if let Some(stop) = &params.stop {
            body["stop"] = json!(stop);
        }
        body
    }
}

pub(crate) fn http_client(timeout_secs: u64) -> Result<reqwest::blocking::Client> {
    reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(timeout_secs))
        .build()
        .map_err(|e| Error::backend(format!("cannot build http client: {e}")))
}

pub(crate) fn new_request_id() -> String {
    format!("{:016x}", rand::random::<u64>())
}

/// One POST attempt with JSON in and JSON out, failures classified for retry.
pub(crate) fn post_json(
    client: &reqwest::blocking::Client,
    url: &str,
    api_key: Option<&str>,
    request_id: &str,
    body: &Value,
) -> std::result::Result<Value, TransportError> {
    let mut req = client
        .post(url)
        .header("x-request-id", request_id)
        .json(body);
    if let Some(key) = api_key {
        req = req.bearer_auth(key);
    }
    let resp = req.send().map_err(|e| TransportError::Transient {
        message: format!("request to {url} failed: {e}"),
        retry_after: None,
    })?;
    let status = resp.status();
    if status.is_success() {
        return resp.json::<Value>().map_err(|e| TransportError::Fatal {
            message: format!("undecodable response from {url}: {e}"),
        });
    }
    let retry_after = resp
        .headers()
        .get(reqwest::header::RETRY_AFTER)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.trim().parse::<f64>().ok())
        .filter(|s| s.is_finite() && *s >= 0.0)
        .map(Duration::from_secs_f64);
    let detail = resp.text().unwrap_or_default();
    let message = format!(
        "{url} returned {status}: {}",
        detail.chars().take(300).collect::<String>()
    );
    if status.as_u16() == 429 || status.is_server_error() {
        Err(TransportError::Transient {
            message,
            retry_after,
        })
    } else {
        Err(TransportError::Fatal { message })
    }
}

impl From<TransportError> for Error {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Transient {
                message,
                retry_after,
            } => Error::Backend {
                message,
                retry_after,
            },
            TransportError::Fatal { message } => Error::Backend {
                message,
                retry_after: None,
            },
        }
    }
}

impl Backend for OpenAiBackend {
    fn name(&self) -> &str {
        &self.config.name
    }

    fn capabilities(&self) -> ModelCapabilities {
        ModelCapabilities {
            provides_top_k_logprobs: self.config.top_logprobs,
            provides_full_logits: false,
            provides_gradients: false,
            tokenizer_available: false,
        }
    }

    fn generate(&self, prompt: &str, params: &GenerationParams) -> Result<GenerationOutput> {
        params.validate()?;
        if params.max_tokens == 0 {
            return Ok(GenerationOutput::empty(FinishReason::Length));
        }
        let url = format!(
            "{}/v1/chat/completions",
            self.config.base_url.trim_end_matches('/')
        );
        let body = self.request_body(prompt, params);
        // one id per logical request; retries reuse it so the server can dedupe
        let request_id = new_request_id();
        let _permit = self.limit.acquire();
        let value = self.retry.run(|_| {
            post_json(
                &self.client,
                &url,
                self.config.api_key.as_deref(),
                &request_id,
                &body,
            )
        })?;
        let k = params.effective_k(&self.capabilities());
        parse_chat_completion(&value, k)
    }
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    message: Message,
    #[serde(default)]
    finish_reason: Option<String>,
    #[serde(default)]
    logprobs: Option<ChoiceLogprobs>,
}

#[derive(Deserialize)]
struct Message {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceLogprobs {
    #[serde(default)]
    content: Option<Vec<TokenLogprob>>,
}

#[derive(Deserialize)]
struct TokenLogprob {
    token: String,
    logprob: f64,
    #[serde(default)]
    top_logprobs: Vec<TopEntry>,
}

#[derive(Deserialize)]
struct TopEntry {
    token: String,
    logprob: f64,
}

/// Converts a chat-completions response body into a [`GenerationOutput`],
/// keeping at most `k` log-probabilities per step.
pub fn parse_chat_completion(value: &Value, k: Option<usize>) -> Result<GenerationOutput> {
    let resp: ChatResponse = serde_json::from_value(value.clone())
        .map_err(|e| Error::backend(format!("malformed chat completion: {e}")))?;
    let choice = resp
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| Error::backend("chat completion without choices"))?;
    let text = choice.message.content.unwrap_or_default();
    let finish_reason = match choice.finish_reason.as_deref() {
        Some("stop") => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        _ => FinishReason::Other,
    };
    let content = choice.logprobs.and_then(|l| l.content);
    let (tokens, step_logprobs, step_confidence) = match (content, k) {
        (Some(steps), Some(k)) if !steps.is_empty() => {
            let mut tokens = Vec::with_capacity(steps.len());
            let mut maps = Vec::with_capacity(steps.len());
            let mut conf = Vec::with_capacity(steps.len());
            for step in steps {
                let mut map: StepLogprobs = BTreeMap::new();
                for e in &step.top_logprobs {
                    map.entry(e.token.clone()).or_insert(e.logprob.min(0.0));
                }
                let map = truncate_top_k(&map, k);
                conf.push(step.logprob.min(0.0).exp());
                tokens.push(OutToken {
                    surface: step.token,
                    id: None,
                });
                maps.push(map);
            }
            (tokens, Some(maps), Some(conf))
        }
        _ => {
            let tokens = word_units(&text)
                .into_iter()
                .map(|u| OutToken {
                    surface: u.surface,
                    id: None,
                })
                .collect();
            (tokens, None, None)
        }
    };
    Ok(GenerationOutput {
        tokens,
        text,
        step_logprobs,
        step_confidence,
        finish_reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn body(top: usize) -> Value {
        let tops: Vec<Value> = (0..top)
            .map(|i| json!({"token": format!("t{i}"), "logprob": -(i as f64) * 0.1}))
            .collect();
        json!({
            "choices": [{
                "message": {"role": "assistant", "content": "t0 t0"},
                "finish_reason": "length",
                "logprobs": {"content": [
                    {"token": "t0", "logprob": 0.0, "top_logprobs": tops},
                    {"token": "t0", "logprob": 0.0, "top_logprobs": tops},
                ]}
            }]
        })
    }

    #[test]
    fn parses_and_caps_logprobs() {
        let out = parse_chat_completion(&body(30), Some(20)).unwrap();
        assert_eq!(out.tokens.len(), 2);
        assert_eq!(out.finish_reason, FinishReason::Length);
        let steps = out.step_logprobs.as_ref().unwrap();
        assert!(steps.iter().all(|m| m.len() <= 20));
        assert!(steps[0].contains_key("t0"));
        assert!(out.validate().is_ok());
    }

    #[test]
    fn text_only_response_falls_back_to_words() {
        let v = json!({"choices": [{"message": {"content": "It is POSITIVE."}, "finish_reason": "stop"}]});
        let out = parse_chat_completion(&v, None).unwrap();
        assert_eq!(out.surfaces(), ["It", "is", "POSITIVE"]);
        assert!(out.step_logprobs.is_none());
    }

    #[test]
    fn empty_choices_is_backend_error() {
        let err = parse_chat_completion(&json!({"choices": []}), None).unwrap_err();
        assert!(err.is_backend());
    }
}
