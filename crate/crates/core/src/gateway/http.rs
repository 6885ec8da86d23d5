//! OpenAI-compatible HTTP client for completions, chat completions and
//! embeddings.

use std::time::Duration;

use reqwest::blocking::{Client, Response};
use reqwest::StatusCode;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{Backend, BackendKind, Embedder, GatewayError, GenerationRequest, GenerationResponse, TokenLogprob};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireFlavor {
    /// `/v1/chat/completions` request and reply shapes.
    #[default]
    Chat,
    /// Legacy `/v1/completions` shapes.
    Completions,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Full endpoint URL, e.g. `http://localhost:8000/v1/chat/completions`.
    pub url: String,
    #[serde(default)]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default)]
    pub flavor: WireFlavor,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff")]
    pub retry_backoff_ms: u64,
    #[serde(default = "default_top_logprobs")]
    pub top_logprobs: u32,
}

fn default_timeout() -> f64 {
    60.0
}
fn default_retries() -> u32 {
    3
}
fn default_backoff() -> u64 {
    500
}
fn default_top_logprobs() -> u32 {
    5
}

impl HttpConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            api_key: None,
            timeout_secs: default_timeout(),
            flavor: WireFlavor::default(),
            max_retries: default_retries(),
            retry_backoff_ms: default_backoff(),
            top_logprobs: default_top_logprobs(),
        }
    }
}

struct Transport {
    client: Client,
    config: HttpConfig,
}

impl Transport {
    fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        let client = Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| GatewayError::BackendUnavailable(e.to_string()))?;
        Ok(Self { client, config })
    }

    /// POSTs `body`, retrying connection failures, 429 and 5xx with
    /// exponential backoff (or the server's `Retry-After`).
    fn post(&self, body: &Value) -> Result<Value, GatewayError> {
        let mut attempt = 0;
        loop {
            let mut rb = self.client.post(&self.config.url).json(body);
            if let Some(key) = &self.config.api_key {
                rb = rb.bearer_auth(key);
            }
            let outcome = rb.send();
            let retry_after = match outcome {
                Ok(resp) if resp.status().is_success() => {
                    return resp.json::<Value>().map_err(|e| GatewayError::MalformedBackendReply(e.to_string()));
                }
                Ok(resp) if is_retryable(resp.status()) && attempt < self.config.max_retries => retry_after(&resp),
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    return Err(GatewayError::BackendUnavailable(format!("HTTP {status}: {}", truncate(&text, 200))));
                }
                Err(e) if e.is_timeout() => {
                    if attempt >= self.config.max_retries {
                        return Err(GatewayError::Timeout);
                    }
                    None
                }
                Err(e) => {
                    if attempt >= self.config.max_retries {
                        return Err(GatewayError::BackendUnavailable(e.to_string()));
                    }
                    None
                }
            };
            let backoff = Duration::from_millis(self.config.retry_backoff_ms.saturating_mul(1 << attempt.min(10)));
            std::thread::sleep(retry_after.unwrap_or(backoff));
            attempt += 1;
        }
    }
}

fn is_retryable(status: StatusCode) -> bool {
    status == StatusCode::TOO_MANY_REQUESTS || status.is_server_error()
}

fn retry_after(resp: &Response) -> Option<Duration> {
    resp.headers()
        .get(reqwest::header::RETRY_AFTER)?
        .to_str()
        .ok()?
        .trim()
        .parse::<f64>()
        .ok()
        .filter(|s| s.is_finite() && *s >= 0.0)
        .map(|s| Duration::from_secs_f64(s.min(60.0)))
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

pub struct HttpBackend {
    transport: Transport,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, GatewayError> {
        Ok(Self { transport: Transport::new(config)? })
    }

    pub fn request_body(&self, req: &GenerationRequest) -> Value {
        let cfg = &self.transport.config;
        match cfg.flavor {
            WireFlavor::Chat => {
                let mut body = json!({
                    "model": req.model_id,
                    "messages": [{"role": "user", "content": req.prompt}],
                    "max_tokens": req.max_new_tokens,
                    "temperature": req.temperature,
                });
                if req.logprobs_requested {
                    body["logprobs"] = json!(true);
                    body["top_logprobs"] = json!(cfg.top_logprobs);
                }
                body
            }
            WireFlavor::Completions => {
                let mut body = json!({
                    "model": req.model_id,
                    "prompt": req.prompt,
                    "max_tokens": req.max_new_tokens,
                    "temperature": req.temperature,
                });
                if req.logprobs_requested {
                    body["logprobs"] = json!(cfg.top_logprobs);
                }
                body
            }
        }
    }
}

/// Parses the first choice of a completion reply.
pub(crate) fn parse_reply(flavor: WireFlavor, reply: &Value) -> Result<GenerationResponse, GatewayError> {
    let malformed = |m: &str| GatewayError::MalformedBackendReply(m.to_string());
    let choice = reply.get("choices").and_then(|c| c.get(0)).ok_or_else(|| malformed("missing choices[0]"))?;
    let (text, logprobs) = match flavor {
        WireFlavor::Chat => {
            let text = choice
                .pointer("/message/content")
                .and_then(Value::as_str)
                .ok_or_else(|| malformed("missing choices[0].message.content"))?;
            let first = choice.pointer("/logprobs/content/0");
            let lps = first.map(|f| match f.get("top_logprobs").and_then(Value::as_array) {
                Some(tops) if !tops.is_empty() => tops.iter().filter_map(token_entry).collect(),
                _ => token_entry(f).into_iter().collect::<Vec<_>>(),
            });
            (text, lps)
        }
        WireFlavor::Completions => {
            let text = choice.get("text").and_then(Value::as_str).ok_or_else(|| malformed("missing choices[0].text"))?;
            let lp = choice.get("logprobs").filter(|v| !v.is_null());
            let lps = lp.map(|lp| match lp.pointer("/top_logprobs/0").and_then(Value::as_object) {
                Some(map) => map.iter().filter_map(|(t, v)| v.as_f64().map(|l| TokenLogprob { token: t.clone(), logprob: l })).collect(),
                None => match (lp.pointer("/tokens/0").and_then(Value::as_str), lp.pointer("/token_logprobs/0").and_then(Value::as_f64)) {
                    (Some(t), Some(l)) => vec![TokenLogprob { token: t.to_string(), logprob: l }],
                    _ => Vec::new(),
                },
            });
            (text, lps)
        }
    };
    let mut lps: Option<Vec<TokenLogprob>> = logprobs.filter(|v: &Vec<TokenLogprob>| !v.is_empty());
    if let Some(v) = &mut lps {
        // logprobs are non-positive by definition; clamp server rounding noise
        for t in v.iter_mut() {
            t.logprob = t.logprob.min(0.0);
        }
    }
    Ok(GenerationResponse { text: text.to_string(), token_logprobs: lps, backend: BackendKind::Http, cached: false })
}

fn token_entry(v: &Value) -> Option<TokenLogprob> {
    Some(TokenLogprob { token: v.get("token")?.as_str()?.to_string(), logprob: v.get("logprob")?.as_f64()? })
}

impl Backend for HttpBackend {
    fn id(&self) -> String {
        format!("http:{}", self.transport.config.url)
    }

    fn generate(&self, req: &GenerationRequest) -> Result<GenerationResponse, GatewayError> {
        let reply = self.transport.post(&self.request_body(req))?;
        parse_reply(self.transport.config.flavor, &reply)
    }
}

/// Client for an OpenAI-compatible `/v1/embeddings` endpoint.
pub struct HttpEmbedder {
    transport: Transport,
    model: String,
}

impl HttpEmbedder {
    pub fn new(config: HttpConfig, model: impl Into<String>) -> Result<Self, GatewayError> {
        Ok(Self { transport: Transport::new(config)?, model: model.into() })
    }
}

impl Embedder for HttpEmbedder {
    fn id(&self) -> String {
        format!("http:{}#{}", self.transport.config.url, self.model)
    }

    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, GatewayError> {
        let reply = self.transport.post(&json!({"model": self.model, "input": texts}))?;
        let data =
            reply.get("data").and_then(Value::as_array).ok_or_else(|| GatewayError::MalformedBackendReply("missing data array".into()))?;
        let mut rows: Vec<(usize, Vec<f32>)> = data
            .iter()
            .enumerate()
            .map(|(pos, item)| {
                let index = item.get("index").and_then(Value::as_u64).map_or(pos, |i| i as usize);
                let vec = item
                    .get("embedding")
                    .and_then(Value::as_array)
                    .ok_or_else(|| GatewayError::MalformedBackendReply("missing embedding".into()))?
                    .iter()
                    .map(|x| x.as_f64().map(|f| f as f32))
                    .collect::<Option<Vec<f32>>>()
                    .ok_or_else(|| GatewayError::MalformedBackendReply("non-numeric embedding".into()))?;
                Ok((index, vec))
            })
            .collect::<Result<_, GatewayError>>()?;
        rows.sort_by_key(|(i, _)| *i);
        Ok(rows.into_iter().map(|(_, v)| v).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_chat_reply_with_top_logprobs() {
        let reply = json!({
            "choices": [{
                "message": {"role": "assistant", "content": "positive"},
                "logprobs": {"content": [{
                    "token": "positive", "logprob": -0.1,
                    "top_logprobs": [
                        {"token": "positive", "logprob": -0.1},
                        {"token": "negative", "logprob": -2.4}
                    ]
                }]}
            }]
        });
        let r = parse_reply(WireFlavor::Chat, &reply).unwrap();
        assert_eq!(r.text, "positive");
        assert_eq!(r.token_logprobs.unwrap().len(), 2);
    }

    #[test]
    fn parses_completions_reply() {
        let reply = json!({"choices": [{"text": " great", "logprobs": {
            "tokens": [" great"], "token_logprobs": [-0.2],
            "top_logprobs": [{" great": -0.2, " terrible": -1.9}]
        }}]});
        let r = parse_reply(WireFlavor::Completions, &reply).unwrap();
        assert_eq!(r.text, " great");
        assert_eq!(r.token_logprobs.unwrap().len(), 2);

        let bare = json!({"choices": [{"text": "x", "logprobs": null}]});
        assert!(parse_reply(WireFlavor::Completions, &bare).unwrap().token_logprobs.is_none());
    }

    #[test]
    fn malformed_replies() {
        assert!(matches!(parse_reply(WireFlavor::Chat, &json!({"choices": []})), Err(GatewayError::MalformedBackendReply(_))));
        assert!(parse_reply(WireFlavor::Completions, &json!({"choices": [{"message": {}}]})).is_err());
    }

    #[test]
    fn request_bodies() {
        let b = HttpBackend::new(HttpConfig::new("http://127.0.0.1:9/v1/chat/completions")).unwrap();
        let body = b.request_body(&GenerationRequest::greedy("llama", "hi"));
        assert_eq!(body["messages"][0]["content"], "hi");
        assert_eq!(body["logprobs"], true);
        assert_eq!(body["temperature"], 0.0);

        let mut cfg = HttpConfig::new("http://127.0.0.1:9/v1/completions");
        cfg.flavor = WireFlavor::Completions;
        let b = HttpBackend::new(cfg).unwrap();
        let body = b.request_body(&GenerationRequest::greedy("phi-2", "hi"));
        assert_eq!(body["prompt"], "hi");
        assert_eq!(body["logprobs"], 5);
    }
}
