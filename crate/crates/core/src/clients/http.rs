use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::Duration;

use serde_json::{json, Value};

use super::{ChatClient, ChatRequest, ChatResponse, ClientError, Role, TokenLogprob};

pub const ENV_ENDPOINT: &str = "IMAGESET_CHAT_ENDPOINT";
pub const ENV_API_KEY: &str = "IMAGESET_API_KEY";
pub const ENV_MODEL: &str = "IMAGESET_CHAT_MODEL";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TransportError {
    Timeout,
    Io(String),
}

/// Sends one JSON POST. Implementations must not retry on their own.
pub trait Transport: Send + Sync {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &str,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError>;
}

/// Blocking HTTP transport.
pub struct UreqTransport;

impl Transport for UreqTransport {
    fn post_json(
        &self,
        url: &str,
        headers: &[(String, String)],
        body: &str,
        timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        let mut req = agent.post(url).header("Content-Type", "application/json");
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let mut resp = req.send(body).map_err(|e| match e {
            ureq::Error::Timeout(_) => TransportError::Timeout,
            other => TransportError::Io(other.to_string()),
        })?;
        let status = resp.status().as_u16();
        let body = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| TransportError::Io(e.to_string()))?;
        Ok(HttpResponse { status, body })
    }
}

/// Replays canned transport results in order and records every body sent.
#[derive(Default)]
pub struct ScriptedTransport {
    script: Mutex<VecDeque<Result<HttpResponse, TransportError>>>,
    sent: Mutex<Vec<String>>,
}

impl ScriptedTransport {
    pub fn new(script: Vec<Result<HttpResponse, TransportError>>) -> Self {
        Self {
            script: Mutex::new(script.into()),
            sent: Mutex::new(Vec::new()),
        }
    }

    pub fn sent(&self) -> Vec<String> {
        self.sent.lock().unwrap().clone()
    }
}

impl Transport for ScriptedTransport {
    fn post_json(
        &self,
        _url: &str,
        _headers: &[(String, String)],
        body: &str,
        _timeout: Duration,
    ) -> Result<HttpResponse, TransportError> {
        self.sent.lock().unwrap().push(body.to_string());
        self.script
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or(Err(TransportError::Io("script exhausted".into())))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    /// Delay before retry `k` (0-based) is `base_delay · 2^k`.
    pub base_delay: Duration,
    pub timeout: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 2,
            base_delay: Duration::from_millis(500),
            timeout: Duration::from_secs(60),
        }
    }
}

/// JSON body in the chat-completions format. Message content is a list of
/// `text` and `image_url` parts; log-probabilities are requested with
/// `logprobs` and `top_logprobs`. Sampling is greedy.
pub fn request_body(req: &ChatRequest) -> Value {
    let messages: Vec<Value> = req
        .messages
        .iter()
        .map(|m| {
            let role = match m.role {
                Role::System => "system",
                Role::User => "user",
                Role::Assistant => "assistant",
            };
            let mut parts = vec![json!({"type": "text", "text": m.text})];
            for img in &m.images {
                parts.push(json!({"type": "image_url", "image_url": {"url": img.data_url()}}));
            }
            json!({"role": role, "content": parts})
        })
        .collect();
    let mut body = json!({
        "model": req.model,
        "messages": messages,
        "max_tokens": req.max_tokens,
        "temperature": 0,
    });
    if req.logprobs {
        body["logprobs"] = json!(true);
        body["top_logprobs"] = json!(req.top_logprobs);
    }
    body
}

/// Reads `choices[0].message.content` and, when present,
/// `choices[0].logprobs.content[0].top_logprobs`.
pub fn parse_response_body(body: &str, want_logprobs: bool) -> Result<ChatResponse, ClientError> {
    let v: Value = serde_json::from_str(body).map_err(|e| ClientError::Decode(e.to_string()))?;
    let choice = v
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| ClientError::Decode("missing choices[0]".into()))?;
    let text = choice
        .pointer("/message/content")
        .and_then(Value::as_str)
        .ok_or_else(|| ClientError::Decode("missing choices[0].message.content".into()))?
        .to_string();
    let top = choice.pointer("/logprobs/content/0/top_logprobs").and_then(Value::as_array);
    let top_logprobs = match top {
        Some(items) => {
            let mut out = Vec::with_capacity(items.len());
            for it in items {
                let token = it.get("token").and_then(Value::as_str);
                let logprob = it.get("logprob").and_then(Value::as_f64);
                match (token, logprob) {
                    (Some(t), Some(l)) => out.push(TokenLogprob {
                        token: t.to_string(),
                        logprob: l,
                    }),
                    _ => return Err(ClientError::Decode("malformed top_logprobs entry".into())),
                }
            }
            Some(out)
        }
        None => None,
    };
    if want_logprobs && top_logprobs.as_ref().is_none_or(|t| t.is_empty()) {
        return Err(ClientError::Capability(
            "endpoint returned no top log-probabilities".into(),
        ));
    }
    Ok(ChatResponse { text, top_logprobs })
}

/// Chat client over any [`Transport`], with bounded retries.
pub struct HttpChatClient<T: Transport = UreqTransport> {
    pub endpoint: String,
    pub api_key: Option<String>,
    pub retry: RetryPolicy,
    transport: T,
}

impl HttpChatClient<UreqTransport> {
    /// Endpoint from `IMAGESET_CHAT_ENDPOINT`, key from `IMAGESET_API_KEY`.
    pub fn from_env() -> Result<Self, ClientError> {
        let endpoint = std::env::var(ENV_ENDPOINT)
            .map_err(|_| ClientError::Config(format!("{ENV_ENDPOINT} is not set")))?;
        let api_key = std::env::var(ENV_API_KEY).ok();
        Ok(Self::new(endpoint, api_key, UreqTransport))
    }
}

impl<T: Transport> HttpChatClient<T> {
    pub fn new(endpoint: impl Into<String>, api_key: Option<String>, transport: T) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key,
            retry: RetryPolicy::default(),
            transport,
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    fn attempt(&self, body: &str, want_logprobs: bool) -> Result<ChatResponse, ClientError> {
        let mut headers = Vec::new();
        if let Some(k) = &self.api_key {
            headers.push(("Authorization".to_string(), format!("Bearer {k}")));
        }
        let resp = self
            .transport
            .post_json(&self.endpoint, &headers, body, self.retry.timeout)
            .map_err(|e| match e {
                TransportError::Timeout => ClientError::Transient("request timed out".into()),
                TransportError::Io(m) => ClientError::Transient(m),
            })?;
        match resp.status {
            200..=299 => parse_response_body(&resp.body, want_logprobs),
            408 | 429 | 500..=599 => Err(ClientError::Transient(format!("HTTP {}", resp.status))),
            s => Err(ClientError::Permanent {
                status: s,
                body: resp.body.chars().take(500).collect(),
            }),
        }
    }
}

impl<T: Transport> ChatClient for HttpChatClient<T> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        request.validate()?;
        let body = request_body(request).to_string();
        let mut attempt = 0;
        loop {
            match self.attempt(&body, request.logprobs) {
                Err(e) if e.is_retryable() && attempt < self.retry.max_retries => {
                    let delay = self.retry.base_delay * 2u32.pow(attempt);
                    log::warn!("chat request failed ({e}); retrying in {delay:?}");
                    if !delay.is_zero() {
                        std::thread::sleep(delay);
                    }
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{ImageAttachment, Message};

    fn ok(body: &str) -> Result<HttpResponse, TransportError> {
        Ok(HttpResponse {
            status: 200,
            body: body.into(),
        })
    }

    const YES_BODY: &str = r#"{"choices":[{"message":{"content":"Yes"},"logprobs":{"content":[{"token":"Yes","logprob":-0.1,"top_logprobs":[{"token":"Yes","logprob":-0.1},{"token":"No","logprob":-2.4}]}]}}]}"#;

    fn fast() -> RetryPolicy {
        RetryPolicy {
            base_delay: Duration::ZERO,
            ..RetryPolicy::default()
        }
    }

    #[test]
    fn transient_then_success() {
        let t = ScriptedTransport::new(vec![
            Ok(HttpResponse {
                status: 503,
                body: String::new(),
            }),
            ok(YES_BODY),
        ]);
        let c = HttpChatClient::new("http://x", None, t).with_retry(fast());
        let r = c.chat(&ChatRequest::yes_no("m", vec![Message::user("q?")])).unwrap();
        assert_eq!(r.text, "Yes");
        assert_eq!(r.top_logprobs.unwrap().len(), 2);
        assert_eq!(c.transport().sent().len(), 2);
    }

    #[test]
    fn retries_are_bounded() {
        let t = ScriptedTransport::new(vec![Err(TransportError::Timeout); 5]);
        let c = HttpChatClient::new("http://x", None, t).with_retry(fast());
        let e = c.chat(&ChatRequest::new("m", vec![Message::user("q")])).unwrap_err();
        assert!(e.is_retryable());
        assert_eq!(c.transport().sent().len(), 3);
    }

    #[test]
    fn client_errors_are_permanent() {
        let t = ScriptedTransport::new(vec![Ok(HttpResponse {
            status: 401,
            body: "bad key".into(),
        })]);
        let c = HttpChatClient::new("http://x", None, t).with_retry(fast());
        let e = c.chat(&ChatRequest::new("m", vec![Message::user("q")])).unwrap_err();
        assert_eq!(
            e,
            ClientError::Permanent {
                status: 401,
                body: "bad key".into()
            }
        );
        assert_eq!(c.transport().sent().len(), 1);
    }

    #[test]
    fn missing_logprobs_is_capability_error() {
        let t = ScriptedTransport::new(vec![ok(r#"{"choices":[{"message":{"content":"Yes"}}]}"#)]);
        let c = HttpChatClient::new("http://x", None, t).with_retry(fast());
        let e = c.chat(&ChatRequest::yes_no("m", vec![Message::user("q?")])).unwrap_err();
        assert!(matches!(e, ClientError::Capability(_)));
    }

    #[test]
    fn invalid_request_never_reaches_transport() {
        let t = ScriptedTransport::new(vec![]);
        let c = HttpChatClient::new("http://x", None, t);
        let bad = ChatRequest::new(
            "m",
            vec![Message::system("s").with_images(vec![ImageAttachment::png(&[0])])],
        );
        assert!(matches!(c.chat(&bad), Err(ClientError::Precondition(_))));
        assert!(c.transport().sent().is_empty());
    }

    #[test]
    fn body_follows_chat_completions_layout() {
        let req = ChatRequest::yes_no(
            "judge",
            vec![
                Message::system("be terse"),
                Message::user("same dog?").with_images(vec![ImageAttachment::png(&[1, 2])]),
            ],
        );
        let b = request_body(&req);
        assert_eq!(b["model"], "judge");
        assert_eq!(b["max_tokens"], 1);
        assert_eq!(b["logprobs"], true);
        assert_eq!(b["top_logprobs"], 5);
        assert_eq!(b["messages"][0]["role"], "system");
        assert_eq!(b["messages"][1]["content"][0]["text"], "same dog?");
        assert_eq!(b["messages"][1]["content"][1]["image_url"]["url"], "data:image/png;base64,AQI=");
        let plain = request_body(&ChatRequest::new("m", vec![Message::user("hi")]));
        assert!(plain.get("logprobs").is_none());
    }
}
