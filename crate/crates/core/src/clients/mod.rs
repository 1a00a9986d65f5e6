//! Chat-completion wire protocol, Yes/No log-probability scoring and offline
//! fixture clients.

mod fixture;
mod http;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use fixture::{request_hash, FixtureClient, FixtureEntry, FnClient, ScriptedClient, TRANSCRIPT_SCHEMA_VERSION};
pub use http::{
    parse_response_body, request_body, HttpChatClient, HttpResponse, RetryPolicy, ScriptedTransport,
    Transport, TransportError, UreqTransport, ENV_API_KEY, ENV_ENDPOINT, ENV_MODEL,
};

/// Minimum top-k depth requested when log-probabilities are needed.
pub const MIN_TOP_LOGPROBS: u8 = 5;

/// Frozen surface forms accepted as a Yes or No first token.
pub const YES_FORMS: [&str; 3] = ["Yes", "yes", " Yes"];
pub const NO_FORMS: [&str; 3] = ["No", "no", " No"];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("invalid request: {0}")]
    Precondition(String),
    #[error("transport failure (retryable): {0}")]
    Transient(String),
    #[error("request rejected with HTTP {status}: {body}")]
    Permanent { status: u16, body: String },
    #[error("client configuration error: {0}")]
    Config(String),
    #[error("capability error: {0}")]
    Capability(String),
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("no fixture for request {0}")]
    MissingFixture(String),
    #[error("scoring error: {0}")]
    Scoring(String),
}

impl ClientError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, ClientError::Transient(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

/// An inline image, sent as a base64 data URL.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageAttachment {
    pub mime: String,
    pub base64: String,
}

impl ImageAttachment {
    pub fn png(bytes: &[u8]) -> Self {
        use base64::Engine as _;
        Self {
            mime: "image/png".into(),
            base64: base64::engine::general_purpose::STANDARD.encode(bytes),
        }
    }

    pub fn data_url(&self) -> String {
        format!("data:{};base64,{}", self.mime, self.base64)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub images: Vec<ImageAttachment>,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            text: text.into(),
            images: vec![],
        }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            text: text.into(),
            images: vec![],
        }
    }

    pub fn with_images(mut self, images: Vec<ImageAttachment>) -> Self {
        self.images = images;
        self
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<Message>,
    pub max_tokens: u32,
    /// Ask for the first token's top-k alternatives with log-probabilities.
    #[serde(default)]
    pub logprobs: bool,
    #[serde(default)]
    pub top_logprobs: u8,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, messages: Vec<Message>) -> Self {
        Self {
            model: model.into(),
            messages,
            max_tokens: 512,
            logprobs: false,
            top_logprobs: 0,
        }
    }

    /// One-token answer with top-k log-probabilities, for Yes/No scoring.
    pub fn yes_no(model: impl Into<String>, messages: Vec<Message>) -> Self {
        Self {
            model: model.into(),
            messages,
            max_tokens: 1,
            logprobs: true,
            top_logprobs: MIN_TOP_LOGPROBS,
        }
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.messages.is_empty() {
            return Err(ClientError::Precondition("request has no messages".into()));
        }
        if let Some(m) = self.messages.iter().find(|m| m.role != Role::User && !m.images.is_empty()) {
            return Err(ClientError::Precondition(format!(
                "images are only allowed on user messages, found one on a {:?} message",
                m.role
            )));
        }
        if self.logprobs && self.top_logprobs < MIN_TOP_LOGPROBS {
            return Err(ClientError::Precondition(format!(
                "top_logprobs must be at least {MIN_TOP_LOGPROBS}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenLogprob {
    pub token: String,
    pub logprob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    /// Top-k candidates for the first generated token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub top_logprobs: Option<Vec<TokenLogprob>>,
}

impl ChatResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            top_logprobs: None,
        }
    }
}

pub trait ChatClient: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError>;
}

impl<C: ChatClient + ?Sized> ChatClient for &C {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        (**self).chat(request)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for Box<C> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        (**self).chat(request)
    }
}

impl<C: ChatClient + ?Sized> ChatClient for std::sync::Arc<C> {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        (**self).chat(request)
    }
}

/// `P(yes)` from two log-probabilities. Evaluated so that swapping the
/// arguments gives exactly the complement.
pub fn two_way_softmax(yes: f64, no: f64) -> f64 {
    if yes >= no {
        1.0 / (1.0 + (no - yes).exp())
    } else {
        1.0 - 1.0 / (1.0 + (yes - no).exp())
    }
}

fn best_match(cands: &[TokenLogprob], forms: &[&str]) -> Option<f64> {
    cands
        .iter()
        .filter(|c| forms.contains(&c.token.as_str()))
        .map(|c| c.logprob)
        .fold(None, |acc, v| Some(acc.map_or(v, |a: f64| a.max(v))))
}

/// Softmax over the best-ranked Yes and No candidates of the first token.
pub fn yes_probability(response: &ChatResponse) -> Result<f64, ClientError> {
    let cands = response
        .top_logprobs
        .as_ref()
        .filter(|c| !c.is_empty())
        .ok_or_else(|| ClientError::Capability("response carries no first-token log-probabilities".into()))?;
    let yes = best_match(cands, &YES_FORMS);
    let no = best_match(cands, &NO_FORMS);
    match (yes, no) {
        (Some(y), Some(n)) if y.is_finite() && n.is_finite() => Ok(two_way_softmax(y, n)),
        (Some(_), Some(_)) => Err(ClientError::Scoring("non-finite Yes/No log-probability".into())),
        (None, None) => Err(ClientError::Scoring("neither Yes nor No among the top candidates".into())),
        (None, _) => Err(ClientError::Scoring("no Yes candidate among the top candidates".into())),
        (_, None) => Err(ClientError::Scoring("no No candidate among the top candidates".into())),
    }
}

/// Runs `f` over `items` with at most `limit` calls in flight, keeping input
/// order in the output.
pub fn bounded_map<T: Sync, R: Send>(
    items: &[T],
    limit: usize,
    f: impl Fn(&T) -> R + Sync + Send,
) -> Vec<R> {
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(limit.max(1))
        .build()
        .expect("thread pool");
    pool.install(|| items.par_iter().map(&f).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resp(c: &[(&str, f64)]) -> ChatResponse {
        ChatResponse {
            text: String::new(),
            top_logprobs: Some(
                c.iter()
                    .map(|&(t, l)| TokenLogprob {
                        token: t.into(),
                        logprob: l,
                    })
                    .collect(),
            ),
        }
    }

    #[test]
    fn yes_probability_examples() {
        let p = yes_probability(&resp(&[("Yes", 1.0), ("No", -1.0)])).unwrap();
        let oracle = 2f64.exp() / (2f64.exp() + 1.0);
        assert!((p - oracle).abs() < 1e-15);
        assert!((p - 0.8808).abs() < 1e-4);
        assert_eq!(yes_probability(&resp(&[(" yes", 0.0), ("yes", -0.3), ("no", -0.3)])).unwrap(), 0.5);
        assert!(matches!(
            yes_probability(&resp(&[("Yes", -0.1), ("Sure", -3.0)])),
            Err(ClientError::Scoring(_))
        ));
        assert!(matches!(
            yes_probability(&ChatResponse::text("Yes")),
            Err(ClientError::Capability(_))
        ));
    }

    #[test]
    fn best_variant_is_used() {
        let p = yes_probability(&resp(&[("yes", -2.0), (" Yes", -0.5), ("No", -1.5), ("no", -4.0)])).unwrap();
        assert_eq!(p, two_way_softmax(-0.5, -1.5));
    }

    #[test]
    fn swapped_logits_are_complementary() {
        let mut x = 0.123f64;
        for _ in 0..10_000 {
            x = (x * 9301.0 + 49297.0) % 233280.0;
            let a = x / 233280.0 * 40.0 - 20.0;
            let b = ((x * 7.0) % 233280.0) / 233280.0 * 40.0 - 20.0;
            assert_eq!(two_way_softmax(a, b) + two_way_softmax(b, a), 1.0);
        }
    }

    #[test]
    fn image_on_system_message_is_rejected() {
        let img = ImageAttachment::png(&[1, 2, 3]);
        let req = ChatRequest::new("m", vec![Message::system("s").with_images(vec![img.clone()])]);
        assert!(matches!(req.validate(), Err(ClientError::Precondition(_))));
        let ok = ChatRequest::new("m", vec![Message::user("u").with_images(vec![img])]);
        ok.validate().unwrap();
        assert!(ChatRequest::new("m", vec![]).validate().is_err());
        let mut shallow = ChatRequest::yes_no("m", vec![Message::user("q")]);
        shallow.top_logprobs = 2;
        assert!(shallow.validate().is_err());
    }

    #[test]
    fn bounded_map_keeps_order() {
        let xs: Vec<u32> = (0..50).collect();
        assert_eq!(bounded_map(&xs, 3, |x| x * 2), xs.iter().map(|x| x * 2).collect::<Vec<_>>());
    }
}
