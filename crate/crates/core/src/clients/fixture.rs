use std::collections::{HashMap, VecDeque};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatClient, ChatRequest, ChatResponse, ClientError};

pub const TRANSCRIPT_SCHEMA_VERSION: u32 = 1;

/// Hex SHA-256 of the request's canonical JSON encoding.
pub fn request_hash(req: &ChatRequest) -> String {
    let json = serde_json::to_string(req).expect("request serializes");
    format!("{:x}", Sha256::digest(json.as_bytes()))
}

/// One recorded exchange. An entry matches either by exact request hash or,
/// when `request_hash` is absent, when every `contains` string occurs in the
/// request's message text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixtureEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub request_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    pub response: ChatResponse,
}

impl FixtureEntry {
    pub fn exact(req: &ChatRequest, response: ChatResponse) -> Self {
        Self {
            request_hash: Some(request_hash(req)),
            contains: vec![],
            response,
        }
    }

    pub fn containing(needles: &[&str], response: ChatResponse) -> Self {
        Self {
            request_hash: None,
            contains: needles.iter().map(|s| s.to_string()).collect(),
            response,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Transcript {
    schema_version: u32,
    entries: Vec<FixtureEntry>,
}

/// Offline client that replays recorded responses. Lookups are pure, so the
/// same request always gets the same answer.
#[derive(Clone, Debug, Default)]
pub struct FixtureClient {
    by_hash: HashMap<String, ChatResponse>,
    patterns: Vec<(Vec<String>, ChatResponse)>,
}

impl FixtureClient {
    pub fn from_entries(entries: Vec<FixtureEntry>) -> Self {
        let mut c = Self::default();
        for e in entries {
            match e.request_hash {
                Some(h) => {
                    c.by_hash.insert(h, e.response);
                }
                None => c.patterns.push((e.contains, e.response)),
            }
        }
        c
    }

    /// Loads one transcript file, or every `*.json` file in a directory in
    /// file-name order.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ClientError> {
        let path = path.as_ref();
        let mut files = Vec::new();
        if path.is_dir() {
            let rd = std::fs::read_dir(path)
                .map_err(|e| ClientError::Config(format!("{}: {e}", path.display())))?;
            for ent in rd {
                let p = ent.map_err(|e| ClientError::Config(e.to_string()))?.path();
                if p.extension().is_some_and(|x| x == "json") {
                    files.push(p);
                }
            }
            files.sort();
        } else {
            files.push(path.to_path_buf());
        }
        let mut entries = Vec::new();
        for f in files {
            let text = std::fs::read_to_string(&f)
                .map_err(|e| ClientError::Config(format!("{}: {e}", f.display())))?;
            let t: Transcript = serde_json::from_str(&text)
                .map_err(|e| ClientError::Config(format!("{}: {e}", f.display())))?;
            if t.schema_version != TRANSCRIPT_SCHEMA_VERSION {
                return Err(ClientError::Config(format!(
                    "{}: unsupported transcript schema_version {}",
                    f.display(),
                    t.schema_version
                )));
            }
            entries.extend(t.entries);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn save(entries: &[FixtureEntry], path: impl AsRef<Path>) -> std::io::Result<()> {
        let t = Transcript {
            schema_version: TRANSCRIPT_SCHEMA_VERSION,
            entries: entries.to_vec(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&t).map_err(std::io::Error::other)?)
    }

    pub fn len(&self) -> usize {
        self.by_hash.len() + self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ChatClient for FixtureClient {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        request.validate()?;
        let h = request_hash(request);
        if let Some(r) = self.by_hash.get(&h) {
            return Ok(r.clone());
        }
        let text: String = request.messages.iter().map(|m| m.text.as_str()).collect::<Vec<_>>().join("\n");
        self.patterns
            .iter()
            .find(|(needles, _)| needles.iter().all(|n| text.contains(n.as_str())))
            .map(|(_, r)| r.clone())
            .ok_or(ClientError::MissingFixture(h))
    }
}

/// Returns queued results in order and records each request it saw.
#[derive(Default)]
pub struct ScriptedClient {
    queue: Mutex<VecDeque<Result<ChatResponse, ClientError>>>,
    seen: Mutex<Vec<ChatRequest>>,
}

impl ScriptedClient {
    pub fn new(script: Vec<Result<ChatResponse, ClientError>>) -> Self {
        Self {
            queue: Mutex::new(script.into()),
            seen: Mutex::new(Vec::new()),
        }
    }

    pub fn texts(texts: &[&str]) -> Self {
        Self::new(texts.iter().map(|t| Ok(ChatResponse::text(*t))).collect())
    }

    pub fn requests(&self) -> Vec<ChatRequest> {
        self.seen.lock().unwrap().clone()
    }
}

impl ChatClient for ScriptedClient {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        request.validate()?;
        self.seen.lock().unwrap().push(request.clone());
        self.queue
            .lock()
            .unwrap()
            .pop_front()
            .unwrap_or_else(|| Err(ClientError::MissingFixture("script exhausted".into())))
    }
}

/// Client backed by a closure, for scorers computed from the request.
pub struct FnClient<F>(pub F);

impl<F> ChatClient for FnClient<F>
where
    F: Fn(&ChatRequest) -> Result<ChatResponse, ClientError> + Send + Sync,
{
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        request.validate()?;
        (self.0)(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::Message;

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = ChatRequest::new("m", vec![Message::user("hello")]);
        let b = ChatRequest::new("m", vec![Message::user("hello!")]);
        assert_eq!(request_hash(&a), request_hash(&a.clone()));
        assert_ne!(request_hash(&a), request_hash(&b));
        assert_eq!(request_hash(&a).len(), 64);
    }

    #[test]
    fn exact_entry_wins_over_pattern() {
        let req = ChatRequest::new("m", vec![Message::user("describe the dog")]);
        let c = FixtureClient::from_entries(vec![
            FixtureEntry::containing(&["dog"], ChatResponse::text("pattern")),
            FixtureEntry::exact(&req, ChatResponse::text("exact")),
        ]);
        assert_eq!(c.chat(&req).unwrap().text, "exact");
        let other = ChatRequest::new("m", vec![Message::user("a dog again")]);
        assert_eq!(c.chat(&other).unwrap().text, "pattern");
        let miss = ChatRequest::new("m", vec![Message::user("a cat")]);
        assert!(matches!(c.chat(&miss), Err(ClientError::MissingFixture(_))));
    }

    #[test]
    fn transcript_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let req = ChatRequest::new("m", vec![Message::user("q")]);
        let entries = vec![FixtureEntry::exact(&req, ChatResponse::text("{\"ok\":1}"))];
        FixtureClient::save(&entries, dir.path().join("a.json")).unwrap();
        let c = FixtureClient::load(dir.path()).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!(c.chat(&req).unwrap().text, "{\"ok\":1}");
        std::fs::write(dir.path().join("b.json"), r#"{"schema_version":9,"entries":[]}"#).unwrap();
        assert!(matches!(FixtureClient::load(dir.path()), Err(ClientError::Config(_))));
    }

    #[test]
    fn scripted_client_replays_in_order() {
        let c = ScriptedClient::texts(&["one", "two"]);
        let r = ChatRequest::new("m", vec![Message::user("q")]);
        assert_eq!(c.chat(&r).unwrap().text, "one");
        assert_eq!(c.chat(&r).unwrap().text, "two");
        assert!(c.chat(&r).is_err());
        assert_eq!(c.requests().len(), 3);
    }
}
