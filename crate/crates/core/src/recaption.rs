//! Structured recaptioning: split an instruction into per-image content `E`
//! and shared requirements `C`, then expand them into per-image prompts and
//! a global consistency prompt.

use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{bounded_map, ChatClient, ChatRequest, ClientError, Message};
use crate::model::{ColorKind, ShapeKind, NULL_TOKEN};

pub const MAX_SET_SIZE: usize = 8;

pub const PARSE_PROMPT: &str = include_str!("../assets/prompts/recaption_parse.v1.txt");
pub const EXPAND_PROMPT: &str = include_str!("../assets/prompts/recaption_expand.v1.txt");
pub const GLOBAL_PROMPT: &str = include_str!("../assets/prompts/recaption_global.v1.txt");

/// Keywords that mark a sentence as a shared requirement.
pub const CONSISTENCY_KEYWORDS: [&str; 4] = ["same", "consistent", "style", "identity"];

#[derive(Debug, Error, PartialEq)]
pub enum RecaptionError {
    #[error("invalid instruction: {0}")]
    Instruction(String),
    #[error("could not parse instruction: {0}")]
    Parse(String),
    #[error("set size mismatch: requested {requested}, instruction describes {found}")]
    SizeMismatch { requested: usize, found: usize },
    #[error("set size unknown: give an explicit size or enumerate the images")]
    SizeUnknown,
    #[error("empty content for image {0}")]
    EmptyEntity(usize),
    #[error(transparent)]
    Client(#[from] ClientError),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub text: String,
    /// Requested set size; inferred from the text when absent.
    pub n: Option<usize>,
}

impl Instruction {
    pub fn new(text: impl Into<String>, n: Option<usize>) -> Result<Self, RecaptionError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(RecaptionError::Instruction("instruction is empty".into()));
        }
        if let Some(n) = n {
            check_size(n)?;
        }
        Ok(Self { text, n })
    }
}

fn check_size(n: usize) -> Result<(), RecaptionError> {
    if !(1..=MAX_SET_SIZE).contains(&n) {
        return Err(RecaptionError::Instruction(format!(
            "set size {n} outside 1..={MAX_SET_SIZE}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecaptionResult {
    pub entities: Vec<String>,
    pub consistency: Vec<String>,
    pub prompts: Vec<String>,
    pub global: String,
}

impl RecaptionResult {
    pub fn n(&self) -> usize {
        self.prompts.len()
    }

    /// Toy-vocabulary tokens for every prompt and for the global prompt.
    pub fn toy_tokens(&self) -> (Vec<Vec<usize>>, Vec<usize>) {
        (
            self.prompts.iter().map(|p| tokenize_for_toy(p)).collect(),
            tokenize_for_toy(&self.global),
        )
    }
}

/// How recaptioning is carried out.
pub enum Recaptioner<'a> {
    /// Deterministic rules, no network.
    Fallback,
    Client {
        client: &'a dyn ChatClient,
        model: String,
        max_in_flight: usize,
    },
}

impl<'a> Recaptioner<'a> {
    pub fn client(client: &'a dyn ChatClient, model: impl Into<String>) -> Self {
        Recaptioner::Client {
            client,
            model: model.into(),
            max_in_flight: 4,
        }
    }

    pub fn run(&self, instruction: &Instruction) -> Result<RecaptionResult, RecaptionError> {
        let (entities, consistency) = self.parse(instruction)?;
        let prompts = self.recap_all(&entities, &consistency, &instruction.text)?;
        let global = self.consist(&consistency, &instruction.text)?;
        Ok(RecaptionResult {
            entities,
            consistency,
            prompts,
            global,
        })
    }

    pub fn parse(&self, instruction: &Instruction) -> Result<(Vec<String>, Vec<String>), RecaptionError> {
        match self {
            Recaptioner::Fallback => fallback_parse(instruction),
            Recaptioner::Client { client, model, .. } => {
                let (e, c) = client_parse(*client, model, instruction)?;
                if let Some(n) = instruction.n {
                    if n != e.len() {
                        return Err(RecaptionError::SizeMismatch {
                            requested: n,
                            found: e.len(),
                        });
                    }
                }
                check_size(e.len())?;
                Ok((e, c))
            }
        }
    }

    pub fn recap(&self, entity: &str, consistency: &[String], y: &str) -> Result<String, RecaptionError> {
        if entity.trim().is_empty() {
            return Err(RecaptionError::EmptyEntity(0));
        }
        match self {
            Recaptioner::Fallback => Ok(fallback_recap(entity, consistency)),
            Recaptioner::Client { client, model, .. } => {
                let user = format!(
                    "Instruction: {y}\nImage content: {entity}\nShared requirements: {}",
                    requirements_line(consistency)
                );
                single_line_reply(*client, model, EXPAND_PROMPT, user)
            }
        }
    }

    pub fn consist(&self, consistency: &[String], y: &str) -> Result<String, RecaptionError> {
        if consistency.is_empty() {
            return Ok(String::new());
        }
        match self {
            Recaptioner::Fallback => Ok(consistency.join(", ")),
            Recaptioner::Client { client, model, .. } => {
                let user = format!("Instruction: {y}\nShared requirements: {}", requirements_line(consistency));
                single_line_reply(*client, model, GLOBAL_PROMPT, user)
            }
        }
    }

    fn recap_all(&self, entities: &[String], consistency: &[String], y: &str) -> Result<Vec<String>, RecaptionError> {
        if let Some(i) = entities.iter().position(|e| e.trim().is_empty()) {
            return Err(RecaptionError::EmptyEntity(i));
        }
        let limit = match self {
            Recaptioner::Fallback => 1,
            Recaptioner::Client { max_in_flight, .. } => *max_in_flight,
        };
        if limit <= 1 {
            return entities.iter().map(|e| self.recap(e, consistency, y)).collect();
        }
        bounded_map(entities, limit, |e| self.recap(e, consistency, y))
            .into_iter()
            .collect()
    }
}

fn requirements_line(c: &[String]) -> String {
    if c.is_empty() {
        "none".into()
    } else {
        c.join("; ")
    }
}

fn single_line_reply(client: &dyn ChatClient, model: &str, system: &str, user: String) -> Result<String, RecaptionError> {
    let req = ChatRequest::new(model, vec![Message::system(system), Message::user(user)]);
    let text = client.chat(&req)?.text.trim().to_string();
    if text.is_empty() {
        return Err(RecaptionError::Parse("client returned an empty prompt".into()));
    }
    Ok(text)
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ParseReply {
    entities: Vec<String>,
    #[serde(default)]
    consistency: Vec<String>,
}

fn decode_parse_reply(text: &str) -> Result<(Vec<String>, Vec<String>), String> {
    let r: ParseReply = serde_json::from_str(text.trim()).map_err(|e| e.to_string())?;
    if r.entities.is_empty() {
        return Err("\"entities\" is empty".into());
    }
    if let Some(i) = r.entities.iter().position(|e| e.trim().is_empty()) {
        return Err(format!("entities[{i}] is empty"));
    }
    let e = r.entities.into_iter().map(|s| s.trim().to_string()).collect();
    let c = r
        .consistency
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    Ok((e, c))
}

fn client_parse(
    client: &dyn ChatClient,
    model: &str,
    instruction: &Instruction,
) -> Result<(Vec<String>, Vec<String>), RecaptionError> {
    let mut user = format!("Instruction: {}", instruction.text);
    if let Some(n) = instruction.n {
        user.push_str(&format!("\nNumber of images: {n}"));
    }
    let mut messages = vec![Message::system(PARSE_PROMPT), Message::user(user)];
    let first = client.chat(&ChatRequest::new(model, messages.clone()))?;
    let err = match decode_parse_reply(&first.text) {
        Ok(v) => return Ok(v),
        Err(e) => e,
    };
    log::warn!("recaption reply was not valid JSON ({err}); asking for a repair");
    messages.push(Message {
        role: crate::clients::Role::Assistant,
        text: first.text,
        images: vec![],
    });
    messages.push(Message::user(format!(
        "That reply was rejected: {err}. Reply again with only the JSON object."
    )));
    let second = client.chat(&ChatRequest::new(model, messages))?;
    decode_parse_reply(&second.text).map_err(|e| RecaptionError::Parse(format!("after repair: {e}")))
}

/// `e_i, c_1, c_2, …`, or `e_i` alone when nothing is shared.
pub fn fallback_recap(entity: &str, consistency: &[String]) -> String {
    if consistency.is_empty() {
        entity.to_string()
    } else {
        format!("{entity}, {}", consistency.join(", "))
    }
}

const ORDINALS: &str = "first|second|third|fourth|fifth|sixth|seventh|eighth|last|final";
const NOUNS: &str = "images?|pictures?|photos?|panels?|frames?|scenes?|illustrations?|ones?";
const NUMBER_WORDS: [&str; 9] = ["one", "two", "three", "four", "five", "six", "seven", "eight", "nine"];

static NUMBERED: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\(?\d+\s*[.):]\s*").unwrap());
static INLINE_NUMBERED: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\s\(?\d+[.)]\s+(?:[A-Za-z])").unwrap());
static ORDINAL_LEAD: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"(?i)^(?:(?:in|for)\s+)?(?:the\s+)?(?:{ORDINALS})\b(?:\s+(?:{NOUNS}))?(?:\s+(?:shows|depicts|displays|features|contains|has|is|should\s+show|will\s+show))?\s*[:,-]?\s*"
    ))
    .unwrap()
});
static IMAGE_N_LEAD: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"(?i)^(?:(?:in|for)\s+)?(?:{NOUNS})\s+\d+(?:\s+(?:shows|depicts|displays|features|contains|has|is))?\s*[:,-]?\s*"
    ))
    .unwrap()
});
static LIST_SEP: LazyLock<Regex> = LazyLock::new(|| Regex::new(r",\s*(?:and\s+)?|\s+and\s+").unwrap());
static KEYWORD: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)\b(?:same|consistent|consistently|consistency|style|styles|identity|identities)\b").unwrap()
});
static COUNT: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(&format!(
        r"(?i)\b(\d+|{})\s+(?:[A-Za-z-]+\s+){{0,2}}?(?:images|pictures|photos|panels|frames|scenes|illustrations)\b",
        NUMBER_WORDS.join("|")
    ))
    .unwrap()
});

/// Sentences, semicolon clauses and lines, with numbered-list items split
/// out even when they share a line.
fn segments(y: &str) -> Vec<String> {
    let mut text = String::with_capacity(y.len() + 8);
    let mut last = 0;
    for m in INLINE_NUMBERED.find_iter(y) {
        text.push_str(&y[last..m.start()]);
        text.push('\n');
        last = m.start() + 1;
    }
    text.push_str(&y[last..]);

    let mut out = Vec::new();
    let mut cur = String::new();
    let chars: Vec<char> = text.chars().collect();
    for (i, &ch) in chars.iter().enumerate() {
        let boundary_after = chars.get(i + 1).is_none_or(|c| c.is_whitespace());
        let split = match ch {
            ';' | '\n' => true,
            '.' | '!' | '?' => {
                boundary_after && !cur.trim().chars().all(|c| c.is_ascii_digit() || c == '(')
            }
            _ => false,
        };
        if split {
            if ch != ';' && ch != '\n' {
                cur.push(ch);
            }
            out.push(std::mem::take(&mut cur));
        } else {
            cur.push(ch);
        }
    }
    out.push(cur);
    out.into_iter()
        .map(|s| s.trim().trim_end_matches(['.', '!', '?', ',', ':']).trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn strip_marker(seg: &str) -> Option<String> {
    for re in [&*NUMBERED, &*ORDINAL_LEAD, &*IMAGE_N_LEAD] {
        if let Some(m) = re.find(seg) {
            if m.end() > 0 {
                // The numbered marker may be followed by an ordinal phrase.
                let rest = &seg[m.end()..];
                let rest = ORDINAL_LEAD.find(rest).map_or(rest, |m2| &rest[m2.end()..]);
                return Some(rest.trim().trim_start_matches([',', ':', '-']).trim().to_string());
            }
        }
    }
    None
}

fn parse_count(y: &str) -> Option<usize> {
    let cap = COUNT.captures(y)?;
    let w = cap[1].to_lowercase();
    w.parse::<usize>()
        .ok()
        .or_else(|| NUMBER_WORDS.iter().position(|n| *n == w).map(|i| i + 1))
}

/// Rule-based split. Segments led by an enumerator ("the first image shows",
/// "2.", "image 3:") are entities with the marker removed; other segments
/// containing a consistency keyword are requirements. Without enumerators,
/// the remaining text is repeated once per image of the requested or stated
/// count.
pub fn fallback_parse(instruction: &Instruction) -> Result<(Vec<String>, Vec<String>), RecaptionError> {
    let mut entities = Vec::new();
    let mut consistency = Vec::new();
    let mut context = Vec::new();
    for seg in segments(&instruction.text) {
        if let Some(content) = strip_marker(&seg) {
            if !content.is_empty() {
                entities.push(content);
            }
        } else if KEYWORD.is_match(&seg) {
            consistency.push(seg);
        } else {
            context.push(seg);
        }
    }
    if entities.is_empty() {
        let n = instruction
            .n
            .or_else(|| parse_count(&instruction.text))
            .ok_or(RecaptionError::SizeUnknown)?;
        check_size(n)?;
        if context.is_empty() {
            return Err(RecaptionError::Parse("no image content found".into()));
        }
        entities = match context.iter().find_map(|c| colon_list(c, n)) {
            Some(items) => items,
            None => vec![context.join(", "); n],
        };
    } else if let Some(n) = instruction.n {
        if n != entities.len() {
            return Err(RecaptionError::SizeMismatch {
                requested: n,
                found: entities.len(),
            });
        }
    }
    check_size(entities.len())?;
    Ok((entities, consistency))
}

/// "…: a, b and c" with exactly `n` items after the colon.
fn colon_list(seg: &str, n: usize) -> Option<Vec<String>> {
    let (_, tail) = seg.split_once(':')?;
    let items: Vec<String> = LIST_SEP
        .split(tail)
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    (n > 1 && items.len() == n).then_some(items)
}

/// Maps free text onto the toy vocabulary as `[shape, color]`, keeping only
/// the first word of each kind. Unknown words are dropped; nothing matched
/// gives `[null]`.
pub fn tokenize_for_toy(text: &str) -> Vec<usize> {
    let mut shape = None;
    let mut color = None;
    for w in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let w = w.to_lowercase();
        let w = w.strip_suffix('s').filter(|s| ShapeKind::ALL.iter().any(|k| k.word() == *s)).unwrap_or(&w);
        if shape.is_none() {
            shape = ShapeKind::ALL.iter().find(|k| k.word() == w).map(|k| k.token());
        }
        if color.is_none() {
            color = ColorKind::ALL.iter().find(|k| k.word() == w).map(|k| k.token());
        }
    }
    let out: Vec<usize> = shape.into_iter().chain(color).collect();
    if out.is_empty() {
        vec![NULL_TOKEN]
    } else {
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{ChatResponse, FixtureClient, FixtureEntry, ScriptedClient};
    use crate::model::VOCAB;
    use proptest::prelude::*;

    fn tok(w: &str) -> usize {
        VOCAB.iter().position(|v| *v == w).unwrap()
    }

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    const TWO: &str =
        "the first image shows a red square; the second image shows a red circle. keep the same color.";

    #[test]
    fn colon_list_enumerates() {
        let ins = Instruction::new("Generate 3 images: a red circle, a red square and a red star. Keep the same color.", None).unwrap();
        let (e, c) = fallback_parse(&ins).unwrap();
        assert_eq!(e, s(&["a red circle", "a red square", "a red star"]));
        assert_eq!(c, s(&["Keep the same color"]));
        // a list whose length disagrees with the count is not an enumeration
        let ins = Instruction::new("Generate 2 images: a circle, a square and a star.", None).unwrap();
        let (e, _) = fallback_parse(&ins).unwrap();
        assert_eq!(e.len(), 2);
        assert_eq!(e[0], e[1]);
    }

    #[test]
    fn fallback_trace() {
        let (e, c) = fallback_parse(&Instruction::new(TWO, None).unwrap()).unwrap();
        assert_eq!(e, s(&["a red square", "a red circle"]));
        assert_eq!(c, s(&["keep the same color"]));
        let r = Recaptioner::Fallback.run(&Instruction::new(TWO, Some(2)).unwrap()).unwrap();
        assert_eq!(r.prompts, s(&["a red square, keep the same color", "a red circle, keep the same color"]));
        assert_eq!(r.global, "keep the same color");
    }

    #[test]
    fn fallback_without_keywords_has_no_requirements() {
        let y = "First image: a blue triangle. Second image: a green square.";
        let r = Recaptioner::Fallback.run(&Instruction::new(y, None).unwrap()).unwrap();
        assert_eq!(r.entities, s(&["a blue triangle", "a green square"]));
        assert!(r.consistency.is_empty());
        assert_eq!(r.global, "");
        assert_eq!(r.prompts, r.entities);
    }

    #[test]
    fn numbered_lists_and_counts() {
        let y = "Make a comic. 1. a cat wakes up 2. the cat eats 3) the cat sleeps. Use a consistent watercolor style.";
        let (e, c) = fallback_parse(&Instruction::new(y, None).unwrap()).unwrap();
        assert_eq!(e, s(&["a cat wakes up", "the cat eats", "the cat sleeps"]));
        assert_eq!(c, s(&["Use a consistent watercolor style"]));

        let y = "Generate four images of a blue circle. Keep the same blue color.";
        let (e, c) = fallback_parse(&Instruction::new(y, None).unwrap()).unwrap();
        assert_eq!(e, vec!["Generate four images of a blue circle".to_string(); 4]);
        assert_eq!(c.len(), 1);
        assert_eq!(fallback_parse(&Instruction::new("a dog", Some(3)).unwrap()).unwrap().0.len(), 3);
    }

    #[test]
    fn size_errors() {
        assert_eq!(
            fallback_parse(&Instruction::new(TWO, Some(3)).unwrap()),
            Err(RecaptionError::SizeMismatch { requested: 3, found: 2 })
        );
        assert_eq!(
            fallback_parse(&Instruction::new("a dog in a park", None).unwrap()),
            Err(RecaptionError::SizeUnknown)
        );
        assert!(Instruction::new("x", Some(9)).is_err());
        assert!(Instruction::new("  ", None).is_err());
        assert!(fallback_parse(&Instruction::new("draw twelve images of a cat", None).unwrap()).is_err());
    }

    #[test]
    fn template_examples() {
        assert_eq!(fallback_recap("a red square", &s(&["watercolor style"])), "a red square, watercolor style");
        assert_eq!(Recaptioner::Fallback.consist(&[], "y").unwrap(), "");
        assert!(matches!(
            Recaptioner::Fallback.recap(" ", &[], "y"),
            Err(RecaptionError::EmptyEntity(_))
        ));
    }

    #[test]
    fn toy_tokens() {
        assert_eq!(tokenize_for_toy("a red square"), vec![tok("square"), tok("red")]);
        assert_eq!(tokenize_for_toy(""), vec![NULL_TOKEN]);
        assert_eq!(tokenize_for_toy("red crimson square"), vec![tok("square"), tok("red")]);
        assert_eq!(tokenize_for_toy("Blue, then GREEN circles"), vec![tok("circle"), tok("blue")]);
        assert_eq!(tokenize_for_toy("keep the same color"), vec![NULL_TOKEN]);
    }

    #[test]
    fn client_passthrough() {
        let reply = r#"{"entities":["a puppy on grass","a puppy asleep"],"consistency":["same puppy"]}"#;
        let fx = FixtureClient::from_entries(vec![
            FixtureEntry::containing(&["split an image-set instruction"], ChatResponse::text(reply)),
            FixtureEntry::containing(&["Image content: a puppy on grass"], ChatResponse::text("A fluffy puppy on grass.")),
            FixtureEntry::containing(&["Image content: a puppy asleep"], ChatResponse::text("The puppy asleep on a rug.")),
            FixtureEntry::containing(&["global consistency"], ChatResponse::text("The same brown puppy.")),
        ]);
        let r = Recaptioner::client(&fx, "llm").run(&Instruction::new("two puppy pictures", Some(2)).unwrap()).unwrap();
        assert_eq!(r.entities, s(&["a puppy on grass", "a puppy asleep"]));
        assert_eq!(r.consistency, s(&["same puppy"]));
        assert_eq!(r.prompts, s(&["A fluffy puppy on grass.", "The puppy asleep on a rug."]));
        assert_eq!(r.global, "The same brown puppy.");
    }

    #[test]
    fn client_repair_retry() {
        let good = r#"{"entities":["a","b"],"consistency":[]}"#;
        let c = ScriptedClient::texts(&["Sure! Here you go", good]);
        let r = Recaptioner::client(&c, "llm");
        let (e, _) = r.parse(&Instruction::new("y", None).unwrap()).unwrap();
        assert_eq!(e, s(&["a", "b"]));
        let reqs = c.requests();
        assert_eq!(reqs.len(), 2);
        assert_eq!(reqs[1].messages.len(), 4);

        let c = ScriptedClient::texts(&["prose", "still prose"]);
        assert!(matches!(
            Recaptioner::client(&c, "llm").parse(&Instruction::new("y", None).unwrap()),
            Err(RecaptionError::Parse(_))
        ));
        let c = ScriptedClient::texts(&[good]);
        assert_eq!(
            Recaptioner::client(&c, "llm").parse(&Instruction::new("y", Some(3)).unwrap()),
            Err(RecaptionError::SizeMismatch { requested: 3, found: 2 })
        );
    }

    proptest! {
        #[test]
        fn fallback_is_pure_and_total(y in "\\PC{0,200}", n in proptest::option::of(1usize..=8)) {
            if let Ok(ins) = Instruction::new(y, n) {
                let a = Recaptioner::Fallback.run(&ins);
                let b = Recaptioner::Fallback.run(&ins);
                prop_assert_eq!(&a, &b);
                if let Ok(r) = a {
                    prop_assert_eq!(r.prompts.len(), r.entities.len());
                    prop_assert!(r.prompts.iter().all(|p| !p.is_empty()));
                    let (ps, g) = r.toy_tokens();
                    prop_assert!(ps.iter().all(|t| !t.is_empty() && t.len() <= 2));
                    prop_assert!(!g.is_empty());
                }
            }
        }

        #[test]
        fn enumerated_sets_have_declared_size(n in 1usize..=8, colors in proptest::collection::vec(0usize..3, 8)) {
            let ords = ["first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth"];
            let parts: Vec<String> = (0..n)
                .map(|i| format!("the {} image shows a {} square", ords[i], ColorKind::ALL[colors[i]].word()))
                .collect();
            let y = format!("{}. Keep the same size.", parts.join("; "));
            let r = Recaptioner::Fallback.run(&Instruction::new(y, Some(n)).unwrap()).unwrap();
            prop_assert_eq!(r.n(), n);
            for (i, p) in r.toy_tokens().0.iter().enumerate() {
                prop_assert_eq!(p, &vec![tok("square"), ColorKind::ALL[colors[i]].token()]);
            }
        }
    }
}
