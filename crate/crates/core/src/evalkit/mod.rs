//! Image-set evaluation: Yes/No criteria, sequential-pair consistency,
//! per-image alignment, aesthetics and the weighted holistic score.

mod image;
pub mod proxy;

use std::fmt::Write as _;

use ::image::Rgb32FImage;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clients::{
    bounded_map, yes_probability, ChatClient, ChatRequest, ClientError, ImageAttachment, Message, Role,
    Transport,
};

pub use self::image::{encode_png, image_to_tensor, load_image, resize_for_eval, tensor_to_image, to_rgb8, EVAL_SIDE};

pub const CRITERIA_PROMPT: &str = include_str!("../../assets/prompts/criteria.v1.txt");
pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const MIN_CRITERIA: usize = 2;
pub const MAX_CRITERIA: usize = 4;
pub const DEFAULT_IN_FLIGHT: usize = 4;

pub const WEIGHT_AESTHETICS: f64 = 0.2;
pub const WEIGHT_ALIGNMENT: f64 = 0.3;
pub const WEIGHT_CONSISTENCY: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("criteria error: {0}")]
    Criteria(String),
    #[error("consistency is undefined for a set of {0} image(s)")]
    UndefinedConsistency(usize),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("score out of range: {0}")]
    Range(String),
    #[error("image error: {0}")]
    Image(String),
    #[error("{cell}: {source}")]
    Cell { cell: String, source: ClientError },
    #[error(transparent)]
    Client(#[from] ClientError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dimension {
    Identity,
    Style,
    Logic,
    Entity,
    Attribute,
    Relation,
}

impl Dimension {
    pub const CONSISTENCY: [Dimension; 3] = [Dimension::Identity, Dimension::Style, Dimension::Logic];
    pub const ALIGNMENT: [Dimension; 3] = [Dimension::Entity, Dimension::Attribute, Dimension::Relation];

    pub fn is_consistency(self) -> bool {
        Self::CONSISTENCY.contains(&self)
    }

    pub fn name(self) -> &'static str {
        match self {
            Dimension::Identity => "identity",
            Dimension::Style => "style",
            Dimension::Logic => "logic",
            Dimension::Entity => "entity",
            Dimension::Attribute => "attribute",
            Dimension::Relation => "relation",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Criterion {
    pub dimension: Dimension,
    pub question: String,
    /// Image this alignment question applies to; `None` means every image.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<usize>,
}

impl Criterion {
    pub fn new(dimension: Dimension, question: impl Into<String>) -> Result<Self, EvalError> {
        let c = Self {
            dimension,
            question: question.into().trim().to_string(),
            target: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn for_image(mut self, k: usize) -> Self {
        self.target = Some(k);
        self
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.question.trim().is_empty() || !self.question.trim_end().ends_with('?') {
            return Err(EvalError::Criteria(format!(
                "question must be non-empty and end with '?': {:?}",
                self.question
            )));
        }
        if self.target.is_some() && self.dimension.is_consistency() {
            return Err(EvalError::Criteria("consistency criteria cannot target one image".into()));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
struct CriteriaReply {
    criteria: Vec<String>,
}

fn decode_criteria(text: &str, dim: Dimension) -> Result<Vec<Criterion>, String> {
    let r: CriteriaReply = serde_json::from_str(text.trim()).map_err(|e| e.to_string())?;
    let valid: Vec<Criterion> = r.criteria.into_iter().filter_map(|q| Criterion::new(dim, q).ok()).collect();
    if valid.len() < MIN_CRITERIA {
        return Err(format!("{} valid question(s), need at least {MIN_CRITERIA}", valid.len()));
    }
    Ok(valid)
}

/// Asks the language model for 2 to 4 Yes/No questions on one dimension.
/// Malformed output gets one repair request; more than four questions are
/// truncated.
pub fn generate_criteria(
    instruction: &str,
    dimension: Dimension,
    client: &dyn ChatClient,
    model: &str,
) -> Result<Vec<Criterion>, EvalError> {
    let mut messages = vec![
        Message::system(CRITERIA_PROMPT),
        Message::user(format!("Instruction: {instruction}\nDimension: {}", dimension.name())),
    ];
    let first = client.chat(&ChatRequest::new(model, messages.clone()))?;
    let mut out = match decode_criteria(&first.text, dimension) {
        Ok(v) => v,
        Err(err) => {
            log::warn!("criteria reply rejected ({err}); asking for a repair");
            messages.push(Message {
                role: Role::Assistant,
                text: first.text,
                images: vec![],
            });
            messages.push(Message::user(format!(
                "That reply was rejected: {err}. Reply again with only the JSON object."
            )));
            let second = client.chat(&ChatRequest::new(model, messages))?;
            decode_criteria(&second.text, dimension)
                .map_err(|e| EvalError::Criteria(format!("{} after repair: {e}", dimension.name())))?
        }
    };
    if out.len() > MAX_CRITERIA {
        log::warn!(
            "{} criteria returned for {}; keeping the first {MAX_CRITERIA}",
            out.len(),
            dimension.name()
        );
        out.truncate(MAX_CRITERIA);
    }
    Ok(out)
}

/// Adjacent ordered pairs `(i, i+1)`.
pub fn sequential_pairs(n: usize) -> Result<Vec<(usize, usize)>, EvalError> {
    if n < 2 {
        return Err(EvalError::UndefinedConsistency(n));
    }
    Ok((0..n - 1).map(|i| (i, i + 1)).collect())
}

fn attachments(images: &[&Rgb32FImage]) -> Result<Vec<ImageAttachment>, EvalError> {
    images
        .iter()
        .map(|img| Ok(ImageAttachment::png(&encode_png(&resize_for_eval(img))?)))
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Settings for the vision-language scorer.
#[derive(Clone, Debug)]
pub struct Scoring<'a> {
    pub client: &'a dyn ChatClient,
    pub model: String,
    pub max_in_flight: usize,
}

impl<'a> Scoring<'a> {
    pub fn new(client: &'a dyn ChatClient, model: impl Into<String>) -> Self {
        Self {
            client,
            model: model.into(),
            max_in_flight: DEFAULT_IN_FLIGHT,
        }
    }

    fn ask(&self, text: String, images: Vec<ImageAttachment>) -> Result<f64, ClientError> {
        let req = ChatRequest::yes_no(&self.model, vec![Message::user(text).with_images(images)]);
        yes_probability(&self.client.chat(&req)?)
    }
}

impl std::fmt::Debug for dyn ChatClient + '_ {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ChatClient")
    }
}

pub fn pair_question(i: usize, j: usize, n: usize, question: &str) -> String {
    format!(
        "These are images {} and {} of a set of {n}. {question} Answer Yes or No.",
        i + 1,
        j + 1
    )
}

pub fn image_question(k: usize, n: usize, question: &str) -> String {
    format!("This is image {} of a set of {n}. {question} Answer Yes or No.", k + 1)
}

/// Yes-probability for every (sequential pair, criterion) cell, pairs
/// outermost. Every cell is evaluated.
pub fn consistency_cells(
    images: &[Rgb32FImage],
    criteria: &[Criterion],
    scoring: &Scoring<'_>,
) -> Result<Vec<Vec<f64>>, EvalError> {
    let pairs = sequential_pairs(images.len())?;
    if criteria.is_empty() {
        return Err(EvalError::Input("no consistency criteria".into()));
    }
    for c in criteria {
        c.validate()?;
    }
    let n = images.len();
    let encoded = attachments(&images.iter().collect::<Vec<_>>())?;
    let cells: Vec<(usize, usize)> = (0..pairs.len())
        .flat_map(|p| (0..criteria.len()).map(move |c| (p, c)))
        .collect();
    let results = bounded_map(&cells, scoring.max_in_flight, |&(p, c)| {
        let (i, j) = pairs[p];
        scoring
            .ask(
                pair_question(i, j, n, &criteria[c].question),
                vec![encoded[i].clone(), encoded[j].clone()],
            )
            .map_err(|source| EvalError::Cell {
                cell: format!("pair ({i},{j}) criterion {c} [{}]", criteria[c].dimension.name()),
                source,
            })
    });
    let flat: Vec<f64> = results.into_iter().collect::<Result<_, _>>()?;
    Ok(flat.chunks(criteria.len()).map(<[f64]>::to_vec).collect())
}

/// Mean yes-probability over all pair × criterion cells.
pub fn consistency_dimension_score(
    images: &[Rgb32FImage],
    criteria: &[Criterion],
    scoring: &Scoring<'_>,
) -> Result<f64, EvalError> {
    let cells = consistency_cells(images, criteria, scoring)?;
    Ok(mean(&cells.concat()))
}

/// Per-image mean over applicable criteria, then the mean over images.
/// Images with no applicable criterion are skipped.
pub fn alignment_score(
    images: &[Rgb32FImage],
    criteria: &[Criterion],
    scoring: &Scoring<'_>,
) -> Result<f64, EvalError> {
    let n = images.len();
    if n == 0 {
        return Err(EvalError::Input("empty image set".into()));
    }
    for c in criteria {
        c.validate()?;
        if c.target.is_some_and(|t| t >= n) {
            return Err(EvalError::Input(format!("criterion targets image {} of {n}", c.target.unwrap())));
        }
    }
    let encoded = attachments(&images.iter().collect::<Vec<_>>())?;
    let cells: Vec<(usize, usize)> = (0..n)
        .flat_map(|k| {
            criteria
                .iter()
                .enumerate()
                .filter(move |(_, c)| c.target.is_none_or(|t| t == k))
                .map(move |(ci, _)| (k, ci))
        })
        .collect();
    if cells.is_empty() {
        return Err(EvalError::Input("no alignment criteria apply to any image".into()));
    }
    let results = bounded_map(&cells, scoring.max_in_flight, |&(k, c)| {
        scoring
            .ask(image_question(k, n, &criteria[c].question), vec![encoded[k].clone()])
            .map_err(|source| EvalError::Cell {
                cell: format!("image {k} criterion {c} [{}]", criteria[c].dimension.name()),
                source,
            })
    });
    let scores: Vec<f64> = results.into_iter().collect::<Result<_, _>>()?;
    let mut per_image = Vec::new();
    for k in 0..n {
        let s: Vec<f64> = cells.iter().zip(&scores).filter(|((kk, _), _)| *kk == k).map(|(_, v)| *v).collect();
        if !s.is_empty() {
            per_image.push(mean(&s));
        }
    }
    Ok(mean(&per_image))
}

/// Per-image aesthetic quality in `[0, 1]`.
pub trait AestheticScorer: Send + Sync {
    fn score(&self, images: &[Rgb32FImage]) -> Result<Vec<f64>, EvalError>;
}

/// Canned per-image scores.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FixedScores(pub Vec<f64>);

impl AestheticScorer for FixedScores {
    fn score(&self, images: &[Rgb32FImage]) -> Result<Vec<f64>, EvalError> {
        if self.0.len() != images.len() {
            return Err(EvalError::Input(format!(
                "{} canned aesthetic scores for {} images",
                self.0.len(),
                images.len()
            )));
        }
        Ok(self.0.clone())
    }
}

/// Scorer service: POST `{"images": [data URLs]}`, reply `{"scores": [..]}`.
pub struct EndpointScorer<T: Transport> {
    pub endpoint: String,
    pub timeout: std::time::Duration,
    pub transport: T,
}

impl<T: Transport> AestheticScorer for EndpointScorer<T> {
    fn score(&self, images: &[Rgb32FImage]) -> Result<Vec<f64>, EvalError> {
        let urls: Vec<String> = attachments(&images.iter().collect::<Vec<_>>())?
            .iter()
            .map(ImageAttachment::data_url)
            .collect();
        let body = serde_json::json!({ "images": urls }).to_string();
        let resp = self
            .transport
            .post_json(&self.endpoint, &[], &body, self.timeout)
            .map_err(|e| ClientError::Transient(format!("{e:?}")))?;
        if !(200..300).contains(&resp.status) {
            return Err(ClientError::Permanent {
                status: resp.status,
                body: resp.body,
            }
            .into());
        }
        #[derive(Deserialize)]
        struct Reply {
            scores: Vec<f64>,
        }
        let r: Reply = serde_json::from_str(&resp.body).map_err(|e| ClientError::Decode(e.to_string()))?;
        if r.scores.len() != images.len() {
            return Err(ClientError::Decode(format!("{} scores for {} images", r.scores.len(), images.len())).into());
        }
        Ok(r.scores)
    }
}

/// Mean per-image aesthetic score.
pub fn aesthetics_score(images: &[Rgb32FImage], scorer: &dyn AestheticScorer) -> Result<f64, EvalError> {
    if images.is_empty() {
        return Err(EvalError::Input("empty image set".into()));
    }
    let s = scorer.score(images)?;
    if let Some(v) = s.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(EvalError::Range(format!("aesthetic score {v} outside [0, 1]")));
    }
    Ok(mean(&s))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub entity: f64,
    pub attribute: f64,
    pub relation: f64,
}

impl Alignment {
    pub fn mean(&self) -> f64 {
        (self.entity + self.attribute + self.relation) / 3.0
    }

    fn fields(&self) -> [(&'static str, f64); 3] {
        [("entity", self.entity), ("attribute", self.attribute), ("relation", self.relation)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Consistency {
    pub identity: f64,
    pub style: f64,
    pub logic: f64,
}

impl Consistency {
    pub fn mean(&self) -> f64 {
        (self.identity + self.style + self.logic) / 3.0
    }

    fn fields(&self) -> [(&'static str, f64); 3] {
        [("identity", self.identity), ("style", self.style), ("logic", self.logic)]
    }
}

/// `0.2·aesthetics + 0.3·mean(alignment) + 0.5·mean(consistency)`.
pub fn holistic(aesthetics: f64, alignment: &Alignment, consistency: &Consistency) -> Result<f64, EvalError> {
    let all = std::iter::once(("aesthetics", aesthetics))
        .chain(alignment.fields())
        .chain(consistency.fields());
    for (name, v) in all {
        if !(0.0..=1.0).contains(&v) {
            return Err(EvalError::Range(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok(WEIGHT_AESTHETICS * aesthetics
        + WEIGHT_ALIGNMENT * alignment.mean()
        + WEIGHT_CONSISTENCY * consistency.mean())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub schema_version: u32,
    pub aesthetics: f64,
    pub alignment: Alignment,
    pub consistency: Consistency,
    pub holistic: f64,
}

impl ScoreReport {
    pub fn new(aesthetics: f64, alignment: Alignment, consistency: Consistency) -> Result<Self, EvalError> {
        let h = holistic(aesthetics, &alignment, &consistency)?;
        Ok(Self {
            schema_version: REPORT_SCHEMA_VERSION,
            aesthetics,
            alignment,
            consistency,
            holistic: h,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, EvalError> {
        let r: Self = serde_json::from_str(s).map_err(|e| EvalError::Input(e.to_string()))?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(EvalError::Input(format!("unsupported schema_version {}", r.schema_version)));
        }
        let h = holistic(r.aesthetics, &r.alignment, &r.consistency)?;
        if (h - r.holistic).abs() > 1e-9 {
            return Err(EvalError::Input(format!("holistic {} disagrees with fields ({h})", r.holistic)));
        }
        Ok(r)
    }
}

/// Plain-text table, one row per report, three decimals, columns
/// `Aes | Entity Attribute Relation | Identity Style Logic | Avg`.
pub fn format_table(rows: &[(&str, &ScoreReport)]) -> String {
    let name_w = rows.iter().map(|(n, _)| n.chars().count()).max().unwrap_or(0).max("Method".len());
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<name_w$} | {:>10} | {:>6} {:>9} {:>8} | {:>8} {:>6} {:>6} | {:>6}",
        "Method", "Aesthetics", "Entity", "Attribute", "Relation", "Identity", "Style", "Logic", "Avg"
    );
    let _ = writeln!(s, "{}", "-".repeat(name_w + 79));
    for (name, r) in rows {
        let _ = writeln!(
            s,
            "{:<name_w$} | {:>10.3} | {:>6.3} {:>9.3} {:>8.3} | {:>8.3} {:>6.3} {:>6.3} | {:>6.3}",
            name,
            r.aesthetics,
            r.alignment.entity,
            r.alignment.attribute,
            r.alignment.relation,
            r.consistency.identity,
            r.consistency.style,
            r.consistency.logic,
            r.holistic
        );
    }
    s
}

/// Where alignment questions come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignmentSource {
    /// One question set per image, generated from that image's prompt.
    #[default]
    PerImagePrompt,
    /// One shared question set from the raw instruction.
    Instruction,
}

pub struct EvalConfig<'a> {
    pub llm: &'a dyn ChatClient,
    pub llm_model: String,
    pub scoring: Scoring<'a>,
    pub aesthetics: &'a dyn AestheticScorer,
    pub alignment_source: AlignmentSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    pub report: ScoreReport,
    pub criteria: Vec<Criterion>,
}

/// Full evaluation of one set: criteria, then consistency and alignment
/// cells, then aesthetics.
pub fn evaluate_set(
    images: &[Rgb32FImage],
    instruction: &str,
    prompts: Option<&[String]>,
    cfg: &EvalConfig<'_>,
) -> Result<EvalOutcome, EvalError> {
    let n = images.len();
    sequential_pairs(n)?;
    let mut criteria = Vec::new();
    let mut cons = [0.0; 3];
    for (slot, dim) in cons.iter_mut().zip(Dimension::CONSISTENCY) {
        let cs = generate_criteria(instruction, dim, cfg.llm, &cfg.llm_model)?;
        *slot = consistency_dimension_score(images, &cs, &cfg.scoring)?;
        criteria.extend(cs);
    }
    let mut align = [0.0; 3];
    for (slot, dim) in align.iter_mut().zip(Dimension::ALIGNMENT) {
        let cs = match (cfg.alignment_source, prompts) {
            (AlignmentSource::PerImagePrompt, Some(ps)) => {
                if ps.len() != n {
                    return Err(EvalError::Input(format!("{} prompts for {n} images", ps.len())));
                }
                let mut all = Vec::new();
                for (k, p) in ps.iter().enumerate() {
                    all.extend(
                        generate_criteria(p, dim, cfg.llm, &cfg.llm_model)?
                            .into_iter()
                            .map(|c| c.for_image(k)),
                    );
                }
                all
            }
            _ => generate_criteria(instruction, dim, cfg.llm, &cfg.llm_model)?,
        };
        *slot = alignment_score(images, &cs, &cfg.scoring)?;
        criteria.extend(cs);
    }
    let aes = aesthetics_score(images, cfg.aesthetics)?;
    let report = ScoreReport::new(
        aes,
        Alignment {
            entity: align[0],
            attribute: align[1],
            relation: align[2],
        },
        Consistency {
            identity: cons[0],
            style: cons[1],
            logic: cons[2],
        },
    )?;
    Ok(EvalOutcome { report, criteria })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clients::{ChatResponse, FnClient, ScriptedClient, TokenLogprob};
    use proptest::prelude::*;

    pub(crate) fn prob_response(p: f64) -> ChatResponse {
        ChatResponse {
            text: "Yes".into(),
            top_logprobs: Some(vec![
                TokenLogprob {
                    token: "Yes".into(),
                    logprob: p.ln(),
                },
                TokenLogprob {
                    token: "No".into(),
                    logprob: (1.0 - p).ln(),
                },
            ]),
        }
    }

    fn blank(n: usize) -> Vec<Rgb32FImage> {
        (0..n).map(|k| Rgb32FImage::from_pixel(4, 4, ::image::Rgb([k as f32 / 8.0, 0.0, 0.0]))).collect()
    }

    fn crit(d: Dimension, q: &str) -> Criterion {
        Criterion::new(d, q).unwrap()
    }

    fn user_text(r: &ChatRequest) -> &str {
        &r.messages.last().unwrap().text
    }

    #[test]
    fn pairs() {
        assert_eq!(sequential_pairs(4).unwrap(), vec![(0, 1), (1, 2), (2, 3)]);
        assert_eq!(sequential_pairs(2).unwrap(), vec![(0, 1)]);
        assert_eq!(sequential_pairs(1), Err(EvalError::UndefinedConsistency(1)));
        let p = sequential_pairs(8).unwrap();
        assert_eq!(p.len(), 7);
        let mut count = [0; 8];
        for (i, j) in p {
            count[i] += 1;
            count[j] += 1;
        }
        assert_eq!(count, [1, 2, 2, 2, 2, 2, 2, 1]);
    }

    #[test]
    fn consistency_hand_mean() {
        // pairs × criteria: [[0.8, 0.6], [0.4, 0.2]]
        let table = [[0.8, 0.6], [0.4, 0.2]];
        let mock = FnClient(move |r: &ChatRequest| {
            let t = user_text(r);
            let p = if t.contains("images 1 and 2") { 0 } else { 1 };
            let c = if t.contains("same dog") { 0 } else { 1 };
            assert_eq!(r.messages[0].images.len(), 2);
            Ok(prob_response(table[p][c]))
        });
        let cs = [crit(Dimension::Identity, "Is it the same dog?"), crit(Dimension::Identity, "Same collar?")];
        let s = consistency_dimension_score(&blank(3), &cs, &Scoring::new(&mock, "vlm")).unwrap();
        assert!((s - 0.5).abs() < 1e-12);

        let ones = FnClient(|_: &ChatRequest| {
            Ok(ChatResponse {
                text: String::new(),
                top_logprobs: Some(vec![
                    TokenLogprob { token: "Yes".into(), logprob: 0.0 },
                    TokenLogprob { token: "No".into(), logprob: -1000.0 },
                ]),
            })
        });
        assert_eq!(consistency_dimension_score(&blank(4), &cs, &Scoring::new(&ones, "vlm")).unwrap(), 1.0);

        let single = FnClient(|_: &ChatRequest| {
            Ok(ChatResponse {
                text: String::new(),
                top_logprobs: Some(vec![
                    TokenLogprob { token: "Yes".into(), logprob: 1.0 },
                    TokenLogprob { token: "No".into(), logprob: -1.0 },
                ]),
            })
        });
        let v = consistency_dimension_score(&blank(2), &cs[..1], &Scoring::new(&single, "vlm")).unwrap();
        assert_eq!(v, crate::clients::two_way_softmax(1.0, -1.0));
    }

    #[test]
    fn scoring_error_names_cell() {
        let mock = FnClient(|r: &ChatRequest| {
            if user_text(r).contains("images 2 and 3") {
                Ok(ChatResponse::text("Yes"))
            } else {
                Ok(prob_response(0.5))
            }
        });
        let cs = [crit(Dimension::Style, "Same palette?")];
        match consistency_dimension_score(&blank(3), &cs, &Scoring::new(&mock, "vlm")) {
            Err(EvalError::Cell { cell, source }) => {
                assert!(cell.contains("pair (1,2)"), "{cell}");
                assert!(matches!(source, ClientError::Capability(_)));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn alignment_hand_mean() {
        // image 0: 0.9 (shared), 0.5 (own) ; image 1: 0.3 (shared)
        let mock = FnClient(|r: &ChatRequest| {
            let t = user_text(r);
            let p = match (t.contains("image 1 "), t.contains("red")) {
                (true, true) => 0.9,
                (true, false) => 0.5,
                (false, _) => 0.3,
            };
            Ok(prob_response(p))
        });
        let cs = [crit(Dimension::Entity, "Is it red?"), crit(Dimension::Entity, "Is there a square?").for_image(0)];
        let s = alignment_score(&blank(2), &cs, &Scoring::new(&mock, "vlm")).unwrap();
        let oracle = ((0.9 + 0.5) / 2.0 + 0.3) / 2.0;
        assert!((s - oracle).abs() < 1e-12);
        let bad = [crit(Dimension::Entity, "x?").for_image(5)];
        assert!(alignment_score(&blank(2), &bad, &Scoring::new(&mock, "vlm")).is_err());
    }

    #[test]
    fn aesthetics_examples() {
        assert_eq!(aesthetics_score(&blank(2), &FixedScores(vec![0.4, 0.6])).unwrap(), 0.5);
        assert_eq!(aesthetics_score(&blank(1), &FixedScores(vec![0.37])).unwrap(), 0.37);
        assert!(aesthetics_score(&[], &FixedScores(vec![])).is_err());
        assert!(aesthetics_score(&blank(1), &FixedScores(vec![1.2])).is_err());
    }

    #[test]
    fn holistic_examples() {
        let h = holistic(
            0.520,
            &Alignment { entity: 0.729, attribute: 0.756, relation: 0.743 },
            &Consistency { identity: 0.359, style: 0.414, logic: 0.356 },
        )
        .unwrap();
        assert!((h - 0.515).abs() < 5e-4);
        let h = holistic(
            0.206,
            &Alignment { entity: 0.780, attribute: 0.785, relation: 0.776 },
            &Consistency { identity: 0.233, style: 0.287, logic: 0.285 },
        )
        .unwrap();
        assert!((h - 0.409).abs() < 5e-4);
        let z = Alignment { entity: 0.0, attribute: 0.0, relation: 0.0 };
        let zc = Consistency { identity: 0.0, style: 0.0, logic: 0.0 };
        assert_eq!(holistic(0.0, &z, &zc).unwrap(), 0.0);
        assert!(holistic(-0.1, &z, &zc).is_err());
        assert!(holistic(0.0, &z, &Consistency { logic: 1.5, ..zc }).is_err());
    }

    #[test]
    fn criteria_contract() {
        let three = r#"{"criteria":["Is the puppy the same breed?","Same fur color?","Same collar?"]}"#;
        let c = ScriptedClient::texts(&[three]);
        let cs = generate_criteria("puppies", Dimension::Identity, &c, "llm").unwrap();
        assert_eq!(cs.iter().map(|c| c.question.as_str()).collect::<Vec<_>>(),
            ["Is the puppy the same breed?", "Same fur color?", "Same collar?"]);

        let five = r#"{"criteria":["a?","b?","c?","d?","e?"]}"#;
        let c = ScriptedClient::texts(&[five]);
        assert_eq!(generate_criteria("y", Dimension::Style, &c, "llm").unwrap().len(), 4);

        let c = ScriptedClient::texts(&["I think yes.", "Still prose."]);
        assert!(matches!(generate_criteria("y", Dimension::Logic, &c, "llm"), Err(EvalError::Criteria(_))));
        assert_eq!(c.requests().len(), 2);

        let c = ScriptedClient::texts(&[r#"{"criteria":["only one?","not a question"]}"#, r#"{"criteria":["a?","b?"]}"#]);
        assert_eq!(generate_criteria("y", Dimension::Logic, &c, "llm").unwrap().len(), 2);
        assert!(Criterion::new(Dimension::Identity, "no mark").is_err());
        assert!(Criterion::new(Dimension::Identity, "x?").unwrap().for_image(0).validate().is_err());
    }

    #[test]
    fn report_json_and_table() {
        let r = ScoreReport::new(
            0.5,
            Alignment { entity: 0.25, attribute: 0.5, relation: 0.75 },
            Consistency { identity: 1.0, style: 0.5, logic: 0.0 },
        )
        .unwrap();
        assert_eq!(r.holistic, 0.2 * 0.5 + 0.3 * 0.5 + 0.5 * 0.5);
        assert_eq!(ScoreReport::from_json(&r.to_json()).unwrap(), r);
        let mut tampered = r.clone();
        tampered.holistic = 0.9;
        assert!(ScoreReport::from_json(&tampered.to_json()).is_err());
        let t = format_table(&[("toy", &r)]);
        let header: Vec<&str> = t.lines().next().unwrap().split_whitespace().filter(|w| *w != "|").collect();
        assert_eq!(header, ["Method", "Aesthetics", "Entity", "Attribute", "Relation", "Identity", "Style", "Logic", "Avg"]);
        assert!(t.lines().nth(2).unwrap().ends_with("0.500"));
    }

    fn unit() -> impl Strategy<Value = f64> {
        0.0f64..=1.0
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn holistic_is_bounded_and_monotone(v in proptest::collection::vec(unit(), 7), k in 0usize..7, bump in 0.0f64..1.0) {
            let build = |v: &[f64]| holistic(
                v[0],
                &Alignment { entity: v[1], attribute: v[2], relation: v[3] },
                &Consistency { identity: v[4], style: v[5], logic: v[6] },
            ).unwrap();
            let h = build(&v);
            prop_assert!((0.0..=1.0 + 1e-12).contains(&h));
            let mut w = v.clone();
            w[k] = (w[k] + bump).min(1.0);
            prop_assert!(build(&w) >= h);
        }

        #[test]
        fn symmetric_scorer_is_order_invariant(ps in proptest::collection::vec(0.01f64..0.99, 3)) {
            // Scores depend only on the unordered pair, so reversing the set
            // reverses the pairs and leaves the mean unchanged up to rounding.
            let imgs = blank(4);
            let score_for = move |r: &ChatRequest| {
                let t = user_text(r);
                let idx = (1..=3).find(|i| t.contains(&format!("images {i} and {}", i + 1))).unwrap();
                idx
            };
            let ps1 = ps.clone();
            let fwd = FnClient(move |r: &ChatRequest| Ok(prob_response(ps1[score_for(r) - 1])));
            let cs = [crit(Dimension::Identity, "Same?")];
            let a = consistency_dimension_score(&imgs, &cs, &Scoring::new(&fwd, "v")).unwrap();
            let rev: Vec<Rgb32FImage> = imgs.iter().rev().cloned().collect();
            let ps2 = ps.clone();
            let bwd = FnClient(move |r: &ChatRequest| Ok(prob_response(ps2[3 - score_for(r)])));
            let b = consistency_dimension_score(&rev, &cs, &Scoring::new(&bwd, "v")).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
