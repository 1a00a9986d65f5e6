//! Benchmark corpus: task schema, loader and validator, statistics and a
//! synthetic generator over the toy vocabulary.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::model::{ColorKind, ShapeKind};
use crate::tensor::Rng;

pub const CORPUS_SCHEMA_VERSION: u32 = 1;
pub const SET_SIZE_RANGE: (usize, usize) = (2, 8);
pub const WORD_COUNT_RANGE: (usize, usize) = (20, 175);
pub const SYNTH_SET_SIZES: [usize; 4] = [2, 3, 4, 5];

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("{path}: {message}")]
    Schema { path: String, message: String },
    #[error("duplicate id {id:?} at tasks[{first}] and tasks[{second}]")]
    DuplicateId { id: String, first: usize, second: usize },
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("malformed corpus JSON: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    Character,
    DesignStyle,
    Story,
    Process,
    Instruction,
}

impl Group {
    pub const ALL: [Group; 5] = [Group::Character, Group::DesignStyle, Group::Story, Group::Process, Group::Instruction];

    pub fn name(self) -> &'static str {
        match self {
            Group::Character => "Character",
            Group::DesignStyle => "DesignStyle",
            Group::Story => "Story",
            Group::Process => "Process",
            Group::Instruction => "Instruction",
        }
    }

    pub fn subcategories(self) -> &'static [&'static str] {
        match self {
            Group::Character => &["Multi-Scenario", "Multi-Expression", "Multi-View", "Multi-Pose", "Portrait Design"],
            Group::DesignStyle => &["Creative Style", "Poster Design", "Font Design", "IP Product", "Home Decoration"],
            Group::Story => &["Movie Shot", "Comic Story", "Children Book", "News Illustration", "Historical Narrative"],
            Group::Process => &[
                "Growth Process",
                "Draw Process",
                "Cooking Process",
                "Physical Law",
                "Architecture Building",
                "Evolution Illustration",
            ],
            Group::Instruction => &[
                "Education Illustration",
                "Historical Panel",
                "Product Panel",
                "Travel Guide",
                "Activity Arrange",
            ],
        }
    }
}

/// All 26 subcategory names with their group.
pub fn subcategories() -> Vec<(Group, &'static str)> {
    Group::ALL
        .iter()
        .flat_map(|g| g.subcategories().iter().map(move |s| (*g, *s)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Task {
    pub id: String,
    pub group: Group,
    pub subcategory: String,
    pub instruction: String,
    pub set_size: usize,
    pub source: String,
}

pub fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

impl Task {
    /// Checks one task; errors name the offending field under `path`.
    pub fn validate_at(&self, path: &str) -> Result<(), BenchError> {
        let err = |field: &str, message: String| BenchError::Schema {
            path: format!("{path}.{field}"),
            message,
        };
        if self.id.trim().is_empty() {
            return Err(err("id", "must be non-empty".into()));
        }
        if !self.group.subcategories().contains(&self.subcategory.as_str()) {
            return Err(err(
                "subcategory",
                format!("{:?} is not a {} subcategory", self.subcategory, self.group.name()),
            ));
        }
        let (lo, hi) = SET_SIZE_RANGE;
        if !(lo..=hi).contains(&self.set_size) {
            return Err(err("set_size", format!("{} outside [{lo}, {hi}]", self.set_size)));
        }
        let (lo, hi) = WORD_COUNT_RANGE;
        let w = word_count(&self.instruction);
        if !(lo..=hi).contains(&w) {
            return Err(err("instruction", format!("{w} words, expected [{lo}, {hi}]")));
        }
        if self.source.trim().is_empty() {
            return Err(err("source", "must be non-empty".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), BenchError> {
        self.validate_at("task")
    }
}

#[derive(Serialize)]
struct CorpusOut<'a> {
    schema_version: u32,
    tasks: &'a [Task],
}

/// Parses and validates a corpus document: either
/// `{"schema_version": 1, "tasks": [...]}` or a bare array of tasks.
pub fn parse_corpus(text: &str) -> Result<Vec<Task>, BenchError> {
    let doc: Value = serde_json::from_str(text)?;
    let items = match doc {
        Value::Array(items) => items,
        Value::Object(mut obj) => {
            match obj.get("schema_version").and_then(Value::as_u64) {
                Some(v) if v == CORPUS_SCHEMA_VERSION as u64 => {}
                other => {
                    return Err(BenchError::Schema {
                        path: "schema_version".into(),
                        message: format!("expected {CORPUS_SCHEMA_VERSION}, found {other:?}"),
                    })
                }
            }
            match obj.remove("tasks") {
                Some(Value::Array(items)) => items,
                _ => {
                    return Err(BenchError::Schema {
                        path: "tasks".into(),
                        message: "missing or not an array".into(),
                    })
                }
            }
        }
        _ => {
            return Err(BenchError::Schema {
                path: "$".into(),
                message: "expected an object or an array".into(),
            })
        }
    };
    let mut tasks = Vec::with_capacity(items.len());
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (i, item) in items.into_iter().enumerate() {
        let path = format!("tasks[{i}]");
        let task: Task = serde_json::from_value(item).map_err(|e| BenchError::Schema {
            path: path.clone(),
            message: e.to_string(),
        })?;
        task.validate_at(&path)?;
        if let Some(&first) = seen.get(&task.id) {
            return Err(BenchError::DuplicateId {
                id: task.id,
                first,
                second: i,
            });
        }
        seen.insert(task.id.clone(), i);
        tasks.push(task);
    }
    Ok(tasks)
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Vec<Task>, BenchError> {
    parse_corpus(&std::fs::read_to_string(path)?)
}

pub fn corpus_to_json(tasks: &[Task]) -> String {
    let mut s = serde_json::to_string_pretty(&CorpusOut {
        schema_version: CORPUS_SCHEMA_VERSION,
        tasks,
    })
    .expect("corpus serializes");
    s.push('\n');
    s
}

pub fn save_corpus(tasks: &[Task], path: impl AsRef<Path>) -> Result<(), BenchError> {
    std::fs::write(path, corpus_to_json(tasks))?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub count: usize,
    pub mean_set_size: f64,
    pub mean_word_count: f64,
    pub per_group: BTreeMap<String, usize>,
    pub per_subcategory: BTreeMap<String, usize>,
}

pub fn corpus_stats(tasks: &[Task]) -> CorpusStats {
    let n = tasks.len();
    let mean = |f: &dyn Fn(&Task) -> usize| {
        if n == 0 {
            0.0
        } else {
            tasks.iter().map(f).sum::<usize>() as f64 / n as f64
        }
    };
    let mut per_group = BTreeMap::new();
    let mut per_subcategory = BTreeMap::new();
    for t in tasks {
        *per_group.entry(t.group.name().to_string()).or_insert(0) += 1;
        *per_subcategory.entry(t.subcategory.clone()).or_insert(0) += 1;
    }
    CorpusStats {
        count: n,
        mean_set_size: mean(&|t| t.set_size),
        mean_word_count: mean(&|t| word_count(&t.instruction)),
        per_group,
        per_subcategory,
    }
}

const ORDINALS: [&str; 8] = ["first", "second", "third", "fourth", "fifth", "sixth", "seventh", "eighth"];

/// Toy tasks: one shared color, one shape per image, phrased so that the
/// fallback recaptioner recovers every image and the toy tokenizer maps
/// each prompt to `[shape, color]`.
pub fn synth_tasks(seed: u64, count: usize) -> Vec<Task> {
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|i| {
            let n = SYNTH_SET_SIZES[rng.below(SYNTH_SET_SIZES.len())];
            let color = ColorKind::ALL[rng.below(3)].word();
            let parts: Vec<String> = (0..n)
                .map(|k| {
                    let shape = ShapeKind::ALL[rng.below(3)].word();
                    format!("the {} image shows a {color} {shape}", ORDINALS[k])
                })
                .collect();
            let mut body = parts.join("; ");
            body[..1].make_ascii_uppercase();
            Task {
                id: format!("synth-{seed}-{i}"),
                group: Group::DesignStyle,
                subcategory: "Creative Style".into(),
                instruction: format!(
                    "Generate {n} images of simple shapes on a plain background. {body}. Keep the same {color} color in every image."
                ),
                set_size: n,
                source: "synthetic".into(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::recaption::{Instruction, Recaptioner};

    fn task(id: &str, n: usize, words: usize) -> Task {
        Task {
            id: id.into(),
            group: Group::Process,
            subcategory: "Draw Process".into(),
            instruction: vec!["word"; words].join(" "),
            set_size: n,
            source: "test".into(),
        }
    }

    #[test]
    fn twenty_six_subcategories() {
        let all = subcategories();
        assert_eq!(all.len(), 26);
        let mut names: Vec<_> = all.iter().map(|(_, s)| *s).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), 26);
    }

    #[test]
    fn validation_errors_name_the_field() {
        let text = corpus_to_json(&[task("a", 3, 25), task("b", 9, 25)]);
        match parse_corpus(&text) {
            Err(BenchError::Schema { path, .. }) => assert_eq!(path, "tasks[1].set_size"),
            other => panic!("{other:?}"),
        }
        let text = corpus_to_json(&[task("a", 3, 25), task("b", 3, 25), task("a", 4, 30)]);
        match parse_corpus(&text) {
            Err(e @ BenchError::DuplicateId { .. }) => {
                assert_eq!(e.to_string(), "duplicate id \"a\" at tasks[0] and tasks[2]")
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_corpus(&corpus_to_json(&[task("a", 3, 7)])), Err(BenchError::Schema { .. })));
        let bad = r#"[{"id":"x","group":"Story","subcategory":"Draw Process","instruction":"w","set_size":3,"source":"s"}]"#;
        match parse_corpus(bad) {
            Err(BenchError::Schema { path, .. }) => assert_eq!(path, "tasks[0].subcategory"),
            other => panic!("{other:?}"),
        }
        let missing = r#"[{"id":"x","group":"Story"}]"#;
        match parse_corpus(missing) {
            Err(BenchError::Schema { path, message }) => {
                assert_eq!(path, "tasks[0]");
                assert!(message.contains("subcategory"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(parse_corpus(r#"{"schema_version":2,"tasks":[]}"#).is_err());
    }

    #[test]
    fn stats_examples() {
        let s = corpus_stats(&[task("a", 3, 20), task("b", 4, 20), task("c", 5, 20)]);
        assert_eq!(s.mean_set_size, 4.0);
        let mut t = task("a", 3, 20);
        t.instruction = "one two three four five six seven".into();
        assert_eq!(corpus_stats(&[t]).mean_word_count, 7.0);
        assert_eq!(s.per_group["Process"], 3);
    }

    #[test]
    fn synth_contract() {
        let a = synth_tasks(7, 40);
        assert_eq!(a, synth_tasks(7, 40));
        assert_ne!(a, synth_tasks(8, 40));
        for t in &a {
            t.validate().unwrap();
            assert!(SYNTH_SET_SIZES.contains(&t.set_size));
            let r = Recaptioner::Fallback.run(&Instruction::new(&t.instruction, Some(t.set_size)).unwrap()).unwrap();
            assert_eq!(r.n(), t.set_size);
            let (ps, g) = r.toy_tokens();
            assert!(ps.iter().all(|p| p.len() == 2));
            assert_eq!(g.len(), 1);
            assert!(ColorKind::from_token(g[0]).is_some());
        }
        let sizes: std::collections::BTreeSet<_> = a.iter().map(|t| t.set_size).collect();
        assert_eq!(sizes.into_iter().collect::<Vec<_>>(), SYNTH_SET_SIZES);
    }
}
