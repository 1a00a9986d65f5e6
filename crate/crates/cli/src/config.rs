use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{io, CliError};

/// Builds a command's settings from an optional JSON config file and the
/// flags actually given; flags win. Flag fields left unset serialize as
/// `null` and are dropped before the merge.
pub fn resolve<S: DeserializeOwned>(config: Option<&Path>, flags: &impl Serialize) -> Result<S, CliError> {
    let mut merged = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(io(p.display()))?;
            match serde_json::from_str::<Value>(&text)? {
                Value::Object(m) => m,
                _ => return Err(CliError::validation(format!("{}: config must be a JSON object", p.display()))),
            }
        }
        None => Map::new(),
    };
    if let Value::Object(f) = serde_json::to_value(flags)? {
        for (k, v) in f {
            match v {
                Value::Null | Value::Bool(false) if merged.contains_key(&k) => {}
                Value::Null => {}
                v => {
                    merged.insert(k, v);
                }
            }
        }
    }
    serde_json::from_value(Value::Object(merged)).map_err(|e| CliError::validation(format!("settings: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Serialize)]
    struct Flags {
        steps: Option<usize>,
        out: Option<String>,
        offline: bool,
    }

    #[derive(Deserialize, Debug, PartialEq)]
    #[serde(deny_unknown_fields)]
    struct Settings {
        #[serde(default = "twenty")]
        steps: usize,
        out: String,
        #[serde(default)]
        offline: bool,
    }

    fn twenty() -> usize {
        20
    }

    #[test]
    fn flags_override_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"steps": 5, "out": "a", "offline": true}"#).unwrap();
        let s: Settings = resolve(Some(&p), &Flags { steps: Some(7), out: None, offline: false }).unwrap();
        assert_eq!(s, Settings { steps: 7, out: "a".into(), offline: true });
        let s: Settings = resolve(None, &Flags { steps: None, out: Some("b".into()), offline: false }).unwrap();
        assert_eq!(s, Settings { steps: 20, out: "b".into(), offline: false });
        std::fs::write(&p, r#"{"stepz": 5, "out": "a"}"#).unwrap();
        assert!(resolve::<Settings>(Some(&p), &Flags { steps: None, out: None, offline: false }).is_err());
    }
}
