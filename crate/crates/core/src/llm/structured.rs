//! Strict JSON outputs for judges and estimators.

use serde_json::Value;

use super::BackendError;
use crate::prelude::*;

#[derive(Debug, Clone, PartialEq)]
pub enum FieldKind {
    /// Numeric field with an inclusive range; out-of-range values are
    /// clamped and flagged.
    Number { min: f64, max: f64 },
    /// Free text. Optional in the reply; defaults to empty.
    Text,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Field {
    pub name: String,
    pub kind: FieldKind,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Schema {
    pub fields: Vec<Field>,
}

impl Schema {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn number(mut self, name: &str, min: f64, max: f64) -> Self {
        self.fields.push(Field { name: name.to_owned(), kind: FieldKind::Number { min, max } });
        self
    }

    pub fn text(mut self, name: &str) -> Self {
        self.fields.push(Field { name: name.to_owned(), kind: FieldKind::Text });
        self
    }

    /// Output-format instructions appended to structured prompts.
    pub fn instructions(&self) -> String {
        let mut out = String::from("Respond with a single JSON object and nothing else. Fields:");
        for f in &self.fields {
            match f.kind {
                FieldKind::Number { min, max } => {
                    out.push_str(&format!("\n- \"{}\": number in [{min}, {max}]", f.name));
                }
                FieldKind::Text => out.push_str(&format!("\n- \"{}\": string", f.name)),
            }
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StructuredOutput {
    pub numbers: BTreeMap<String, f64>,
    pub texts: BTreeMap<String, String>,
    /// Names of numeric fields that were clamped into range.
    pub clamped: Vec<String>,
    /// Number of requests it took to get a usable reply.
    pub attempts: u32,
}

impl StructuredOutput {
    /// Value of a numeric schema field. Fields declared in the schema are
    /// always present after a successful parse.
    pub fn number(&self, name: &str) -> f64 {
        self.numbers.get(name).copied().unwrap_or(0.0)
    }

    pub fn text(&self, name: &str) -> &str {
        self.texts.get(name).map(String::as_str).unwrap_or("")
    }

    pub fn was_clamped(&self, name: &str) -> bool {
        self.clamped.iter().any(|c| c == name)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StructuredError {
    #[error(transparent)]
    Backend(BackendError),
    #[error("malformed structured output after {attempts} attempts: {reason}")]
    Malformed { attempts: u32, reason: String },
    #[error("structured request needs at least one field")]
    EmptySchema,
}

/// Slice from the first `{` to the last `}`. Tolerates code fences and
/// chatter around the object.
pub fn extract_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    (end > start).then(|| &text[start..=end])
}

/// Parses and range-checks `text` against `schema`. The error is a short
/// human-readable reason fed back to the model on retry.
pub fn parse_structured(text: &str, schema: &Schema) -> Result<StructuredOutput, String> {
    let raw = extract_json_object(text).ok_or_else(|| "no JSON object found".to_owned())?;
    let value: Value = serde_json::from_str(raw).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value.as_object().ok_or_else(|| "top level is not an object".to_owned())?;
    let mut out = StructuredOutput::default();
    for field in &schema.fields {
        match field.kind {
            FieldKind::Number { min, max } => {
                let v = obj
                    .get(&field.name)
                    .ok_or_else(|| format!("missing field \"{}\"", field.name))?
                    .as_f64()
                    .ok_or_else(|| format!("field \"{}\" is not a number", field.name))?;
                if !v.is_finite() {
                    return Err(format!("field \"{}\" is not finite", field.name));
                }
                let clamped = v.clamp(min, max);
                if clamped != v {
                    out.clamped.push(field.name.clone());
                }
                out.numbers.insert(field.name.clone(), clamped);
            }
            FieldKind::Text => {
                let v = match obj.get(&field.name) {
                    None | Some(Value::Null) => String::new(),
                    Some(Value::String(s)) => s.clone(),
                    Some(other) => other.to_string(),
                };
                out.texts.insert(field.name.clone(), v);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{AssistantKind, BackendScript, Llm, ScriptRule, ScriptedBackend};

    fn dc() -> Schema {
        Schema::new().number("d", 0.0, 1.0).number("c", 0.0, 1.0)
    }

    #[test]
    fn parses_in_range_values() {
        let out = parse_structured(r#"{"d":0.8,"c":0.9}"#, &dc()).unwrap();
        assert_eq!((out.number("d"), out.number("c")), (0.8, 0.9));
        assert!(out.clamped.is_empty());
    }

    #[test]
    fn clamps_and_flags_out_of_range() {
        let out = parse_structured(r#"{"d":1.3,"c":-0.2}"#, &dc()).unwrap();
        assert_eq!(out.number("d"), 1.0);
        assert_eq!(out.number("c"), 0.0);
        assert!(out.was_clamped("d") && out.was_clamped("c"));
    }

    #[test]
    fn tolerates_fences_and_prose() {
        let text = "Sure!\n```json\n{\"d\": 0.5, \"c\": 0.25}\n```";
        assert_eq!(parse_structured(text, &dc()).unwrap().number("c"), 0.25);
    }

    #[test]
    fn rejects_missing_and_non_numeric_fields() {
        assert!(parse_structured(r#"{"d":0.5}"#, &dc()).unwrap_err().contains("\"c\""));
        assert!(parse_structured(r#"{"d":"high","c":1}"#, &dc()).is_err());
        assert!(parse_structured("no json here", &dc()).is_err());
        assert!(parse_structured("[1,2]", &dc()).is_err());
    }

    #[test]
    fn text_fields_are_optional() {
        let schema = Schema::new().number("x", 0.0, 1.0).text("why");
        let out = parse_structured(r#"{"x":0.1}"#, &schema).unwrap();
        assert_eq!(out.text("why"), "");
        let out = parse_structured(r#"{"x":0.1,"why":"because"}"#, &schema).unwrap();
        assert_eq!(out.text("why"), "because");
    }

    #[test]
    fn two_malformed_then_valid_parses_on_third_attempt() {
        let script = BackendScript::with_default("unused").rule(
            ScriptRule::reply("not json").then("{\"d\": 0.8}").then("{\"d\":0.8,\"c\":0.9}"),
        );
        let mut llm = Llm::new(ScriptedBackend::new(script));
        let out = llm.ask_structured(AssistantKind::Estimator, "t", "estimate", &dc(), 2).unwrap();
        assert_eq!(out.attempts, 3);
        assert_eq!((out.number("d"), out.number("c")), (0.8, 0.9));
        // correction turns are carried in the conversation
        let last = llm.backend().transcript().len();
        assert_eq!(last, 3);
        assert!(llm.log()[2].excerpt.starts_with("Your previous reply could not be used"));
    }

    #[test]
    fn malformed_after_retries_is_an_error() {
        let mut llm = Llm::new(ScriptedBackend::new(BackendScript::with_default("garbage")));
        let err = llm.ask_structured(AssistantKind::Judge, "t", "judge", &dc(), 2).unwrap_err();
        assert!(matches!(err, StructuredError::Malformed { attempts: 3, .. }));
        assert_eq!(llm.backend().transcript().len(), 3);
    }

    #[test]
    fn empty_schema_is_rejected() {
        let mut llm = Llm::new(ScriptedBackend::new(BackendScript::with_default("{}")));
        let err = llm.ask_structured(AssistantKind::Judge, "t", "judge", &Schema::new(), 2).unwrap_err();
        assert_eq!(err, StructuredError::EmptySchema);
    }
}
