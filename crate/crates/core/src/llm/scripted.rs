use serde::{Deserialize, Serialize};

use super::{AssistantKind, BackendError, ChatBackend, ChatRequest, ChatResponse};
use crate::prelude::*;

/// Fault a scripted reply can inject instead of text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    Transport,
    Auth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptReply {
    Text(String),
    Fault { fault: FaultKind, #[serde(default)] message: String },
}

impl From<&str> for ScriptReply {
    fn from(s: &str) -> Self {
        ScriptReply::Text(s.to_owned())
    }
}

impl From<String> for ScriptReply {
    fn from(s: String) -> Self {
        ScriptReply::Text(s)
    }
}

/// A matcher plus the replies it serves.
///
/// All present matcher fields must hold. Replies are served in order; once
/// the last one is reached it repeats, unless `exhaust` is set, in which
/// case the rule stops matching.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<AssistantKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_equals: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subject_contains: Option<String>,
    /// Substrings that must all occur in the non-system message text.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contains: Vec<String>,
    pub replies: Vec<ScriptReply>,
    #[serde(default)]
    pub exhaust: bool,
}

impl ScriptRule {
    pub fn reply(reply: impl Into<ScriptReply>) -> Self {
        Self {
            kind: None,
            subject_equals: None,
            subject_contains: None,
            contains: Vec::new(),
            replies: vec![reply.into()],
            exhaust: false,
        }
    }

    pub fn kind(mut self, kind: AssistantKind) -> Self {
        self.kind = Some(kind);
        self
    }

    pub fn subject(mut self, subject: impl Into<String>) -> Self {
        self.subject_equals = Some(subject.into());
        self
    }

    pub fn subject_containing(mut self, needle: impl Into<String>) -> Self {
        self.subject_contains = Some(needle.into());
        self
    }

    pub fn containing(mut self, needle: impl Into<String>) -> Self {
        self.contains.push(needle.into());
        self
    }

    pub fn then(mut self, reply: impl Into<ScriptReply>) -> Self {
        self.replies.push(reply.into());
        self
    }

    pub fn exhausting(mut self) -> Self {
        self.exhaust = true;
        self
    }

    fn matches(&self, request: &ChatRequest, body: &str) -> bool {
        if self.kind.is_some_and(|k| k != request.kind) {
            return false;
        }
        if self.subject_equals.as_ref().is_some_and(|s| *s != request.subject) {
            return false;
        }
        if self.subject_contains.as_ref().is_some_and(|s| !request.subject.contains(s.as_str())) {
            return false;
        }
        self.contains.iter().all(|needle| body.contains(needle.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendScript {
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
    #[serde(default)]
    pub default_response: String,
}

impl BackendScript {
    pub fn with_default(default_response: impl Into<String>) -> Self {
        Self { rules: Vec::new(), default_response: default_response.into() }
    }

    pub fn rule(mut self, rule: ScriptRule) -> Self {
        self.rules.push(rule);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub kind: AssistantKind,
    pub fingerprint: u64,
    pub subject: String,
    /// Index of the rule that served the request; `None` for the default.
    pub rule: Option<usize>,
    pub response: Result<String, String>,
}

/// Deterministic test double. First matching rule wins.
#[derive(Debug, Clone)]
pub struct ScriptedBackend {
    script: BackendScript,
    hits: Vec<usize>,
    transcript: Vec<TranscriptEntry>,
}

impl ScriptedBackend {
    pub fn new(script: BackendScript) -> Self {
        let hits = vec![0; script.rules.len()];
        Self { script, hits, transcript: Vec::new() }
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        &self.transcript
    }

    pub fn script(&self) -> &BackendScript {
        &self.script
    }

    pub fn served(&self, kind: AssistantKind) -> usize {
        self.transcript.iter().filter(|t| t.kind == kind).count()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        let body = request.body();
        let mut chosen = None;
        for (idx, rule) in self.script.rules.iter().enumerate() {
            if rule.replies.is_empty() {
                continue;
            }
            let used = self.hits[idx];
            if rule.exhaust && used >= rule.replies.len() {
                continue;
            }
            if rule.matches(request, &body) {
                let reply = rule.replies[used.min(rule.replies.len() - 1)].clone();
                chosen = Some((idx, reply));
                break;
            }
        }
        let (rule, reply) = match chosen {
            Some((idx, reply)) => {
                self.hits[idx] += 1;
                (Some(idx), reply)
            }
            None => (None, ScriptReply::Text(self.script.default_response.clone())),
        };
        let result = match reply {
            ScriptReply::Text(text) => Ok(text),
            ScriptReply::Fault { fault: FaultKind::Transport, message } => Err(BackendError::Transport(message)),
            ScriptReply::Fault { fault: FaultKind::Auth, message } => Err(BackendError::Auth(message)),
        };
        self.transcript.push(TranscriptEntry {
            kind: request.kind,
            fingerprint: request.fingerprint(),
            subject: request.subject.clone(),
            rule,
            response: result.clone().map_err(|e: BackendError| e.to_string()),
        });
        result.map(ChatResponse::text)
    }
}
