//! The single boundary to language models.
//!
//! Every role in the engine (planner, decomposer, estimator, judge,
//! workflow generator and the task assistants) talks to a model through
//! [`ChatBackend`]. [`Llm`] wraps a backend with the per-role profiles
//! (model name and system prompt) and keeps a log of every outbound
//! request so it can be written into run records.

mod retry;
mod scripted;
mod structured;

use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::hash::{fnv1a64_extend, fnv_offset};
use crate::prelude::*;

pub use retry::{NoSleep, RetryPolicy, Retrying, Sleeper};
pub use scripted::{BackendScript, FaultKind, ScriptReply, ScriptRule, ScriptedBackend, TranscriptEntry};
pub use structured::{extract_json_object, parse_structured, Field, FieldKind, Schema, StructuredError, StructuredOutput};

/// Role a request is issued for. Each kind maps to a configured model and
/// system prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssistantKind {
    Coder,
    Reasoner,
    FileReader,
    Planner,
    Decomposer,
    Estimator,
    Judge,
    WorkflowGenerator,
}

impl AssistantKind {
    pub const ALL: [AssistantKind; 8] = [
        AssistantKind::Coder,
        AssistantKind::Reasoner,
        AssistantKind::FileReader,
        AssistantKind::Planner,
        AssistantKind::Decomposer,
        AssistantKind::Estimator,
        AssistantKind::Judge,
        AssistantKind::WorkflowGenerator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AssistantKind::Coder => "coder",
            AssistantKind::Reasoner => "reasoner",
            AssistantKind::FileReader => "file_reader",
            AssistantKind::Planner => "planner",
            AssistantKind::Decomposer => "decomposer",
            AssistantKind::Estimator => "estimator",
            AssistantKind::Judge => "judge",
            AssistantKind::WorkflowGenerator => "workflow_generator",
        }
    }
}

impl fmt::Display for AssistantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unknown assistant kind `{0}`")]
pub struct UnknownAssistantKind(pub String);

impl FromStr for AssistantKind {
    type Err = UnknownAssistantKind;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        AssistantKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| UnknownAssistantKind(s.to_owned()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// A chat-completion request.
///
/// `subject` is the short piece of text the request is about (a subtask
/// description, a condition, a task content to estimate). It is never sent
/// over the wire; scripted backends match on it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub kind: AssistantKind,
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub subject: String,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), BackendError> {
        match self.messages.first() {
            None => Err(BackendError::InvalidRequest("request has no messages".into())),
            Some(m) if m.role != Role::System => {
                Err(BackendError::InvalidRequest("first message must be the system prompt".into()))
            }
            Some(_) => Ok(()),
        }
    }

    /// Stable hash of the kind and every message.
    pub fn fingerprint(&self) -> u64 {
        let mut h = fnv1a64_extend(fnv_offset(), self.kind.as_str().as_bytes());
        for m in &self.messages {
            let tag: &[u8] = match m.role {
                Role::System => b"\0s\0",
                Role::User => b"\0u\0",
                Role::Assistant => b"\0a\0",
            };
            h = fnv1a64_extend(h, tag);
            h = fnv1a64_extend(h, m.content.as_bytes());
        }
        h
    }

    /// Concatenation of every non-system message, newline separated.
    pub fn body(&self) -> String {
        let mut out = String::new();
        for m in self.messages.iter().filter(|m| m.role != Role::System) {
            if !out.is_empty() {
                out.push('\n');
            }
            out.push_str(&m.content);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenUsage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    #[serde(default)]
    pub usage: TokenUsage,
    #[serde(default)]
    pub latency_ms: u64,
}

impl ChatResponse {
    pub fn text(content: impl Into<String>) -> Self {
        Self { content: content.into(), usage: TokenUsage::default(), latency_ms: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("authentication failure: {0}")]
    Auth(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("no profile configured for assistant `{0}`")]
    NotConfigured(AssistantKind),
}

impl BackendError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

pub trait ChatBackend {
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &mut T {
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for Box<T> {
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        (**self).complete(request)
    }
}

/// Adapts a closure into a backend. Handy for tests that compute replies
/// from the request instead of scripting them.
pub struct FnBackend<F>(pub F);

impl<F> ChatBackend for FnBackend<F>
where
    F: FnMut(&ChatRequest) -> Result<ChatResponse, BackendError>,
{
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        request.validate()?;
        (self.0)(request)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssistantProfile {
    pub model: String,
    pub system_prompt: String,
}

/// Model and system prompt per assistant kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AssistantProfiles(pub BTreeMap<AssistantKind, AssistantProfile>);

impl Default for AssistantProfiles {
    fn default() -> Self {
        let mut map = BTreeMap::new();
        for kind in AssistantKind::ALL {
            let (model, prompt) = match kind {
                AssistantKind::Coder => ("gpt-4o-2024-11-20", "You are a coding assistant. Write, run and check code to complete the instruction, then report the result."),
                AssistantKind::Reasoner => ("o1-2024-12-17", "You are a careful reasoning assistant. Work the problem step by step and state the final result clearly."),
                AssistantKind::FileReader => ("gpt-4o-2024-11-20", "You read the provided documents and extract exactly the information the instruction asks for."),
                AssistantKind::Planner => ("gpt-4o-2024-11-20", "You are the task flow planner. You decompose tasks, monitor subtask execution and produce final answers."),
                AssistantKind::Decomposer => ("gpt-4o-2024-11-20", "You split one subtask into a small graph of simpler subtasks."),
                AssistantKind::Estimator => ("gpt-4o-2024-11-20", "You estimate how tractable and how completable a subtask is, using statistics of similar past subtasks."),
                AssistantKind::Judge => ("gpt-4o-2024-11-20", "You are a strict evaluator. Score outputs against the instructions and explain the main weaknesses."),
                AssistantKind::WorkflowGenerator => ("gpt-4o-2024-11-20", "You improve subtask workflows written in the polymath workflow format."),
            };
            map.insert(kind, AssistantProfile { model: model.into(), system_prompt: prompt.into() });
        }
        AssistantProfiles(map)
    }
}

impl AssistantProfiles {
    pub fn get(&self, kind: AssistantKind) -> Result<&AssistantProfile, BackendError> {
        self.0.get(&kind).ok_or(BackendError::NotConfigured(kind))
    }

    /// Kinds that have no profile.
    pub fn missing(&self) -> Vec<AssistantKind> {
        AssistantKind::ALL.iter().copied().filter(|k| !self.0.contains_key(k)).collect()
    }
}

/// One logged outbound request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RequestLogEntry {
    pub kind: AssistantKind,
    pub model: String,
    pub fingerprint: String,
    pub subject: String,
    pub excerpt: String,
    pub ok: bool,
}

const EXCERPT_CHARS: usize = 160;

pub(crate) fn truncate_chars(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((idx, _)) => {
            let mut out = s[..idx].to_owned();
            out.push_str("...");
            out
        }
        None => s.to_owned(),
    }
}

/// Backend plus role profiles plus the request log.
pub struct Llm<B> {
    backend: B,
    profiles: AssistantProfiles,
    pub temperature: f32,
    pub max_tokens: Option<u32>,
    log: Vec<RequestLogEntry>,
}

impl<B: ChatBackend> Llm<B> {
    pub fn new(backend: B) -> Self {
        Self::with_profiles(backend, AssistantProfiles::default())
    }

    pub fn with_profiles(backend: B, profiles: AssistantProfiles) -> Self {
        Self { backend, profiles, temperature: 0.0, max_tokens: None, log: Vec::new() }
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    pub fn backend_mut(&mut self) -> &mut B {
        &mut self.backend
    }

    pub fn into_backend(self) -> B {
        self.backend
    }

    pub fn profiles(&self) -> &AssistantProfiles {
        &self.profiles
    }

    pub fn log(&self) -> &[RequestLogEntry] {
        &self.log
    }

    pub fn take_log(&mut self) -> Vec<RequestLogEntry> {
        core::mem::take(&mut self.log)
    }

    /// Number of logged requests issued for `kind`.
    pub fn count(&self, kind: AssistantKind) -> usize {
        self.log.iter().filter(|e| e.kind == kind).count()
    }

    /// Sends the system prompt for `kind` followed by `messages`.
    pub fn chat(
        &mut self,
        kind: AssistantKind,
        subject: &str,
        messages: &[ChatMessage],
    ) -> Result<String, BackendError> {
        let profile = self.profiles.get(kind)?;
        let mut all = Vec::with_capacity(messages.len() + 1);
        all.push(ChatMessage::system(profile.system_prompt.clone()));
        all.extend_from_slice(messages);
        let request = ChatRequest {
            kind,
            model: profile.model.clone(),
            messages: all,
            temperature: self.temperature,
            max_tokens: self.max_tokens,
            subject: subject.to_owned(),
        };
        let result = self.backend.complete(&request);
        let last = request.messages.last().map(|m| m.content.as_str()).unwrap_or_default();
        self.log.push(RequestLogEntry {
            kind,
            model: request.model.clone(),
            fingerprint: format!("{:016x}", request.fingerprint()),
            subject: truncate_chars(subject, EXCERPT_CHARS),
            excerpt: truncate_chars(last, EXCERPT_CHARS),
            ok: result.is_ok(),
        });
        result.map(|r| r.content)
    }

    pub fn ask(&mut self, kind: AssistantKind, subject: &str, prompt: &str) -> Result<String, BackendError> {
        self.chat(kind, subject, &[ChatMessage::user(prompt)])
    }

    /// Requests a JSON object matching `schema`, re-prompting with a
    /// correction message up to `retries` times when the reply is unusable.
    pub fn ask_structured(
        &mut self,
        kind: AssistantKind,
        subject: &str,
        prompt: &str,
        schema: &Schema,
        retries: u32,
    ) -> Result<StructuredOutput, StructuredError> {
        if schema.fields.is_empty() {
            return Err(StructuredError::EmptySchema);
        }
        let mut messages = vec![ChatMessage::user(format!("{prompt}\n\n{}", schema.instructions()))];
        let mut attempts = 0;
        loop {
            attempts += 1;
            let reply = self.chat(kind, subject, &messages).map_err(StructuredError::Backend)?;
            match parse_structured(&reply, schema) {
                Ok(mut out) => {
                    out.attempts = attempts;
                    return Ok(out);
                }
                Err(reason) => {
                    if attempts > retries {
                        return Err(StructuredError::Malformed { attempts, reason });
                    }
                    messages.push(ChatMessage::assistant(reply));
                    messages.push(ChatMessage::user(format!(
                        "Your previous reply could not be used: {reason}. Reply again with only the JSON object."
                    )));
                }
            }
        }
    }
}
