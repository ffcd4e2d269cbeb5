use core::time::Duration;

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatRequest, ChatResponse};

/// Exponential backoff for transport failures. Auth failures are never
/// retried.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: u32,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, initial_backoff_ms: 500, multiplier: 2, max_backoff_ms: 8_000 }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let factor = u64::from(self.multiplier.max(1)).saturating_pow(retry);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

pub trait Sleeper {
    fn sleep(&mut self, duration: Duration);
}

impl<F: FnMut(Duration)> Sleeper for F {
    fn sleep(&mut self, duration: Duration) {
        self(duration)
    }
}

/// Sleeper that returns immediately.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoSleep;

impl Sleeper for NoSleep {
    fn sleep(&mut self, _: Duration) {}
}

pub struct Retrying<B, S> {
    inner: B,
    policy: RetryPolicy,
    sleeper: S,
}

impl<B, S> Retrying<B, S> {
    pub fn new(inner: B, policy: RetryPolicy, sleeper: S) -> Self {
        Self { inner, policy, sleeper }
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ChatBackend, S: Sleeper> ChatBackend for Retrying<B, S> {
    fn complete(&mut self, request: &ChatRequest) -> Result<ChatResponse, BackendError> {
        let mut retry = 0;
        loop {
            match self.inner.complete(request) {
                Err(e) if e.is_retryable() && retry < self.policy.max_retries => {
                    log::warn!("transport failure ({e}); retry {} of {}", retry + 1, self.policy.max_retries);
                    self.sleeper.sleep(self.policy.backoff(retry));
                    retry += 1;
                }
                other => return other,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::{
        AssistantKind, BackendScript, FaultKind, Llm, ScriptReply, ScriptRule, ScriptedBackend,
    };
    use crate::prelude::*;

    fn transport() -> ScriptReply {
        ScriptReply::Fault { fault: FaultKind::Transport, message: "reset".into() }
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy::default();
        let ms: Vec<u128> = (0..6).map(|r| p.backoff(r).as_millis()).collect();
        assert_eq!(ms, [500, 1000, 2000, 4000, 8000, 8000]);
    }

    #[test]
    fn transient_failures_are_retried() {
        let script = BackendScript::with_default("d")
            .rule(ScriptRule::reply(transport()).then(transport()).then("ok"));
        let mut slept = Vec::new();
        let backend = Retrying::new(ScriptedBackend::new(script), RetryPolicy::default(), |d: Duration| {
            slept.push(d.as_millis())
        });
        let mut llm = Llm::new(backend);
        assert_eq!(llm.ask(AssistantKind::Coder, "", "x").unwrap(), "ok");
        drop(llm);
        assert_eq!(slept, [500, 1000]);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let script = BackendScript::with_default("d").rule(ScriptRule::reply(transport()));
        let mut llm = Llm::new(Retrying::new(ScriptedBackend::new(script), RetryPolicy::default(), NoSleep));
        assert!(matches!(llm.ask(AssistantKind::Coder, "", "x"), Err(BackendError::Transport(_))));
        assert_eq!(llm.backend().inner().transcript().len(), 4);
    }

    #[test]
    fn auth_failure_is_not_retried() {
        let script = BackendScript::with_default("d")
            .rule(ScriptRule::reply(ScriptReply::Fault { fault: FaultKind::Auth, message: String::new() }));
        let mut llm = Llm::new(Retrying::new(ScriptedBackend::new(script), RetryPolicy::default(), NoSleep));
        assert!(matches!(llm.ask(AssistantKind::Coder, "", "x"), Err(BackendError::Auth(_))));
        assert_eq!(llm.backend().inner().transcript().len(), 1);
    }
}
