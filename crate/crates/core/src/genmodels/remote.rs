//! Few-shot completion: sampling policy, a retrying concurrency-capped
//! client wrapper and a scripted fake.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{few_shot_task_counts, CompletionClient};
use crate::corpus::TaskKind;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSampling {
    pub node_samples: usize,
    pub node_keep: usize,
    pub sentence_samples: usize,
}

impl Default for FewShotSampling {
    fn default() -> Self {
        Self { node_samples: 15, node_keep: 10, sentence_samples: 10 }
    }
}

/// Node task: the first `node_keep` non-empty samples in sample order.
/// Sentence task: the first non-empty sample, clients returning samples
/// best-first.
pub fn complete_fewshot(
    client: &dyn CompletionClient,
    prompt: &str,
    task: TaskKind,
    sampling: &FewShotSampling,
) -> Result<Vec<String>> {
    let (n, keep) = few_shot_task_counts(task, sampling);
    if n == 0 || keep == 0 {
        return Err(Error::Parameter("few-shot sampling needs at least one sample".into()));
    }
    let samples = client.complete(prompt, n).map_err(|e| match e {
        Error::Retryable(_) => e,
        other => Error::Retryable(other.to_string()),
    })?;
    let kept: Vec<String> = samples
        .into_iter()
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .take(keep)
        .collect();
    if kept.is_empty() {
        return Err(Error::EmptyResult(format!("all samples from `{}` were empty", client.id())));
    }
    Ok(kept)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: usize,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
    pub max_concurrent: usize,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 4, base_delay_ms: 500, max_delay_ms: 8000, max_concurrent: 4 }
    }
}

impl RetryPolicy {
    /// Exponential backoff before retry `attempt` (1-based).
    pub fn delay(&self, attempt: usize) -> Duration {
        let factor = 1u64 << attempt.saturating_sub(1).min(20);
        Duration::from_millis(self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms))
    }
}

/// Retries retryable failures with backoff and caps in-flight requests.
pub struct RetryingClient<C> {
    inner: C,
    policy: RetryPolicy,
    in_flight: Mutex<usize>,
    slot: Condvar,
}

impl<C: CompletionClient> RetryingClient<C> {
    pub fn new(inner: C, policy: RetryPolicy) -> Self {
        Self { inner, policy, in_flight: Mutex::new(0), slot: Condvar::new() }
    }

    pub fn inner(&self) -> &C {
        &self.inner
    }

    fn acquire(&self) {
        let cap = self.policy.max_concurrent.max(1);
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        while *n >= cap {
            n = self.slot.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n += 1;
    }

    fn release(&self) {
        let mut n = self.in_flight.lock().unwrap_or_else(|e| e.into_inner());
        *n -= 1;
        self.slot.notify_one();
    }
}

impl<C: CompletionClient> CompletionClient for RetryingClient<C> {
    fn id(&self) -> &str {
        self.inner.id()
    }

    fn complete(&self, prompt: &str, n: usize) -> Result<Vec<String>> {
        let attempts = self.policy.max_attempts.max(1);
        let mut last = None;
        for attempt in 1..=attempts {
            self.acquire();
            let r = self.inner.complete(prompt, n);
            self.release();
            match r {
                Err(Error::Retryable(msg)) => {
                    log::warn!("completion attempt {attempt}/{attempts} failed: {msg}");
                    last = Some(msg);
                    if attempt < attempts {
                        std::thread::sleep(self.policy.delay(attempt));
                    }
                }
                other => return other,
            }
        }
        Err(Error::Retryable(format!(
            "gave up after {attempts} attempts: {}",
            last.unwrap_or_default()
        )))
    }
}

/// Replays queued responses; each call consumes one.
pub struct ScriptedClient {
    id: String,
    responses: Mutex<VecDeque<Result<Vec<String>>>>,
    prompts: Mutex<Vec<(String, usize)>>,
}

impl ScriptedClient {
    pub fn new(id: impl Into<String>, responses: Vec<Result<Vec<String>>>) -> Self {
        Self { id: id.into(), responses: Mutex::new(responses.into()), prompts: Mutex::new(Vec::new()) }
    }

    /// Prompts and sample counts received so far.
    pub fn calls(&self) -> Vec<(String, usize)> {
        self.prompts.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl CompletionClient for ScriptedClient {
    fn id(&self) -> &str {
        &self.id
    }

    fn complete(&self, prompt: &str, n: usize) -> Result<Vec<String>> {
        self.prompts.lock().unwrap_or_else(|e| e.into_inner()).push((prompt.to_string(), n));
        let next = self.responses.lock().unwrap_or_else(|e| e.into_inner()).pop_front();
        match next {
            Some(Ok(mut v)) => {
                v.truncate(n);
                Ok(v)
            }
            Some(Err(e)) => Err(e),
            None => Err(Error::Retryable("script exhausted".into())),
        }
    }
}
