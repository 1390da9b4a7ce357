//! Backend abstraction, response cache and the query client.

use alloc::boxed::Box;
use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::grammar::{parse_case_analysis, parse_identification, parse_reward, Identification};
use super::prompt::AdvisorPrompt;
use super::{AdvisorError, CaseAnalysis, CriticalAnnotation, RewardJudgment};
use crate::mdp::EnvKind;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum BackendError {
    /// Worth retrying: transport failures, timeouts, 429 and 5xx.
    #[error("transient failure: {0}")]
    Transient(String),
    #[error("authentication failed: {0}")]
    Auth(String),
    #[error("unsupported environment `{0}`")]
    UnsupportedEnv(EnvKind),
    #[error("{0}")]
    Fatal(String),
}

pub trait Backend {
    fn name(&self) -> &str;
    fn complete(&mut self, prompt: &AdvisorPrompt) -> Result<String, BackendError>;
}

/// Content-addressed store of raw responses keyed by prompt hash.
pub trait ResponseCache {
    fn get(&mut self, hash: &str) -> Option<String>;
    fn put(&mut self, hash: &str, backend: &str, response: &str) -> Result<(), String>;
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MemoryCache {
    entries: BTreeMap<String, String>,
}

impl MemoryCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ResponseCache for MemoryCache {
    fn get(&mut self, hash: &str) -> Option<String> {
        self.entries.get(hash).cloned()
    }

    fn put(&mut self, hash: &str, _backend: &str, response: &str) -> Result<(), String> {
        self.entries.insert(hash.to_string(), response.to_string());
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Total attempts, including the first.
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 3, base_delay_ms: 500, max_delay_ms: 8000 }
    }
}

impl RetryPolicy {
    /// Wait before attempt `attempt + 1`, doubling from the base delay.
    pub fn delay_ms(&self, attempt: u32) -> u64 {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        self.base_delay_ms.saturating_mul(factor).min(self.max_delay_ms)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryStats {
    pub queries: u64,
    pub cache_hits: u64,
    pub backend_calls: u64,
    pub retries: u64,
    pub requeries: u64,
    pub fail_opens: u64,
    pub cache_errors: u64,
}

/// Appended to a prompt whose first answer could not be parsed.
pub const FORMAT_REMINDER: &str =
    "\nReminder: answer strictly in the output format above, one brace-delimited record per item.\n";

pub struct AdvisorClient {
    backend: Box<dyn Backend>,
    cache: Option<Box<dyn ResponseCache>>,
    retry: RetryPolicy,
    sleeper: Box<dyn FnMut(u64)>,
    stats: QueryStats,
}

impl core::fmt::Debug for AdvisorClient {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("AdvisorClient")
            .field("backend", &self.backend.name())
            .field("cached", &self.cache.is_some())
            .field("retry", &self.retry)
            .field("stats", &self.stats)
            .finish()
    }
}

/// Outcome of an identification query after the malformed-response policy.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentifyOutcome {
    pub annotations: Vec<CriticalAnnotation>,
    pub warnings: Vec<String>,
    /// True when both answers were unreadable and the window was marked
    /// non-critical.
    pub failed_open: bool,
}

impl AdvisorClient {
    pub fn new(backend: Box<dyn Backend>) -> Self {
        Self { backend, cache: None, retry: RetryPolicy::default(), sleeper: Box::new(|_| {}), stats: QueryStats::default() }
    }

    pub fn with_cache(mut self, cache: Box<dyn ResponseCache>) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    /// Called with the backoff delay in milliseconds between attempts.
    pub fn with_sleeper(mut self, sleeper: Box<dyn FnMut(u64)>) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn stats(&self) -> QueryStats {
        self.stats
    }

    pub fn backend_name(&self) -> &str {
        self.backend.name()
    }

    /// Raw response for `prompt`, from the cache when possible.
    pub fn query(&mut self, prompt: &AdvisorPrompt) -> Result<String, AdvisorError> {
        self.stats.queries += 1;
        if let Some(cache) = self.cache.as_mut() {
            if let Some(hit) = cache.get(&prompt.content_hash) {
                self.stats.cache_hits += 1;
                return Ok(hit);
            }
        }
        let attempts = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            self.stats.backend_calls += 1;
            match self.backend.complete(prompt) {
                Ok(text) => {
                    if let Some(cache) = self.cache.as_mut() {
                        if cache.put(&prompt.content_hash, self.backend.name(), &text).is_err() {
                            self.stats.cache_errors += 1;
                        }
                    }
                    return Ok(text);
                }
                Err(BackendError::Transient(msg)) => {
                    last = msg;
                    if attempt < attempts {
                        self.stats.retries += 1;
                        (self.sleeper)(self.retry.delay_ms(attempt));
                    }
                }
                Err(BackendError::Auth(msg)) => return Err(AdvisorError::Auth(msg)),
                Err(BackendError::UnsupportedEnv(env)) => return Err(AdvisorError::UnsupportedEnv(env)),
                Err(BackendError::Fatal(msg)) => return Err(AdvisorError::Backend(msg)),
            }
        }
        Err(AdvisorError::Network { attempts, message: last })
    }

    /// Identification with one format-reminder re-query; a second unreadable
    /// answer marks the whole window non-critical.
    pub fn identify(&mut self, prompt: &AdvisorPrompt) -> Result<IdentifyOutcome, AdvisorError> {
        let text = self.query(prompt)?;
        let parsed = match parse_identification(&text, prompt.window) {
            Ok(p) => Ok(p),
            Err(_) => {
                self.stats.requeries += 1;
                let text = self.query(&prompt.with_suffix(FORMAT_REMINDER))?;
                parse_identification(&text, prompt.window)
            }
        };
        match parsed {
            Ok(Identification { annotations, warnings }) => Ok(IdentifyOutcome { annotations, warnings, failed_open: false }),
            Err(_) => {
                self.stats.fail_opens += 1;
                let (b, e) = prompt.window;
                let annotations = (b..e)
                    .map(|t| CriticalAnnotation {
                        timeslot: t,
                        critical: false,
                        corrected_action: None,
                        explanation: String::from("advisor response unreadable"),
                    })
                    .collect();
                Ok(IdentifyOutcome {
                    annotations,
                    warnings: alloc::vec![format!("episode {}: unreadable identification response, window [{b}, {e}) treated as non-critical", prompt.episode_id)],
                    failed_open: true,
                })
            }
        }
    }

    /// Reward judgment, or `None` when both answers lacked a reward.
    pub fn reward(&mut self, prompt: &AdvisorPrompt) -> Result<Option<RewardJudgment>, AdvisorError> {
        let t = prompt.window.0;
        let text = self.query(prompt)?;
        if let Ok(j) = parse_reward(&text, t) {
            return Ok(Some(j));
        }
        self.stats.requeries += 1;
        let text = self.query(&prompt.with_suffix(FORMAT_REMINDER))?;
        match parse_reward(&text, t) {
            Ok(j) => Ok(Some(j)),
            Err(_) => {
                self.stats.fail_opens += 1;
                Ok(None)
            }
        }
    }

    /// Case analysis; two empty answers give an empty analysis.
    pub fn case_analysis(&mut self, prompt: &AdvisorPrompt) -> Result<CaseAnalysis, AdvisorError> {
        let text = self.query(prompt)?;
        if let Ok(a) = parse_case_analysis(&text, prompt.episode_id) {
            return Ok(a);
        }
        self.stats.requeries += 1;
        let text = self.query(&prompt.with_suffix(FORMAT_REMINDER))?;
        Ok(parse_case_analysis(&text, prompt.episode_id).unwrap_or_else(|_| {
            self.stats.fail_opens += 1;
            CaseAnalysis::empty(prompt.episode_id)
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::advisor::prompt::build_reward_prompt;
    use crate::envs::PongAction;
    use crate::envs::PongState;
    use alloc::rc::Rc;
    use alloc::vec;
    use core::cell::RefCell;

    struct Scripted {
        replies: Vec<Result<String, BackendError>>,
        calls: Rc<RefCell<usize>>,
    }

    impl Backend for Scripted {
        fn name(&self) -> &str {
            "scripted"
        }

        fn complete(&mut self, _: &AdvisorPrompt) -> Result<String, BackendError> {
            let mut n = self.calls.borrow_mut();
            let r = self.replies[(*n).min(self.replies.len() - 1)].clone();
            *n += 1;
            r
        }
    }

    fn prompt(t: usize) -> AdvisorPrompt {
        let s = PongState { our_min_x: 36, opp_min_x: 36, ball_x: 40, ball_y: 40, vx: 1, vy: 2, our_score: 0, opp_score: 0 };
        build_reward_prompt(EnvKind::Pong, 0, t, &s.to_state(), &PongAction::Stay.to_action(), &CaseAnalysis::empty(0))
    }

    fn scripted(replies: Vec<Result<String, BackendError>>) -> (AdvisorClient, Rc<RefCell<usize>>) {
        let calls = Rc::new(RefCell::new(0));
        (AdvisorClient::new(Box::new(Scripted { replies, calls: calls.clone() })), calls)
    }

    #[test]
    fn second_query_served_from_cache() {
        let (c, calls) = scripted(vec![Ok("{reward = 0.5, analysis: ok}".into())]);
        let mut c = c.with_cache(Box::new(MemoryCache::new()));
        let a = c.query(&prompt(1)).unwrap();
        let b = c.query(&prompt(1)).unwrap();
        assert_eq!(a, b);
        assert_eq!(*calls.borrow(), 1);
        assert_eq!(c.stats().cache_hits, 1);
    }

    #[test]
    fn retries_transient_failures() {
        let (c, calls) = scripted(vec![
            Err(BackendError::Transient("reset".into())),
            Err(BackendError::Transient("timeout".into())),
            Ok("fine".into()),
        ]);
        let delays = Rc::new(RefCell::new(Vec::new()));
        let d = delays.clone();
        let mut c = c
            .with_retry(RetryPolicy { max_attempts: 3, base_delay_ms: 100, max_delay_ms: 1000 })
            .with_sleeper(Box::new(move |ms| d.borrow_mut().push(ms)));
        assert_eq!(c.query(&prompt(0)).unwrap(), "fine");
        assert_eq!(*calls.borrow(), 3);
        assert_eq!(*delays.borrow(), vec![100, 200]);
    }

    #[test]
    fn gives_up_after_budget() {
        let (c, calls) = scripted(vec![Err(BackendError::Transient("down".into()))]);
        let mut c = c.with_retry(RetryPolicy { max_attempts: 3, base_delay_ms: 1, max_delay_ms: 1 });
        assert_eq!(c.query(&prompt(0)), Err(AdvisorError::Network { attempts: 3, message: "down".into() }));
        assert_eq!(*calls.borrow(), 3);
    }

    #[test]
    fn auth_not_retried() {
        let (mut c, calls) = scripted(vec![Err(BackendError::Auth("missing key".into()))]);
        assert!(matches!(c.query(&prompt(0)), Err(AdvisorError::Auth(_))));
        assert_eq!(*calls.borrow(), 1);
    }

    #[test]
    fn malformed_requeried_then_fail_open() {
        let (mut c, calls) = scripted(vec![Ok("no records here".into())]);
        let mut p = prompt(0);
        p.window = (0, 3);
        let out = c.identify(&p).unwrap();
        assert!(out.failed_open);
        assert_eq!(out.annotations.len(), 3);
        assert!(out.annotations.iter().all(|a| !a.critical));
        assert_eq!(*calls.borrow(), 2);

        let (mut c, _) = scripted(vec![Ok("garbage".into()), Ok("{timeslot 0, critical, stay, late}".into())]);
        let out = c.identify(&p).unwrap();
        assert!(!out.failed_open);
        assert!(out.annotations[0].critical);
    }

    #[test]
    fn reward_fail_open() {
        let (mut c, _) = scripted(vec![Ok("no number".into())]);
        assert_eq!(c.reward(&prompt(0)).unwrap(), None);
        assert_eq!(c.stats().fail_opens, 1);
    }

    #[test]
    fn backoff_caps() {
        let r = RetryPolicy { max_attempts: 10, base_delay_ms: 500, max_delay_ms: 3000 };
        assert_eq!(r.delay_ms(1), 500);
        assert_eq!(r.delay_ms(3), 2000);
        assert_eq!(r.delay_ms(4), 3000);
        assert_eq!(r.delay_ms(80), 3000);
    }
}
