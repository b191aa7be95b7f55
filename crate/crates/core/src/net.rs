//! Request pacing and bounded retry shared by every HTTP client in the crate.

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

/// Enforces a minimum interval between consecutive requests.
#[derive(Debug)]
pub struct Throttle {
    min_interval: Duration,
    last: Mutex<Option<Instant>>,
}

impl Throttle {
    pub fn new(min_interval: Duration) -> Self {
        Self {
            min_interval,
            last: Mutex::new(None),
        }
    }

    pub fn wait(&self) {
        let mut last = self.last.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(prev) = *last {
            let elapsed = prev.elapsed();
            if elapsed < self.min_interval {
                thread::sleep(self.min_interval - elapsed);
            }
        }
        *last = Some(Instant::now());
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    pub attempts: u32,
    /// Delay before the second attempt; doubles for each further attempt.
    pub base_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay_ms: 250,
        }
    }
}

/// What a single attempt produced.
pub enum Attempt<T, E> {
    Done(T),
    /// Transient failure; retried while attempts remain.
    Retry(E),
    /// Permanent failure; returned immediately.
    Fail(E),
}

impl RetryPolicy {
    pub fn delay_before(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.base_delay_ms.saturating_mul(1 << attempt.saturating_sub(1).min(16)))
    }

    /// Runs `op` up to `attempts` times with exponential backoff between transient
    /// failures. On exhaustion returns the last transient error and the attempt count.
    pub fn run<T, E>(&self, mut op: impl FnMut(u32) -> Attempt<T, E>) -> Result<T, (E, u32)> {
        let attempts = self.attempts.max(1);
        let mut attempt = 1;
        loop {
            match op(attempt) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fail(e) => return Err((e, attempt)),
                Attempt::Retry(e) if attempt >= attempts => return Err((e, attempt)),
                Attempt::Retry(_) => {
                    thread::sleep(self.delay_before(attempt));
                    attempt += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy {
            attempts: 3,
            base_delay_ms: 10,
        };
        assert_eq!(p.delay_before(1), Duration::from_millis(10));
        assert_eq!(p.delay_before(2), Duration::from_millis(20));
    }

    #[test]
    fn stops_after_configured_attempts() {
        let p = RetryPolicy {
            attempts: 3,
            base_delay_ms: 1,
        };
        let mut calls = 0;
        let r: Result<(), (&str, u32)> = p.run(|_| {
            calls += 1;
            Attempt::Retry("boom")
        });
        assert_eq!(r, Err(("boom", 3)));
        assert_eq!(calls, 3);
        let r: Result<u32, (&str, u32)> = p.run(|n| if n == 2 { Attempt::Done(n) } else { Attempt::Retry("x") });
        assert_eq!(r, Ok(2));
        let r: Result<(), (&str, u32)> = p.run(|_| Attempt::Fail("fatal"));
        assert_eq!(r, Err(("fatal", 1)));
    }

    #[test]
    fn throttle_spaces_requests() {
        let t = Throttle::new(Duration::from_millis(30));
        let start = Instant::now();
        t.wait();
        t.wait();
        t.wait();
        assert!(start.elapsed() >= Duration::from_millis(60));
    }
}
