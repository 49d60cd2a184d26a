use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::LlmError;

/// Exponential backoff: the delay before retry `i` (0-based) is
/// `initial_delay * 2^i`, capped at `max_delay`. A `Retry-After` hint from a
/// rate-limit response replaces the computed delay (still capped).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    #[serde(with = "millis")]
    pub initial_delay: Duration,
    #[serde(with = "millis")]
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_retries: 3, initial_delay: Duration::from_millis(500), max_delay: Duration::from_secs(20) }
    }
}

impl RetryPolicy {
    pub fn none() -> Self {
        RetryPolicy { max_retries: 0, initial_delay: Duration::ZERO, max_delay: Duration::ZERO }
    }

    pub fn delay_for(&self, retry: u32, error: &LlmError) -> Duration {
        let computed = self.initial_delay.saturating_mul(2u32.saturating_pow(retry));
        let hinted = match error {
            LlmError::RateLimited { retry_after_ms: Some(ms) } => Duration::from_millis(*ms),
            _ => computed,
        };
        hinted.min(self.max_delay)
    }

    pub fn run<T>(&self, mut attempt: impl FnMut() -> Result<T, LlmError>) -> Result<T, LlmError> {
        let mut retry = 0;
        loop {
            match attempt() {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && retry < self.max_retries => {
                    let delay = self.delay_for(retry, &e);
                    log::warn!("transient backend error ({e}); retry {} in {delay:?}", retry + 1);
                    thread::sleep(delay);
                    retry += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

mod millis {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}
