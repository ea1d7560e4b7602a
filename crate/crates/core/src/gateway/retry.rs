use std::time::Duration;

use rand::Rng;

/// Failure of a single HTTP attempt, classified for the retry loop.
#[derive(Debug, Clone)]
pub enum TransportError {
    /// Worth retrying: connection trouble, 429, 5xx.
    Transient {
        message: String,
        retry_after: Option<Duration>,
    },
    /// Retrying cannot help: auth failures, malformed requests, bad payloads.
    Fatal { message: String },
}

/// Exponential backoff with jitter; a server-supplied retry-after wins.
#[derive(Debug, Clone)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_millis(500),
            max_delay: Duration::from_secs(30),
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `attempt` (0-based), jittered into [d/2, d].
    pub fn backoff(&self, attempt: u32, retry_after: Option<Duration>) -> Duration {
        if let Some(ra) = retry_after {
            return ra;
        }
        let exp = self
            .base_delay
            .saturating_mul(1u32.checked_shl(attempt).unwrap_or(u32::MAX))
            .min(self.max_delay);
        let jitter: f64 = rand::rng().random_range(0.5..=1.0);
        exp.mul_f64(jitter)
    }

    /// Runs `attempt` until it succeeds, fails fatally, or attempts run out.
    /// The closure receives the 0-based attempt number.
    pub fn run<T>(
        &self,
        mut attempt: impl FnMut(u32) -> Result<T, TransportError>,
    ) -> Result<T, TransportError> {
        let max = self.max_attempts.max(1);
        let mut n = 0;
        loop {
            match attempt(n) {
                Ok(v) => return Ok(v),
                Err(TransportError::Transient {
                    message,
                    retry_after,
                }) if n + 1 < max => {
                    let wait = self.backoff(n, retry_after);
                    tracing::warn!(attempt = n + 1, ?wait, "transient failure: {message}");
                    std::thread::sleep(wait);
                    n += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}
