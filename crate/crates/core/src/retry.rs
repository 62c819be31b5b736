//! Exponential backoff shared by the map-provider client and the remote model
//! backend.

use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Total attempts including the first one.
    pub max_attempts: u32,
    #[serde(with = "millis")]
    pub base_delay: Duration,
    pub factor: f64,
    /// Upper bound of the random extra delay, as a fraction of the nominal delay.
    pub jitter: f64,
    #[serde(with = "millis")]
    pub max_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay: Duration::from_secs(1),
            factor: 2.0,
            jitter: 0.25,
            max_delay: Duration::from_secs(60),
        }
    }
}

impl RetryPolicy {
    /// No waiting between attempts; for tests and local backends.
    pub fn immediate(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay: Duration::ZERO,
            factor: 1.0,
            jitter: 0.0,
            max_delay: Duration::ZERO,
        }
    }

    /// Delay before attempt `attempt + 1`, given `attempt` (1-based) failed.
    /// A server-provided retry-after wins over the computed backoff.
    pub fn delay_after(&self, attempt: u32, retry_after: Option<Duration>) -> Duration {
        if let Some(d) = retry_after {
            return d.min(self.max_delay);
        }
        let nominal =
            self.base_delay.as_secs_f64() * self.factor.powi(attempt.saturating_sub(1) as i32);
        let extra = if self.jitter > 0.0 {
            rand::rng().random_range(0.0..=self.jitter) * nominal
        } else {
            0.0
        };
        Duration::from_secs_f64((nominal + extra).min(self.max_delay.as_secs_f64()))
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubles_without_jitter() {
        let p = RetryPolicy {
            jitter: 0.0,
            ..RetryPolicy::default()
        };
        assert_eq!(p.delay_after(1, None), Duration::from_secs(1));
        assert_eq!(p.delay_after(2, None), Duration::from_secs(2));
        assert_eq!(p.delay_after(4, None), Duration::from_secs(8));
    }

    #[test]
    fn jitter_bounded() {
        let p = RetryPolicy::default();
        for _ in 0..100 {
            let d = p.delay_after(2, None).as_secs_f64();
            assert!((2.0..=2.5).contains(&d), "{d}");
        }
    }

    #[test]
    fn retry_after_honored() {
        let p = RetryPolicy::default();
        assert_eq!(
            p.delay_after(1, Some(Duration::from_secs(7))),
            Duration::from_secs(7)
        );
        assert_eq!(
            p.delay_after(1, Some(Duration::from_secs(600))),
            Duration::from_secs(60)
        );
    }
}
