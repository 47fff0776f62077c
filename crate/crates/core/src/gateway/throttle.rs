use std::sync::Mutex;
use std::time::Duration;

use rand::Rng;

use super::clock::Clock;

/// Global request pacing: dispatch slots spaced `1 / rps` apart, handed out
/// in arrival order.
#[derive(Debug)]
pub struct Throttle {
    interval: Option<Duration>,
    next_slot: Mutex<Option<Duration>>,
}

impl Throttle {
    pub fn new(requests_per_second: f64) -> Self {
        let interval = (requests_per_second.is_finite() && requests_per_second > 0.0)
            .then(|| Duration::from_secs_f64(1.0 / requests_per_second));
        Throttle { interval, next_slot: Mutex::new(None) }
    }

    pub fn unlimited() -> Self {
        Throttle { interval: None, next_slot: Mutex::new(None) }
    }

    pub fn interval(&self) -> Option<Duration> {
        self.interval
    }

    /// Blocks until the caller's slot; returns the slot time.
    pub fn acquire(&self, clock: &dyn Clock) -> Duration {
        let Some(interval) = self.interval else {
            return clock.now();
        };
        let slot = {
            let mut next = self.next_slot.lock().unwrap_or_else(|e| e.into_inner());
            let now = clock.now();
            let slot = match *next {
                Some(n) if n > now => n,
                _ => now,
            };
            *next = Some(slot + interval);
            slot
        };
        let now = clock.now();
        if slot > now {
            clock.sleep(slot - now);
        }
        slot
    }
}

/// Exponential backoff with full jitter: the delay before retry `n`
/// (0-based) is uniform in `[0, min(base * 2^n, cap)]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
    pub cap: Duration,
}

impl RetryPolicy {
    pub fn ceiling(&self, retry: u32) -> Duration {
        let factor = 2u64.saturating_pow(retry.min(62));
        let millis = (self.base.as_millis() as u64).saturating_mul(factor);
        Duration::from_millis(millis).min(self.cap)
    }

    pub fn delay<R: Rng + ?Sized>(&self, retry: u32, rng: &mut R) -> Duration {
        let ceiling = self.ceiling(retry);
        if ceiling.is_zero() {
            return ceiling;
        }
        Duration::from_nanos(rng.random_range(0..=ceiling.as_nanos() as u64))
    }
}
