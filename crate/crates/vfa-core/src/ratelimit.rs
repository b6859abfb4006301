//! Fixed-window per-caller rate limiter with an injectable clock.

use std::collections::HashMap;
use std::sync::Mutex;

use crate::clock::Clock;

#[derive(Debug, Clone, Copy)]
pub struct RateLimitConfig {
    pub max_per_window: u32,
    pub window_ms: u64,
}

impl Default for RateLimitConfig {
    fn default() -> Self {
        // 10 evaluations per minute per credential.
        Self { max_per_window: 10, window_ms: 60_000 }
    }
}

pub struct RateLimiter {
    config: RateLimitConfig,
    clock: Clock,
    windows: Mutex<HashMap<String, (u64, u32)>>,
}

impl RateLimiter {
    pub fn new(config: RateLimitConfig, clock: Clock) -> Self {
        Self { config, clock, windows: Mutex::new(HashMap::new()) }
    }

    /// Record one request from `caller`; `false` means over the limit.
    pub fn allow(&self, caller: &str) -> bool {
        let now = self.clock.now_ms();
        let mut windows = self.windows.lock().expect("rate limiter poisoned");
        let entry = windows.entry(caller.to_string()).or_insert((now, 0));
        if now.saturating_sub(entry.0) >= self.config.window_ms {
            *entry = (now, 0);
        }
        if entry.1 >= self.config.max_per_window {
            return false;
        }
        entry.1 += 1;
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use std::sync::Arc;

    #[test]
    fn limit_resets_after_window() {
        let clock = Arc::new(ManualClock::new(0));
        let limiter = RateLimiter::new(
            RateLimitConfig { max_per_window: 2, window_ms: 1_000 },
            clock.clone(),
        );
        assert!(limiter.allow("a"));
        assert!(limiter.allow("a"));
        assert!(!limiter.allow("a"));
        assert!(limiter.allow("b")); // independent caller
        clock.advance_ms(1_000);
        assert!(limiter.allow("a"));
    }
}
