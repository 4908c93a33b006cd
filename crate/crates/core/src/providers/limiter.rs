use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

pub const WINDOW: Duration = Duration::from_secs(60);

/// Time source for backoff and rate limiting; swapped for a fake in tests.
pub trait Clock: Send + Sync {
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

#[derive(Debug)]
pub struct SystemClock {
    start: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock { start: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.start.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Manually advanced clock; `sleep` moves time forward instantly.
#[derive(Debug, Default)]
pub struct FakeClock {
    now: Mutex<Duration>,
    slept: Mutex<Vec<Duration>>,
}

impl FakeClock {
    pub fn advance(&self, d: Duration) {
        *self.now.lock().unwrap() += d;
    }

    pub fn sleeps(&self) -> Vec<Duration> {
        self.slept.lock().unwrap().clone()
    }
}

impl Clock for FakeClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    fn sleep(&self, d: Duration) {
        self.slept.lock().unwrap().push(d);
        self.advance(d);
    }
}

/// Sliding-window limiter: at most `per_minute` grants in any 60 s window.
pub struct RateLimiter {
    per_minute: usize,
    clock: Arc<dyn Clock>,
    granted: Mutex<VecDeque<Duration>>,
}

impl RateLimiter {
    pub fn new(per_minute: u32, clock: Arc<dyn Clock>) -> Self {
        RateLimiter {
            per_minute: per_minute.max(1) as usize,
            clock,
            granted: Mutex::new(VecDeque::new()),
        }
    }

    /// Blocks until a request may be sent, then records it. Returns the grant time.
    pub fn acquire(&self) -> Duration {
        loop {
            let wait = {
                let mut granted = self.granted.lock().unwrap();
                let now = self.clock.now();
                while granted.front().is_some_and(|&t| t + WINDOW <= now) {
                    granted.pop_front();
                }
                if granted.len() < self.per_minute {
                    granted.push_back(now);
                    return now;
                }
                *granted.front().unwrap() + WINDOW - now
            };
            self.clock.sleep(wait);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn never_exceeds_cap_in_any_window() {
        let clock = Arc::new(FakeClock::default());
        let limiter = RateLimiter::new(7, clock.clone());
        let mut grants = Vec::new();
        for i in 0..200 {
            // irregular arrivals
            clock.advance(Duration::from_millis((i * 37 % 11) as u64 * 400));
            grants.push(limiter.acquire());
        }
        for (i, &start) in grants.iter().enumerate() {
            let in_window = grants[i..].iter().take_while(|&&t| t < start + WINDOW).count();
            assert!(in_window <= 7, "{in_window} grants in window starting {start:?}");
        }
        assert!(grants.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn under_cap_does_not_wait() {
        let clock = Arc::new(FakeClock::default());
        let limiter = RateLimiter::new(100, clock.clone());
        for _ in 0..100 {
            limiter.acquire();
        }
        assert!(clock.sleeps().is_empty());
        limiter.acquire();
        assert_eq!(clock.sleeps(), vec![WINDOW]);
    }
}
