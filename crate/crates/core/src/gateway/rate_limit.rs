use async_trait::async_trait;
use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

/// Time source for rate limiting and retry backoff.
#[async_trait]
pub trait Clock: Send + Sync {
    /// Elapsed time since the clock's origin.
    fn now(&self) -> Duration;
    async fn sleep(&self, d: Duration);
}

pub struct SystemClock {
    origin: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self {
            origin: Instant::now(),
        }
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

#[async_trait]
impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    async fn sleep(&self, d: Duration) {
        tokio::time::sleep(d).await;
    }
}

/// A clock whose `sleep` returns immediately after advancing time. Every
/// requested sleep is logged.
#[derive(Default)]
pub struct VirtualClock {
    now: Mutex<Duration>,
    sleeps: Mutex<Vec<Duration>>,
}

impl VirtualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advance(&self, d: Duration) {
        *self.now.lock().unwrap() += d;
    }

    pub fn sleeps(&self) -> Vec<Duration> {
        self.sleeps.lock().unwrap().clone()
    }
}

#[async_trait]
impl Clock for VirtualClock {
    fn now(&self) -> Duration {
        *self.now.lock().unwrap()
    }

    async fn sleep(&self, d: Duration) {
        self.sleeps.lock().unwrap().push(d);
        self.advance(d);
        tokio::task::yield_now().await;
    }
}

/// Sliding-window limiter: at most `max_requests` grants in any window of
/// length `window`.
pub struct RateLimiter {
    max_requests: usize,
    window: Duration,
    clock: Arc<dyn Clock>,
    granted: Mutex<VecDeque<Duration>>,
}

impl RateLimiter {
    pub fn new(max_requests: usize, window: Duration, clock: Arc<dyn Clock>) -> Self {
        assert!(max_requests > 0, "rate limit must allow at least one request");
        Self {
            max_requests,
            window,
            clock,
            granted: Mutex::new(VecDeque::new()),
        }
    }

    /// Waits until a request may be sent and returns the grant time.
    pub async fn acquire(&self) -> Duration {
        loop {
            let wait = {
                let now = self.clock.now();
                let mut granted = self.granted.lock().unwrap();
                while granted
                    .front()
                    .is_some_and(|&t| t + self.window <= now)
                {
                    granted.pop_front();
                }
                if granted.len() < self.max_requests {
                    granted.push_back(now);
                    return now;
                }
                granted[0] + self.window - now
            };
            self.clock.sleep(wait).await;
        }
    }
}
