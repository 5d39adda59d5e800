//! Per-provider throttling: a token bucket for request rate and a counting
//! gate for concurrent in-flight calls. Callers block until capacity frees.

use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

pub struct Limiter {
    bucket: Option<Mutex<TokenBucket>>,
    gate: Option<InflightGate>,
}

impl Limiter {
    /// `requests_per_minute` and `max_inflight` of 0 mean unlimited.
    pub fn new(requests_per_minute: u32, max_inflight: u32) -> Self {
        Limiter {
            bucket: (requests_per_minute > 0)
                .then(|| Mutex::new(TokenBucket::new(requests_per_minute))),
            gate: (max_inflight > 0).then(|| InflightGate::new(max_inflight as usize)),
        }
    }

    pub fn unlimited() -> Self {
        Limiter {
            bucket: None,
            gate: None,
        }
    }

    /// Blocks until a rate token and an in-flight slot are available.
    pub fn acquire(&self) -> InflightPermit<'_> {
        if let Some(bucket) = &self.bucket {
            loop {
                let wait = {
                    let mut b = bucket.lock().unwrap();
                    b.try_take()
                };
                match wait {
                    None => break,
                    Some(d) => std::thread::sleep(d),
                }
            }
        }
        if let Some(gate) = &self.gate {
            gate.enter();
        }
        InflightPermit { limiter: self }
    }
}

/// RAII permit; releases the in-flight slot on drop.
pub struct InflightPermit<'a> {
    limiter: &'a Limiter,
}

impl Drop for InflightPermit<'_> {
    fn drop(&mut self) {
        if let Some(gate) = &self.limiter.gate {
            gate.leave();
        }
    }
}

struct TokenBucket {
    capacity: f64,
    tokens: f64,
    refill_per_sec: f64,
    last_refill: Instant,
}

impl TokenBucket {
    fn new(requests_per_minute: u32) -> Self {
        let capacity = requests_per_minute as f64;
        TokenBucket {
            capacity,
            tokens: capacity,
            refill_per_sec: capacity / 60.0,
            last_refill: Instant::now(),
        }
    }

    /// Takes one token, or returns how long to wait before retrying.
    fn try_take(&mut self) -> Option<Duration> {
        let now = Instant::now();
        let elapsed = now.duration_since(self.last_refill).as_secs_f64();
        self.tokens = (self.tokens + elapsed * self.refill_per_sec).min(self.capacity);
        self.last_refill = now;
        if self.tokens >= 1.0 {
            self.tokens -= 1.0;
            None
        } else {
            let deficit = 1.0 - self.tokens;
            Some(Duration::from_secs_f64(deficit / self.refill_per_sec))
        }
    }
}

struct InflightGate {
    active: Mutex<usize>,
    freed: Condvar,
    max: usize,
}

impl InflightGate {
    fn new(max: usize) -> Self {
        InflightGate {
            active: Mutex::new(0),
            freed: Condvar::new(),
            max,
        }
    }

    fn enter(&self) {
        let mut active = self.active.lock().unwrap();
        while *active >= self.max {
            active = self.freed.wait(active).unwrap();
        }
        *active += 1;
    }

    fn leave(&self) {
        let mut active = self.active.lock().unwrap();
        *active -= 1;
        drop(active);
        self.freed.notify_one();
    }
}
