//! Rate schedules and the token bucket used both by the generator (to pace
//! emission) and by the reference engine (to cap its service rate).

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::model::ModelError;

/// Below this distance to a deadline we spin instead of sleeping.
pub const SPIN_THRESHOLD: Duration = Duration::from_micros(100);

/// Longest single sleep, so that cancellation is observed promptly.
const MAX_SLEEP_SLICE: Duration = Duration::from_millis(5);

/// Shared stop signal.
#[derive(Debug, Clone, Default)]
pub struct CancelToken(Arc<AtomicBool>);

impl CancelToken {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn cancel(&self) {
        self.0.store(true, Ordering::Release);
    }

    pub fn is_cancelled(&self) -> bool {
        self.0.load(Ordering::Acquire)
    }
}

/// Blocks until `deadline`. Returns `false` if cancelled first.
pub fn wait_until(deadline: Instant, cancel: &CancelToken) -> bool {
    loop {
        if cancel.is_cancelled() {
            return false;
        }
        let now = Instant::now();
        if now >= deadline {
            return true;
        }
        let remaining = deadline - now;
        if remaining > SPIN_THRESHOLD {
            thread::sleep((remaining - SPIN_THRESHOLD).min(MAX_SLEEP_SLICE));
        } else {
            std::hint::spin_loop();
            thread::yield_now();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateSegment {
    #[serde(with = "crate::durations")]
    pub duration: Duration,
    /// Events per second.
    pub rate: f64,
}

/// Piecewise-constant offered load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RateSchedule {
    segments: Vec<RateSegment>,
}

impl RateSchedule {
    pub fn new(segments: Vec<RateSegment>) -> Result<Self, ModelError> {
        let schedule = RateSchedule { segments };
        schedule.validate()?;
        Ok(schedule)
    }

    pub fn constant(rate: f64, duration: Duration) -> Self {
        RateSchedule { segments: vec![RateSegment { duration, rate }] }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |message: &str| ModelError::Invalid { field: "schedule", message: message.to_string() };
        if self.segments.is_empty() {
            return Err(bad("schedule must have at least one segment"));
        }
        for s in &self.segments {
            if s.duration.is_zero() {
                return Err(bad("segment durations must be positive"));
            }
            if !(s.rate.is_finite() && s.rate > 0.0) {
                return Err(bad("segment rates must be positive"));
            }
        }
        Ok(())
    }

    pub fn segments(&self) -> &[RateSegment] {
        &self.segments
    }

    pub fn total_duration(&self) -> Duration {
        self.segments.iter().map(|s| s.duration).sum()
    }

    pub fn max_rate(&self) -> f64 {
        self.segments.iter().map(|s| s.rate).fold(0.0, f64::max)
    }

    /// Every segment's rate multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> RateSchedule {
        RateSchedule {
            segments: self.segments.iter().map(|s| RateSegment { duration: s.duration, rate: s.rate * factor }).collect(),
        }
    }

    /// Scheduled events in `[0, elapsed)`, fractional.
    pub fn cumulative(&self, elapsed: Duration) -> f64 {
        let mut acc = 0.0;
        let mut t = Duration::ZERO;
        for s in &self.segments {
            if elapsed >= t + s.duration {
                acc += s.rate * s.duration.as_secs_f64();
                t += s.duration;
            } else {
                acc += s.rate * (elapsed - t).as_secs_f64();
                return acc;
            }
        }
        acc
    }

    /// Scheduled events in `[from, to)`.
    pub fn expected_between(&self, from: Duration, to: Duration) -> f64 {
        self.cumulative(to) - self.cumulative(from)
    }

    pub fn total_events(&self) -> u64 {
        (self.cumulative(self.total_duration()) + 1e-6).floor() as u64
    }

    /// The offset at which the cumulative count reaches `k`, or `None` past
    /// the end of the schedule.
    pub fn time_of(&self, k: f64) -> Option<Duration> {
        let mut acc = 0.0;
        let mut t = Duration::ZERO;
        for s in &self.segments {
            let count = s.rate * s.duration.as_secs_f64();
            if acc + count >= k - 1e-9 {
                let within = ((k - acc) / s.rate).max(0.0);
                return Some(t + Duration::from_secs_f64(within).min(s.duration));
            }
            acc += count;
            t += s.duration;
        }
        None
    }

    /// Rate in effect at `elapsed` (zero past the end).
    pub fn rate_at(&self, elapsed: Duration) -> f64 {
        let mut t = Duration::ZERO;
        for s in &self.segments {
            t += s.duration;
            if elapsed < t {
                return s.rate;
            }
        }
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Acquire {
    Granted(u64),
    /// The schedule has ended; no more tokens will arrive.
    Exhausted,
    Cancelled,
}

/// Token bucket whose refill follows a [`RateSchedule`].
///
/// Credit is computed from the absolute schedule integral, so the total
/// number of tokens over a finite schedule is exact regardless of how often
/// the bucket is polled. With a `burst` cap, credit above the cap is
/// forfeited (a throttle cannot save up idle capacity).
#[derive(Debug, Clone)]
pub struct TokenBucket {
    schedule: RateSchedule,
    start: Instant,
    burst: Option<f64>,
    spent: f64,
    limit: f64,
    quantum: Duration,
    last_grant: Instant,
    max_lateness: Duration,
}

impl TokenBucket {
    pub fn new(schedule: RateSchedule, start: Instant) -> Self {
        let limit = schedule.total_events() as f64;
        TokenBucket {
            schedule,
            start,
            burst: None,
            spent: 0.0,
            limit,
            quantum: Duration::from_micros(500),
            last_grant: start,
            max_lateness: Duration::ZERO,
        }
    }

    /// Constant rate with a burst cap, effectively unbounded in time.
    pub fn throttle(rate: f64, burst: f64, start: Instant) -> Self {
        let mut bucket = Self::new(RateSchedule::constant(rate, Duration::from_secs(100 * 24 * 3600)), start);
        bucket.burst = Some(burst.max(1.0));
        bucket.limit = f64::INFINITY;
        bucket
    }

    /// Minimum spacing between wake-ups while waiting for tokens. At high
    /// rates the due tokens are then granted in small bursts instead of one
    /// wake-up per token.
    pub fn with_quantum(mut self, quantum: Duration) -> Self {
        self.quantum = quantum;
        self
    }

    /// Caps the total number of tokens below the schedule's own total.
    pub fn with_limit(mut self, limit: u64) -> Self {
        self.limit = self.limit.min(limit as f64);
        self
    }

    pub fn schedule(&self) -> &RateSchedule {
        &self.schedule
    }

    pub fn granted(&self) -> u64 {
        self.spent as u64
    }

    /// Largest observed delay between a token's scheduled instant and the
    /// grant that handed it out.
    pub fn max_lateness(&self) -> Duration {
        self.max_lateness
    }

    fn credited(&self, now: Instant) -> f64 {
        self.schedule.cumulative(now.saturating_duration_since(self.start)).min(self.limit)
    }

    /// Whole tokens available at `now`.
    pub fn available(&mut self, now: Instant) -> u64 {
        let credit = self.credited(now);
        if let Some(burst) = self.burst {
            if credit - self.spent > burst {
                self.spent = credit - burst;
            }
        }
        (credit - self.spent + 1e-9).floor().max(0.0) as u64
    }

    pub fn exhausted(&self) -> bool {
        self.spent + 1e-9 >= self.limit
    }

    fn next_token_at(&self) -> Option<Instant> {
        if self.exhausted() {
            return None;
        }
        self.schedule.time_of(self.spent + 1.0).map(|d| self.start + d)
    }

    /// Takes up to `n` tokens without blocking.
    pub fn try_take(&mut self, n: u64, now: Instant) -> u64 {
        let granted = self.available(now).min(n);
        if granted > 0 {
            if self.burst.is_none() {
                if let Some(due) = self.next_token_at() {
                    self.max_lateness = self.max_lateness.max(now.saturating_duration_since(due));
                }
            }
            self.spent += granted as f64;
            self.last_grant = now;
        }
        granted
    }

    /// Blocks until at least one token is available and takes up to `n`.
    pub fn acquire(&mut self, n: u64, cancel: &CancelToken) -> Acquire {
        loop {
            let now = Instant::now();
            let granted = self.try_take(n, now);
            if granted > 0 {
                return Acquire::Granted(granted);
            }
            let Some(due) = self.next_token_at() else {
                return Acquire::Exhausted;
            };
            let target = due.max(self.last_grant + self.quantum);
            if !wait_until(target, cancel) {
                return Acquire::Cancelled;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulative_is_piecewise_linear() {
        let s = RateSchedule::new(vec![
            RateSegment { duration: Duration::from_secs(10), rate: 100.0 },
            RateSegment { duration: Duration::from_secs(5), rate: 10.0 },
        ])
        .unwrap();
        assert_eq!(s.cumulative(Duration::from_secs(5)), 500.0);
        assert_eq!(s.cumulative(Duration::from_secs(12)), 1020.0);
        assert_eq!(s.total_events(), 1050);
        assert_eq!(s.time_of(1020.0), Some(Duration::from_secs(12)));
        assert_eq!(s.time_of(2000.0), None);
        assert_eq!(s.rate_at(Duration::from_secs(11)), 10.0);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        assert!(RateSchedule::new(vec![]).is_err());
        assert!(RateSchedule::new(vec![RateSegment { duration: Duration::from_secs(1), rate: 0.0 }]).is_err());
    }

    #[test]
    fn bucket_credit_is_exact_over_a_finite_schedule() {
        let start = Instant::now();
        let mut b = TokenBucket::new(RateSchedule::constant(1000.0, Duration::from_secs(10)), start);
        assert_eq!(b.available(start + Duration::from_millis(2500)), 2500);
        assert_eq!(b.try_take(u64::MAX, start + Duration::from_secs(60)), 10_000);
        assert!(b.exhausted());
    }

    #[test]
    fn throttle_forfeits_credit_above_burst() {
        let start = Instant::now();
        let mut b = TokenBucket::throttle(1000.0, 10.0, start);
        assert_eq!(b.available(start + Duration::from_secs(5)), 10);
        assert_eq!(b.try_take(3, start + Duration::from_secs(5)), 3);
        assert_eq!(b.available(start + Duration::from_secs(5)), 7);
        assert_eq!(b.available(start + Duration::from_millis(5005)), 10);
    }

    #[test]
    fn acquire_reports_exhaustion_and_cancellation() {
        let mut b = TokenBucket::new(RateSchedule::constant(100_000.0, Duration::from_millis(20)), Instant::now());
        let cancel = CancelToken::new();
        let mut total = 0;
        loop {
            match b.acquire(64, &cancel) {
                Acquire::Granted(n) => total += n,
                Acquire::Exhausted => break,
                Acquire::Cancelled => unreachable!(),
            }
        }
        assert_eq!(total, 2000);

        let mut slow = TokenBucket::throttle(0.5, 1.0, Instant::now());
        slow.try_take(1, Instant::now() + Duration::from_secs(3));
        cancel.cancel();
        assert_eq!(slow.acquire(1, &cancel), Acquire::Cancelled);
    }
}
