//! Synthetic service capacity.
//!
//! Credit arrives in fixed slots. With `jitter > 0` each slot's credit is
//! scaled by a uniform factor in `[1 - jitter, 1 + jitter]`, so the mean
//! capacity stays at `rate` while the instantaneous capacity varies the way
//! a real operator's per-event cost does. Unused credit is capped at two
//! slots' worth: idle capacity cannot be saved up.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::pacing::{wait_until, CancelToken};

pub const SLOT: Duration = Duration::from_millis(5);

#[derive(Debug, Clone)]
pub struct Throttle {
    per_slot: f64,
    jitter: f64,
    cap: f64,
    credit: f64,
    slot_start: Instant,
    rng: ChaCha8Rng,
}

impl Throttle {
    pub fn new(rate: f64, jitter: f64, seed: u64, start: Instant) -> Self {
        let per_slot = rate * SLOT.as_secs_f64();
        Throttle {
            per_slot,
            jitter,
            cap: (2.0 * per_slot).max(1.0),
            credit: 0.0,
            slot_start: start,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn refill(&mut self, now: Instant) {
        let mut slots = 0u32;
        while now >= self.slot_start + SLOT {
            self.slot_start += SLOT;
            let factor = if self.jitter > 0.0 { self.rng.random_range(1.0 - self.jitter..=1.0 + self.jitter) } else { 1.0 };
            self.credit = (self.credit + self.per_slot * factor).min(self.cap);
            slots += 1;
            if slots >= 64 {
                // Long idle: the bucket is full anyway.
                let skip = (now - self.slot_start).as_nanos() / SLOT.as_nanos();
                self.slot_start += SLOT * skip as u32;
                self.credit = self.cap;
            }
        }
    }

    /// Takes up to `n` units of credit available at `now` without waiting.
    pub fn try_take(&mut self, n: u64, now: Instant) -> u64 {
        self.refill(now);
        let granted = (self.credit.floor() as u64).min(n);
        self.credit -= granted as f64;
        granted
    }

    /// Waits for credit and takes up to `n`. `None` on cancellation.
    pub fn acquire(&mut self, n: u64, cancel: &CancelToken) -> Option<u64> {
        loop {
            let granted = self.try_take(n, Instant::now());
            if granted > 0 {
                return Some(granted);
            }
            if !wait_until(self.slot_start + SLOT, cancel) {
                return None;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn served_over(rate: f64, jitter: f64, secs: u64) -> u64 {
        let start = Instant::now();
        let mut t = Throttle::new(rate, jitter, 1, start);
        let mut total = 0;
        let mut now = start;
        while now < start + Duration::from_secs(secs) {
            now += Duration::from_micros(500);
            total += t.try_take(u64::MAX, now);
        }
        total
    }

    #[test]
    fn exact_without_jitter() {
        let served = served_over(10_000.0, 0.0, 2);
        assert!((19_990..=20_000).contains(&served), "{served}");
    }

    #[test]
    fn jitter_preserves_the_mean() {
        let served = served_over(50_000.0, 0.5, 10) as f64;
        assert!((served / 500_000.0 - 1.0).abs() < 0.01, "{served}");
    }

    #[test]
    fn idle_credit_is_capped() {
        let start = Instant::now();
        let mut t = Throttle::new(1000.0, 0.0, 1, start);
        assert_eq!(t.try_take(u64::MAX, start + Duration::from_secs(10)), 10);
    }
}
