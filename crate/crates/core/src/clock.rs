//! Experiment time.
//!
//! Every timestamp in a run is a nanosecond offset from one experiment epoch.
//! Event-time (stamped by the generator), ingest-time (stamped by the SUT
//! source) and emission-time (stamped by the driver sink) all read the same
//! [`Clock`], so latency arithmetic never crosses clock domains.

use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

/// Nanoseconds since the experiment epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub const fn from_nanos(nanos: u64) -> Self {
        Timestamp(nanos)
    }

    pub const fn from_millis(millis: u64) -> Self {
        Timestamp(millis * 1_000_000)
    }

    pub const fn from_secs(secs: u64) -> Self {
        Timestamp(secs * 1_000_000_000)
    }

    pub const fn as_nanos(self) -> u64 {
        self.0
    }

    /// Signed distance `self - earlier` in nanoseconds.
    pub fn nanos_since(self, earlier: Timestamp) -> i64 {
        self.0 as i64 - earlier.0 as i64
    }

    pub fn saturating_add(self, d: Duration) -> Self {
        Timestamp(self.0.saturating_add(d.as_nanos() as u64))
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e9
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.9}s", self.as_secs_f64())
    }
}

#[derive(Clone)]
enum Source {
    System(Instant),
    Manual(Arc<AtomicU64>),
}

/// Shared experiment clock. Cheap to clone; clones observe the same time.
///
/// The manual variant only moves when told to and exists for replaying
/// hand-built scenarios with exact timestamps.
#[derive(Clone)]
pub struct Clock {
    source: Source,
}

impl Clock {
    /// A wall clock whose epoch is "now".
    pub fn system() -> Self {
        Self::starting_at(Instant::now())
    }

    pub fn starting_at(epoch: Instant) -> Self {
        Clock { source: Source::System(epoch) }
    }

    pub fn manual(start: Timestamp) -> Self {
        Clock { source: Source::Manual(Arc::new(AtomicU64::new(start.as_nanos()))) }
    }

    pub fn now(&self) -> Timestamp {
        match &self.source {
            Source::System(epoch) => Timestamp(epoch.elapsed().as_nanos() as u64),
            Source::Manual(t) => Timestamp(t.load(Ordering::Acquire)),
        }
    }

    /// The wall-clock instant of the epoch, `None` for manual clocks.
    pub fn epoch(&self) -> Option<Instant> {
        match &self.source {
            Source::System(epoch) => Some(*epoch),
            Source::Manual(_) => None,
        }
    }

    /// Converts a wall-clock instant into an experiment timestamp.
    pub fn timestamp_of(&self, at: Instant) -> Timestamp {
        match &self.source {
            Source::System(epoch) => Timestamp(at.saturating_duration_since(*epoch).as_nanos() as u64),
            Source::Manual(t) => Timestamp(t.load(Ordering::Acquire)),
        }
    }

    /// Sets a manual clock. Panics on a system clock.
    pub fn set(&self, t: Timestamp) {
        match &self.source {
            Source::Manual(cell) => cell.store(t.as_nanos(), Ordering::Release),
            Source::System(_) => panic!("cannot set a system clock"),
        }
    }

    /// The epoch as nanoseconds since the Unix epoch, so that a process on
    /// the same host can rebuild an equivalent clock. Manual clocks have none.
    pub fn unix_epoch_nanos(&self) -> Option<u64> {
        let epoch = self.epoch()?;
        let since_epoch = epoch.elapsed();
        let now = SystemTime::now().duration_since(UNIX_EPOCH).ok()?;
        Some(now.checked_sub(since_epoch)?.as_nanos() as u64)
    }

    /// Rebuilds a clock from [`Clock::unix_epoch_nanos`].
    pub fn from_unix_epoch_nanos(nanos: u64) -> Self {
        let now = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let since_epoch = now.saturating_sub(Duration::from_nanos(nanos));
        let epoch = Instant::now().checked_sub(since_epoch).unwrap_or_else(Instant::now);
        Self::starting_at(epoch)
    }

    pub fn is_manual(&self) -> bool {
        matches!(self.source, Source::Manual(_))
    }
}

impl fmt::Debug for Clock {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.source {
            Source::System(_) => f.write_str("Clock::System"),
            Source::Manual(_) => write!(f, "Clock::Manual({})", self.now()),
        }
    }
}
