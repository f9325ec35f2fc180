//! The metered in-memory queue between one generator instance and one SUT
//! source.
//!
//! The queue never blocks the producer: an SUT that ingests slower than the
//! offered rate shows up as a growing queue, which is exactly what the
//! sustainability verdict looks for. Throughput is measured here, on the
//! driver side, as the rate at which the SUT takes events.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Event;
use crate::pacing::{wait_until, CancelToken};

pub const DEFAULT_HARD_CAP: u64 = 100_000_000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum QueueError {
    /// The producer finished and every event has been taken.
    #[error("queue closed")]
    Closed,
    /// The SUT dropped its connection to this queue.
    #[error("SUT dropped the connection to the queue")]
    Dropped,
    #[error("queue depth {depth} exceeded the hard cap")]
    DepthCap { depth: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueState {
    Open,
    Closed,
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueueLimits {
    /// Depth above which the high-watermark flag is raised.
    pub capacity_soft: u64,
    /// Depth at which offers are refused to protect the host.
    pub hard_cap: u64,
}

impl Default for QueueLimits {
    fn default() -> Self {
        QueueLimits { capacity_soft: 1_000_000, hard_cap: DEFAULT_HARD_CAP }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueSnapshot {
    pub offered_total: u64,
    pub taken_total: u64,
    pub depth: u64,
    pub state: QueueState,
    pub high_watermark: bool,
}

struct Inner {
    buf: VecDeque<Event>,
    offered: u64,
    taken: u64,
    state: QueueState,
}

struct Shared {
    id: usize,
    limits: QueueLimits,
    inner: Mutex<Inner>,
    high_watermark: AtomicBool,
}

/// Cloneable handle; one producer and one consumer per queue.
#[derive(Clone)]
pub struct QueueHandle {
    shared: Arc<Shared>,
}

impl std::fmt::Debug for QueueHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QueueHandle").field("id", &self.shared.id).field("snapshot", &self.snapshot()).finish()
    }
}

impl QueueHandle {
    pub fn new(id: usize, limits: QueueLimits) -> Self {
        QueueHandle {
            shared: Arc::new(Shared {
                id,
                limits,
                inner: Mutex::new(Inner { buf: VecDeque::new(), offered: 0, taken: 0, state: QueueState::Open }),
                high_watermark: AtomicBool::new(false),
            }),
        }
    }

    pub fn id(&self) -> usize {
        self.shared.id
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.shared.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn check_open(&self, inner: &Inner) -> Result<(), QueueError> {
        match inner.state {
            QueueState::Open => Ok(()),
            QueueState::Closed => Err(QueueError::Closed),
            QueueState::Dropped => Err(QueueError::Dropped),
        }
    }

    pub fn offer(&self, e: Event) -> Result<(), QueueError> {
        let mut inner = self.lock();
        self.check_open(&inner)?;
        let depth = inner.buf.len() as u64;
        if depth >= self.shared.limits.hard_cap {
            return Err(QueueError::DepthCap { depth });
        }
        inner.buf.push_back(e);
        inner.offered += 1;
        if depth + 1 > self.shared.limits.capacity_soft {
            self.shared.high_watermark.store(true, Ordering::Relaxed);
        }
        Ok(())
    }

    pub fn offer_batch(&self, events: impl IntoIterator<Item = Event>) -> Result<u64, QueueError> {
        let mut inner = self.lock();
        self.check_open(&inner)?;
        let mut n = 0;
        for e in events {
            let depth = inner.buf.len() as u64;
            if depth >= self.shared.limits.hard_cap {
                return Err(QueueError::DepthCap { depth });
            }
            inner.buf.push_back(e);
            inner.offered += 1;
            n += 1;
        }
        if inner.buf.len() as u64 > self.shared.limits.capacity_soft {
            self.shared.high_watermark.store(true, Ordering::Relaxed);
        }
        Ok(n)
    }

    /// Non-blocking take of up to `max_n` events in FIFO order.
    ///
    /// An open, empty queue yields an empty batch. A closed queue keeps
    /// yielding its remaining events and then `Err(Closed)`.
    pub fn take_batch(&self, max_n: usize) -> Result<Vec<Event>, QueueError> {
        let mut inner = self.lock();
        if inner.state == QueueState::Dropped {
            return Err(QueueError::Dropped);
        }
        let n = max_n.min(inner.buf.len());
        if n == 0 && inner.state == QueueState::Closed {
            return Err(QueueError::Closed);
        }
        let batch: Vec<Event> = inner.buf.drain(..n).collect();
        inner.taken += n as u64;
        Ok(batch)
    }

    /// Producer is done. Remaining events stay takeable.
    pub fn close(&self) {
        let mut inner = self.lock();
        if inner.state == QueueState::Open {
            inner.state = QueueState::Closed;
        }
    }

    /// The consumer connection is gone; the queue is unusable from now on.
    pub fn mark_dropped(&self) {
        self.lock().state = QueueState::Dropped;
    }

    pub fn state(&self) -> QueueState {
        self.lock().state
    }

    pub fn snapshot(&self) -> QueueSnapshot {
        let inner = self.lock();
        QueueSnapshot {
            offered_total: inner.offered,
            taken_total: inner.taken,
            depth: inner.buf.len() as u64,
            state: inner.state,
            high_watermark: self.shared.high_watermark.load(Ordering::Relaxed),
        }
    }
}

/// One per-second observation, summed over all queues of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySample {
    /// 1-based: sample `k` covers `[k-1, k)` seconds after the run start.
    pub second: u32,
    /// Actual offset of the observation from the run start.
    pub at_nanos: u64,
    pub depth: u64,
    pub offered_total: u64,
    pub taken_total: u64,
    pub offer_rate: u64,
    pub take_rate: u64,
    pub high_watermark: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct QueueTelemetry {
    pub samples: Vec<TelemetrySample>,
}

impl QueueTelemetry {
    /// `second,depth,offer_rate,take_rate`
    pub fn to_csv(&self) -> String {
        let mut out = String::from("second,depth,offer_rate,take_rate\n");
        for s in &self.samples {
            let _ = writeln!(out, "{},{},{},{}", s.second, s.depth, s.offer_rate, s.take_rate);
        }
        out
    }

    /// The SUT's ingestion throughput, events per second.
    pub fn throughput(&self) -> Vec<(u32, u64)> {
        self.samples.iter().map(|s| (s.second, s.take_rate)).collect()
    }

    fn push(&mut self, second: u32, at: Duration, snaps: &[QueueSnapshot]) {
        let offered: u64 = snaps.iter().map(|s| s.offered_total).sum();
        let taken: u64 = snaps.iter().map(|s| s.taken_total).sum();
        let (prev_offered, prev_taken) =
            self.samples.last().map(|s| (s.offered_total, s.taken_total)).unwrap_or((0, 0));
        self.samples.push(TelemetrySample {
            second,
            at_nanos: at.as_nanos() as u64,
            depth: snaps.iter().map(|s| s.depth).sum(),
            offered_total: offered,
            taken_total: taken,
            offer_rate: offered - prev_offered,
            take_rate: taken - prev_taken,
            high_watermark: snaps.iter().any(|s| s.high_watermark),
        });
    }
}

/// Samples a set of queues once per second, aligned to the run start.
pub struct TelemetrySampler {
    live: Arc<Mutex<QueueTelemetry>>,
    stop: CancelToken,
    handle: Option<JoinHandle<()>>,
}

impl TelemetrySampler {
    pub fn start(queues: Vec<QueueHandle>, run_start: Instant) -> Self {
        let live = Arc::new(Mutex::new(QueueTelemetry::default()));
        let stop = CancelToken::new();
        let handle = {
            let live = Arc::clone(&live);
            let stop = stop.clone();
            thread::Builder::new()
                .name("queue-telemetry".into())
                .spawn(move || {
                    let mut second = 1u32;
                    while wait_until(run_start + Duration::from_secs(second as u64), &stop) {
                        let snaps: Vec<QueueSnapshot> = queues.iter().map(QueueHandle::snapshot).collect();
                        let at = run_start.elapsed();
                        live.lock().unwrap_or_else(|e| e.into_inner()).push(second, at, &snaps);
                        second += 1;
                    }
                })
                .expect("spawn telemetry thread")
        };
        TelemetrySampler { live, stop, handle: Some(handle) }
    }

    /// Current series; at most one second stale.
    pub fn snapshot(&self) -> QueueTelemetry {
        self.live.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn finish(mut self) -> QueueTelemetry {
        self.stop.cancel();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
        self.snapshot()
    }
}

impl Drop for TelemetrySampler {
    fn drop(&mut self) {
        self.stop.cancel();
    }
}
