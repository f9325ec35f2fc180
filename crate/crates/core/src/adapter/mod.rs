//! The boundary between the driver and a system under test.
//!
//! A SUT pulls events from driver queues through [`EventSource`]s and hands
//! its results to an [`OutputSink`]. The sink the driver provides stamps
//! every record with its emission time on arrival, so emission and event
//! time share the driver's clock.
//!
//! Two transports exist: in-process (the SUT runs on threads of the driver
//! process and reads the queues directly) and remote (a length-prefixed TCP
//! protocol, see [`wire`]).

pub mod remote;
pub mod wire;

use std::fmt;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, Sender};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, Timestamp};
use crate::model::{Event, Price};
use crate::pacing::CancelToken;
use crate::queue::{QueueError, QueueHandle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Query {
    /// Sum of purchase prices per gem pack over a window.
    WindowedAggregation,
    /// Purchases joined with ads on `(user_id, gem_pack_id)` within a window.
    WindowedJoin,
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Query::WindowedAggregation => "windowed_aggregation",
            Query::WindowedJoin => "windowed_join",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputPayload {
    Agg { gem_pack_id: u64, sum_price: Price, count: u64, window_start: i64 },
    Join { user_id: u64, gem_pack_id: u64, price: Price, window_start: i64 },
}

/// One result tuple with the timestamps latency is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub payload: OutputPayload,
    /// Maximum event-time over the events that contributed to this output.
    pub max_event_time: Timestamp,
    /// Maximum ingest-time over the same events.
    pub max_ingest_time: Timestamp,
    /// Set by the driver when the record arrives.
    pub emission_time: Option<Timestamp>,
}

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("could not connect to SUT at {addr}: {source}")]
    ConnectionRefused { addr: String, source: std::io::Error },
    #[error("SUT speaks protocol version {theirs}, driver speaks {ours}")]
    HandshakeVersionMismatch { ours: u16, theirs: u16 },
    #[error("SUT expects {theirs} sources, driver has {ours}")]
    SourceCountMismatch { ours: u16, theirs: u16 },
    #[error("protocol error: {0}")]
    Protocol(#[from] wire::WireError),
    #[error("connection to SUT dropped")]
    ConnectionDropped,
    #[error("output sink is closed")]
    SinkClosed,
    #[error("SUT failed: {0}")]
    SutFailed(String),
    #[error("SUT did not stop within {0:?}")]
    ShutdownTimeout(Duration),
}

/// Result of one poll of an event source.
#[derive(Debug, Clone, PartialEq)]
pub enum SourcePoll {
    Events(Vec<Event>),
    /// Nothing available right now.
    Idle,
    /// The source is closed and drained.
    Finished,
    /// The source is unusable.
    Failed(String),
}

/// Pull side of one driver queue as seen by a SUT.
pub trait EventSource: Send {
    fn poll(&mut self, max: usize) -> SourcePoll;
}

impl EventSource for QueueHandle {
    fn poll(&mut self, max: usize) -> SourcePoll {
        match self.take_batch(max) {
            Ok(batch) if batch.is_empty() => SourcePoll::Idle,
            Ok(batch) => SourcePoll::Events(batch),
            Err(QueueError::Closed) => SourcePoll::Finished,
            Err(e) => SourcePoll::Failed(e.to_string()),
        }
    }
}

/// Where a SUT delivers its results.
pub trait OutputSink: Send + Sync {
    fn emit(&self, record: OutputRecord) -> Result<(), AdapterError>;
}

/// The driver's sink: stamps emission time and forwards to the collector.
#[derive(Clone)]
pub struct DriverSink {
    clock: Clock,
    tx: Sender<OutputRecord>,
}

impl DriverSink {
    pub fn new(clock: Clock) -> (DriverSink, Receiver<OutputRecord>) {
        let (tx, rx) = crossbeam_channel::unbounded();
        (DriverSink { clock, tx }, rx)
    }
}

impl OutputSink for DriverSink {
    fn emit(&self, mut record: OutputRecord) -> Result<(), AdapterError> {
        record.emission_time = Some(self.clock.now());
        self.tx.send(record).map_err(|_| AdapterError::SinkClosed)
    }
}

/// What a SUT reports about its own run.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SutReport {
    pub events_processed: u64,
    pub outputs_emitted: u64,
    pub windows_closed: u64,
    pub late_events: u64,
}

/// Everything a SUT gets when it is started.
pub struct LaunchContext {
    pub clock: Clock,
    pub sources: Vec<Box<dyn EventSource>>,
    pub sink: Arc<dyn OutputSink>,
    pub cancel: CancelToken,
}

pub type SutRun = JoinHandle<Result<SutReport, AdapterError>>;

/// A streaming system that can run inside the driver process.
///
/// `launch` must return promptly; the work happens on the returned thread.
/// The run ends when every source is finished (after flushing remaining
/// windows) or when `cancel` fires (without flushing).
pub trait StreamingSystem: Send + Sync {
    fn name(&self) -> &str;
    fn launch(&self, ctx: LaunchContext) -> Result<SutRun, AdapterError>;
}

#[derive(Clone)]
pub enum Endpoint {
    InProcess(Arc<dyn StreamingSystem>),
    Remote(String),
}

#[derive(Clone)]
pub struct SutDescriptor {
    pub name: String,
    pub endpoint: Endpoint,
}

impl fmt::Debug for SutDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let endpoint = match &self.endpoint {
            Endpoint::InProcess(s) => format!("in-process {}", s.name()),
            Endpoint::Remote(addr) => format!("remote {addr}"),
        };
        f.debug_struct("SutDescriptor").field("name", &self.name).field("endpoint", &endpoint).finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShutdownMode {
    /// Wait for the SUT to consume every queued event and flush.
    Drain,
    /// Stop now; queued events are discarded.
    Cancel,
}

enum Kind {
    InProcess { cancel: CancelToken, run: Option<SutRun> },
    Remote(remote::RemoteSession),
}

/// A connected SUT for the duration of one run.
pub struct Session {
    kind: Kind,
    queues: Vec<QueueHandle>,
    dropped: Arc<AtomicBool>,
    outcome: Option<Result<SutReport, String>>,
}

/// Connects the SUT to `queues`. Outputs go to `sink`.
pub fn connect(sut: &SutDescriptor, queues: &[QueueHandle], clock: &Clock, sink: DriverSink) -> Result<Session, AdapterError> {
    let dropped = Arc::new(AtomicBool::new(false));
    let kind = match &sut.endpoint {
        Endpoint::InProcess(system) => {
            let cancel = CancelToken::new();
            let ctx = LaunchContext {
                clock: clock.clone(),
                sources: queues.iter().map(|q| Box::new(q.clone()) as Box<dyn EventSource>).collect(),
                sink: Arc::new(sink),
                cancel: cancel.clone(),
            };
            let run = system.launch(ctx)?;
            Kind::InProcess { cancel, run: Some(run) }
        }
        Endpoint::Remote(addr) => {
            Kind::Remote(remote::RemoteSession::connect(addr, queues, clock, sink, Arc::clone(&dropped))?)
        }
    };
    log::debug!("connected {} to {} queues", sut.name, queues.len());
    Ok(Session { kind, queues: queues.to_vec(), dropped, outcome: None })
}

impl Session {
    /// True once the SUT has gone away before being told to stop. Every queue
    /// is marked dropped at that point.
    pub fn is_dropped(&mut self) -> bool {
        if self.dropped.load(Ordering::Acquire) {
            return true;
        }
        if let Kind::InProcess { run, .. } = &mut self.kind {
            if run.as_ref().is_some_and(JoinHandle::is_finished) {
                let outcome = join_run(run.take().expect("checked above"));
                // A SUT that stops while its queues are still open has
                // abandoned them.
                let abandoned = self.queues.iter().any(|q| q.state() == crate::queue::QueueState::Open);
                if outcome.is_err() || abandoned {
                    self.mark_dropped();
                }
                self.outcome = Some(outcome);
            }
        }
        self.dropped.load(Ordering::Acquire)
    }

    fn mark_dropped(&self) {
        self.dropped.store(true, Ordering::Release);
        for q in &self.queues {
            q.mark_dropped();
        }
    }

    /// True once the SUT has finished on its own, cleanly or not.
    pub fn is_finished(&self) -> bool {
        match &self.kind {
            Kind::InProcess { run, .. } => run.as_ref().is_none_or(JoinHandle::is_finished),
            Kind::Remote(r) => r.is_finished(),
        }
    }

    /// Stops the SUT. Calling it again returns the first outcome.
    pub fn shutdown(&mut self, mode: ShutdownMode, timeout: Duration) -> Result<SutReport, AdapterError> {
        if self.outcome.is_none() {
            let outcome = match &mut self.kind {
                Kind::InProcess { cancel, run } => match run.take() {
                    Some(handle) => {
                        if mode == ShutdownMode::Cancel {
                            cancel.cancel();
                        }
                        let deadline = Instant::now() + timeout;
                        while !handle.is_finished() && Instant::now() < deadline {
                            thread::sleep(Duration::from_millis(2));
                        }
                        if !handle.is_finished() {
                            cancel.cancel();
                            log::warn!("SUT did not finish within {timeout:?}; cancelling");
                        }
                        join_run(handle)
                    }
                    None => Err("SUT already stopped".to_string()),
                },
                Kind::Remote(r) => r.shutdown(mode, timeout).map_err(|e| e.to_string()),
            };
            self.outcome = Some(outcome);
        }
        match self.outcome.as_ref().expect("set above") {
            Ok(report) => Ok(report.clone()),
            Err(_) if self.dropped.load(Ordering::Acquire) => Err(AdapterError::ConnectionDropped),
            Err(e) => Err(AdapterError::SutFailed(e.clone())),
        }
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if self.outcome.is_none() {
            let _ = self.shutdown(ShutdownMode::Cancel, Duration::from_secs(5));
        }
    }
}

fn join_run(handle: SutRun) -> Result<SutReport, String> {
    match handle.join() {
        Ok(Ok(report)) => Ok(report),
        Ok(Err(e)) => Err(e.to_string()),
        Err(_) => Err("SUT thread panicked".to_string()),
    }
}
