//! The reference engine: a small, correct streaming system used as the
//! default in-process SUT.
//!
//! One worker per source pulls batches, stamps ingest time, and routes events
//! by key to partition workers over bounded channels. Each partition owns a
//! [`WindowOperator`] for its keys and fires windows from watermarks that
//! the sources forward in-band:
//!
//! * event time: the minimum over sources of the largest event time each
//!   source has seen (generator streams are in order per queue, so nothing
//!   is ever late);
//! * processing time: the minimum over sources of the clock reading taken
//!   right after each source stamped its latest batch.
//!
//! A full channel blocks the source worker, which stops pulling, which lets
//! the driver queue grow. That is the engine's backpressure.

pub mod operator;
pub mod throttle;

use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, SendTimeoutError, Sender};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{AdapterError, EventSource, LaunchContext, OutputSink, Query, SourcePoll, StreamingSystem, SutReport, SutRun};
use crate::clock::{Clock, Timestamp};
use crate::model::{mix64, Event, ModelError, TimeSemantics, WindowSpec};
use crate::pacing::CancelToken;

pub use operator::{OperatorStats, WindowAccumulator, WindowOperator};
pub use throttle::Throttle;

const IDLE_SLEEP: Duration = Duration::from_micros(500);
const HEARTBEAT: Duration = Duration::from_millis(5);
const POLL_TICK: Duration = Duration::from_millis(5);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("window [{start}, {end}) closed twice or out of order")]
    DoubleClose { start: i64, end: i64 },
}

fn default_buffer_size() -> usize {
    8
}

fn default_batch_size() -> usize {
    512
}

fn default_partitions() -> usize {
    4
}

fn default_jitter() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineConfig {
    pub query: Query,
    pub window: WindowSpec,
    /// Total service capacity in events per second, split evenly over the
    /// partitions. `None`: as fast as the host allows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service_rate_cap: Option<f64>,
    /// Relative spread of the capped capacity per 5 ms slot.
    #[serde(default = "default_jitter")]
    pub capacity_jitter: f64,
    /// Capacity of each source-to-partition channel, in batches.
    #[serde(default = "default_buffer_size")]
    pub buffer_size: usize,
    /// Largest batch a source pulls at once.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    /// Keyed partitions for aggregation. Joins always use one partition,
    /// since their output timestamps depend on whole-window maxima.
    #[serde(default = "default_partitions")]
    pub partitions: usize,
    #[serde(default)]
    pub seed: u64,
}

impl EngineConfig {
    pub fn new(query: Query, window: WindowSpec) -> Self {
        EngineConfig {
            query,
            window,
            service_rate_cap: None,
            capacity_jitter: default_jitter(),
            buffer_size: default_buffer_size(),
            batch_size: default_batch_size(),
            partitions: default_partitions(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field, message: &str| Err(ModelError::Invalid { field, message: message.to_string() });
        self.window.validate()?;
        if self.buffer_size == 0 {
            return bad("sut.buffer_size", "buffer_size must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("sut.batch_size", "batch_size must be at least 1");
        }
        if self.partitions == 0 {
            return bad("sut.partitions", "at least one partition is required");
        }
        if let Some(cap) = self.service_rate_cap {
            if !(cap.is_finite() && cap > 0.0) {
                return bad("sut.service_rate_cap", "service_rate_cap must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.capacity_jitter) {
            return bad("sut.capacity_jitter", "capacity_jitter must be in [0, 1)");
        }
        Ok(())
    }

    pub fn effective_partitions(&self) -> usize {
        match self.query {
            Query::WindowedAggregation => self.partitions,
            Query::WindowedJoin => 1,
        }
    }
}

/// Per-source final watermarks at end of stream.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceFinal {
    /// Largest event time the source delivered; `None` if it was empty.
    pub max_event_time: Option<Timestamp>,
    pub clock: Timestamp,
}

/// Everything the engine ingested, with ingest stamps, for oracle checks.
#[derive(Debug, Clone, Default)]
pub struct Trace {
    pub events: Vec<Event>,
    pub finals: Vec<Option<SourceFinal>>,
}

impl Trace {
    /// The watermark the engine ended on, if every source finished.
    pub fn final_watermark(&self, semantics: TimeSemantics) -> Option<Timestamp> {
        let finals: Option<Vec<SourceFinal>> = self.finals.iter().copied().collect();
        let values = finals?.into_iter().filter_map(|f| match semantics {
            TimeSemantics::EventTime => f.max_event_time,
            TimeSemantics::ProcessingTime => Some(f.clock),
        });
        values.min()
    }
}

pub type TraceTap = Arc<Mutex<Trace>>;

pub struct ReferenceEngine {
    config: EngineConfig,
    trace: Option<TraceTap>,
}

impl ReferenceEngine {
    pub fn new(config: EngineConfig) -> Self {
        ReferenceEngine { config, trace: None }
    }

    /// Records every ingested event into `tap`.
    pub fn with_trace(mut self, tap: TraceTap) -> Self {
        self.trace = Some(tap);
        self
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }
}

impl StreamingSystem for ReferenceEngine {
    fn name(&self) -> &str {
        "reference"
    }

    fn launch(&self, ctx: LaunchContext) -> Result<SutRun, AdapterError> {
        self.config.validate().map_err(|e| AdapterError::SutFailed(e.to_string()))?;
        let config = self.config.clone();
        let trace = self.trace.clone();
        if let Some(t) = &trace {
            let mut t = t.lock().unwrap_or_else(|e| e.into_inner());
            *t = Trace { events: Vec::new(), finals: vec![None; ctx.sources.len()] };
        }
        Ok(thread::Builder::new()
            .name("reference-engine".into())
            .spawn(move || run(config, ctx, trace))
            .expect("spawn engine thread"))
    }
}

#[derive(Debug)]
enum Msg {
    Events(Vec<Event>),
    Progress { source: usize, max_event_time: Option<Timestamp>, clock: Timestamp },
    Eos { source: usize, last: SourceFinal },
}

fn send(tx: &Sender<Msg>, mut msg: Msg, cancel: &CancelToken) -> bool {
    loop {
        match tx.send_timeout(msg, POLL_TICK) {
            Ok(()) => return true,
            Err(SendTimeoutError::Timeout(m)) => {
                if cancel.is_cancelled() {
                    return false;
                }
                msg = m;
            }
            Err(SendTimeoutError::Disconnected(_)) => return false,
        }
    }
}

fn run(config: EngineConfig, ctx: LaunchContext, trace: Option<TraceTap>) -> Result<SutReport, AdapterError> {
    let LaunchContext { clock, sources, sink, cancel } = ctx;
    let partitions = config.effective_partitions();
    let n_sources = sources.len();
    let (txs, rxs): (Vec<Sender<Msg>>, Vec<Receiver<Msg>>) =
        (0..partitions).map(|_| crossbeam_channel::bounded(config.buffer_size)).unzip();

    let start = Instant::now();
    let workers: Vec<JoinHandle<Result<OperatorStats, AdapterError>>> = rxs
        .into_iter()
        .enumerate()
        .map(|(p, rx)| {
            let throttle = config.service_rate_cap.map(|cap| {
                Throttle::new(cap / partitions as f64, config.capacity_jitter, mix64(config.seed, p as u64), start)
            });
            let (op, sink, cancel) = (WindowOperator::new(config.query, config.window), Arc::clone(&sink), cancel.clone());
            let semantics = config.window.semantics;
            thread::Builder::new()
                .name(format!("engine-partition-{p}"))
                .spawn(move || partition_worker(op, semantics, n_sources, rx, throttle, sink, cancel))
                .expect("spawn partition worker")
        })
        .collect();

    let feeders: Vec<JoinHandle<Result<(), AdapterError>>> = sources
        .into_iter()
        .enumerate()
        .map(|(id, source)| {
            let feeder = Feeder {
                id,
                source,
                outputs: txs.clone(),
                key_of: match config.query {
                    Query::WindowedAggregation => |e: &Event| e.gem_pack_id,
                    Query::WindowedJoin => |e: &Event| e.user_id,
                },
                batch_size: config.batch_size,
                clock: clock.clone(),
                cancel: cancel.clone(),
                trace: trace.clone(),
            };
            thread::Builder::new()
                .name(format!("engine-source-{id}"))
                .spawn(move || feeder.run())
                .expect("spawn source worker")
        })
        .collect();
    drop(txs);

    let mut first_err = None;
    for h in feeders {
        match h.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => {
                cancel.cancel();
                first_err.get_or_insert(e);
            }
            Err(_) => {
                cancel.cancel();
                first_err.get_or_insert(AdapterError::SutFailed("source worker panicked".into()));
            }
        }
    }
    let mut report = SutReport::default();
    for h in workers {
        match h.join() {
            Ok(Ok(stats)) => {
                report.events_processed += stats.events;
                report.late_events += stats.late_events;
                report.windows_closed += stats.windows_closed;
                report.outputs_emitted += stats.outputs;
            }
            Ok(Err(e)) => {
                first_err.get_or_insert(e);
            }
            Err(_) => {
                first_err.get_or_insert(AdapterError::SutFailed("partition worker panicked".into()));
            }
        }
    }
    match first_err {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

struct Feeder {
    id: usize,
    source: Box<dyn EventSource>,
    outputs: Vec<Sender<Msg>>,
    key_of: fn(&Event) -> u64,
    batch_size: usize,
    clock: Clock,
    cancel: CancelToken,
    trace: Option<TraceTap>,
}

impl Feeder {
    fn broadcast(&self, make: impl Fn() -> Msg) -> bool {
        self.outputs.iter().all(|tx| send(tx, make(), &self.cancel))
    }

    fn run(mut self) -> Result<(), AdapterError> {
        let mut max_event_time: Option<Timestamp> = None;
        let mut last_progress = Instant::now();
        let partitions = self.outputs.len() as u64;
        while !self.cancel.is_cancelled() {
            match self.source.poll(self.batch_size) {
                SourcePoll::Events(mut batch) => {
                    let now = self.clock.now();
                    for e in &mut batch {
                        e.ingest_time = Some(now);
                        max_event_time = max_event_time.max(Some(e.event_time));
                    }
                    if let Some(t) = &self.trace {
                        t.lock().unwrap_or_else(|e| e.into_inner()).events.extend_from_slice(&batch);
                    }
                    if partitions == 1 {
                        if !send(&self.outputs[0], Msg::Events(batch), &self.cancel) {
                            break;
                        }
                    } else {
                        let mut split: Vec<Vec<Event>> = vec![Vec::new(); partitions as usize];
                        for e in batch {
                            split[(mix64((self.key_of)(&e), 0) % partitions) as usize].push(e);
                        }
                        for (p, events) in split.into_iter().enumerate() {
                            if !events.is_empty() && !send(&self.outputs[p], Msg::Events(events), &self.cancel) {
                                return Ok(());
                            }
                        }
                    }
                    if !self.broadcast(|| Msg::Progress { source: self.id, max_event_time, clock: now }) {
                        break;
                    }
                    last_progress = Instant::now();
                }
                SourcePoll::Idle => {
                    if last_progress.elapsed() >= HEARTBEAT {
                        let clock = self.clock.now();
                        if !self.broadcast(|| Msg::Progress { source: self.id, max_event_time, clock }) {
                            break;
                        }
                        last_progress = Instant::now();
                    }
                    thread::sleep(IDLE_SLEEP);
                }
                SourcePoll::Finished => {
                    let last = SourceFinal { max_event_time, clock: self.clock.now() };
                    if let Some(t) = &self.trace {
                        t.lock().unwrap_or_else(|e| e.into_inner()).finals[self.id] = Some(last);
                    }
                    self.broadcast(|| Msg::Eos { source: self.id, last });
                    break;
                }
                SourcePoll::Failed(reason) => {
                    return Err(AdapterError::SutFailed(format!("source {}: {reason}", self.id)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct SourceProgress {
    max_event_time: Option<Timestamp>,
    clock: Option<Timestamp>,
    finished: bool,
}

fn watermark(progress: &[SourceProgress], semantics: TimeSemantics) -> Option<Timestamp> {
    let mut wm: Option<Timestamp> = None;
    let mut constrained = false;
    for p in progress {
        let value = match semantics {
            TimeSemantics::EventTime => p.max_event_time,
            TimeSemantics::ProcessingTime => p.clock,
        };
        match value {
            Some(v) => {
                wm = Some(wm.map_or(v, |w| w.min(v)));
                constrained = true;
            }
            // A finished source without data holds nothing back; a live one
            // without data holds back everything.
            None if p.finished => {}
            None => return None,
        }
    }
    if constrained {
        wm
    } else {
        None
    }
}

fn partition_worker(
    mut op: WindowOperator,
    semantics: TimeSemantics,
    n_sources: usize,
    rx: Receiver<Msg>,
    mut throttle: Option<Throttle>,
    sink: Arc<dyn OutputSink>,
    cancel: CancelToken,
) -> Result<OperatorStats, AdapterError> {
    let mut progress = vec![SourceProgress::default(); n_sources];
    loop {
        if cancel.is_cancelled() {
            break;
        }
        let msg = match rx.recv_timeout(POLL_TICK) {
            Ok(msg) => msg,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => break,
        };
        match msg {
            Msg::Events(batch) => {
                let mut done = 0;
                while done < batch.len() {
                    let n = match &mut throttle {
                        Some(t) => match t.acquire((batch.len() - done) as u64, &cancel) {
                            Some(n) => n as usize,
                            None => return Ok(op.stats()),
                        },
                        None => batch.len() - done,
                    };
                    for e in &batch[done..done + n] {
                        op.ingest(e);
                    }
                    done += n;
                }
            }
            Msg::Progress { source, max_event_time, clock } => {
                progress[source].max_event_time = max_event_time;
                progress[source].clock = Some(clock);
            }
            Msg::Eos { source, last } => {
                progress[source] = SourceProgress { max_event_time: last.max_event_time, clock: Some(last.clock), finished: true };
            }
        }
        if let Some(wm) = watermark(&progress, semantics) {
            for record in op.advance(wm) {
                sink.emit(record)?;
            }
        }
        if progress.iter().all(|p| p.finished) {
            break;
        }
    }
    Ok(op.stats())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{OutputPayload, OutputRecord};
    use crate::model::{Price, Stream};
    use crate::queue::{QueueHandle, QueueLimits};

    struct Collect(Mutex<Vec<OutputRecord>>);

    impl OutputSink for Collect {
        fn emit(&self, record: OutputRecord) -> Result<(), AdapterError> {
            self.0.lock().unwrap().push(record);
            Ok(())
        }
    }

    fn run_engine(config: EngineConfig, queues: &[QueueHandle]) -> (SutReport, Vec<OutputRecord>, Trace) {
        let sink = Arc::new(Collect(Mutex::new(Vec::new())));
        let tap: TraceTap = Arc::default();
        let engine = ReferenceEngine::new(config).with_trace(Arc::clone(&tap));
        let ctx = LaunchContext {
            clock: Clock::system(),
            sources: queues.iter().map(|q| Box::new(q.clone()) as Box<dyn EventSource>).collect(),
            sink: Arc::clone(&sink) as Arc<dyn OutputSink>,
            cancel: CancelToken::new(),
        };
        let report = engine.launch(ctx).unwrap().join().unwrap().unwrap();
        let out = sink.0.lock().unwrap().clone();
        let trace = tap.lock().unwrap().clone();
        (report, out, trace)
    }

    fn tumbling(ms: u64) -> WindowSpec {
        WindowSpec::tumbling(Duration::from_millis(ms), TimeSemantics::EventTime).unwrap()
    }

    #[test]
    fn closes_windows_up_to_the_slowest_source() {
        let a = QueueHandle::new(0, QueueLimits::default());
        let b = QueueHandle::new(1, QueueLimits::default());
        for t in 0..10u64 {
            a.offer(Event::purchase(1, t % 3, Price::from_cents(1), Timestamp::from_millis(t * 100), t)).unwrap();
        }
        b.offer(Event::purchase(2, 0, Price::from_cents(1), Timestamp::from_millis(450), 0)).unwrap();
        a.close();
        b.close();
        let (report, out, trace) = run_engine(EngineConfig::new(Query::WindowedAggregation, tumbling(200)), &[a, b]);
        assert_eq!(report.events_processed, 11);
        assert_eq!(trace.final_watermark(TimeSemantics::EventTime), Some(Timestamp::from_millis(450)));
        // Windows ending at 200 and 400 close; the rest are discarded.
        let starts: std::collections::BTreeSet<i64> = out
            .iter()
            .map(|r| match r.payload {
                OutputPayload::Agg { window_start, .. } => window_start,
                _ => unreachable!(),
            })
            .collect();
        assert_eq!(starts.into_iter().collect::<Vec<_>>(), vec![0, 200_000_000]);
        let total: u64 = out
            .iter()
            .map(|r| match r.payload {
                OutputPayload::Agg { count, .. } => count,
                _ => 0,
            })
            .sum();
        assert_eq!(total, 4);
    }

    #[test]
    fn empty_source_does_not_block_at_end_of_stream() {
        let a = QueueHandle::new(0, QueueLimits::default());
        let b = QueueHandle::new(1, QueueLimits::default());
        for t in 0..5u64 {
            a.offer(Event::purchase(1, 1, Price::from_cents(2), Timestamp::from_millis(t * 100), t)).unwrap();
        }
        a.close();
        b.close();
        let (_, out, _) = run_engine(EngineConfig::new(Query::WindowedAggregation, tumbling(200)), &[a, b]);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn ingest_is_stamped_and_bounds_event_time() {
        let q = QueueHandle::new(0, QueueLimits::default());
        let clock = Clock::system();
        for t in 0..100u64 {
            let stream = if t % 2 == 0 { Stream::Purchases } else { Stream::Ads };
            let mut e = Event::purchase(t % 5, 1, Price::from_cents(3), clock.now(), t);
            e.stream = stream;
            q.offer(e).unwrap();
        }
        q.close();
        let (_, _, trace) = run_engine(EngineConfig::new(Query::WindowedJoin, tumbling(1)), &[q]);
        assert_eq!(trace.events.len(), 100);
        assert!(trace.events.iter().all(|e| e.ingest_time.is_some_and(|i| i >= e.event_time)));
    }

    #[test]
    fn watermark_rules() {
        let live = |t: Option<u64>| SourceProgress {
            max_event_time: t.map(Timestamp::from_nanos),
            clock: t.map(Timestamp::from_nanos),
            finished: false,
        };
        let done = |t: Option<u64>| SourceProgress { finished: true, ..live(t) };
        let ev = TimeSemantics::EventTime;
        assert_eq!(watermark(&[live(Some(5)), live(Some(3))], ev), Some(Timestamp::from_nanos(3)));
        assert_eq!(watermark(&[live(Some(5)), live(None)], ev), None);
        assert_eq!(watermark(&[live(Some(5)), done(None)], ev), Some(Timestamp::from_nanos(5)));
        assert_eq!(watermark(&[done(None)], ev), None);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut c = EngineConfig::new(Query::WindowedAggregation, tumbling(100));
        c.buffer_size = 0;
        assert!(c.validate().unwrap_err().to_string().starts_with("sut.buffer_size"));
    }
}
