//! Seeded, paced producer of purchase and ad events.
//!
//! Each instance owns exactly one driver queue. Payloads (stream, keys,
//! price) are a pure function of `(seed, instance, seq)`. Event times are
//! the emission clock by default; [`EventTimeStamp::Scheduled`] stamps the
//! instant each event was due instead, which makes whole runs repeatable.

use std::hint::black_box;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::model::{draw_key, mix64, seeded_rng, Event, KeyDistribution, ModelError, Price, Stream};
use crate::pacing::{Acquire, CancelToken, RateSchedule, TokenBucket};
use crate::queue::{QueueError, QueueHandle};

const USER_KEY_SALT: u64 = 0x5553_4552;
const GEM_KEY_SALT: u64 = 0x4745_4D53;
const PAYLOAD_SALT: u64 = 0x5041_594C;
const MAX_BATCH: u64 = 4096;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("generator instance {instance}: {source}")]
    Queue { instance: usize, source: QueueError },
    #[error("generator instance {instance} panicked")]
    Panicked { instance: usize },
}

impl GeneratorError {
    pub fn queue_error(&self) -> Option<&QueueError> {
        match self {
            GeneratorError::Queue { source, .. } => Some(source),
            GeneratorError::Panicked { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceRange {
    pub min_cents: u64,
    pub max_cents: u64,
}

/// Share of each stream in the generated mix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StreamMix {
    pub purchases: f64,
    pub ads: f64,
}

impl StreamMix {
    pub const PURCHASES_ONLY: StreamMix = StreamMix { purchases: 1.0, ads: 0.0 };
    pub const HALF_AND_HALF: StreamMix = StreamMix { purchases: 0.5, ads: 0.5 };
}

/// How the generator stamps event times.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventTimeStamp {
    /// The driver clock when the event is emitted.
    #[default]
    Emission,
    /// The instant the pacing schedule made the event due.
    Scheduled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub instances: usize,
    pub seed: u64,
    /// Stops generation early once this many events (over all instances)
    /// have been emitted. `None`: the schedule decides.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_events: Option<u64>,
    pub key_dist: KeyDistribution,
    pub price: PriceRange,
    pub streams: StreamMix,
    pub event_time: EventTimeStamp,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            instances: 2,
            seed: 42,
            total_events: None,
            key_dist: KeyDistribution::Normal { key_space: 1000, mean: 500.0, stddev: 100.0 },
            price: PriceRange { min_cents: 100, max_cents: 10_000 },
            streams: StreamMix::PURCHASES_ONLY,
            event_time: EventTimeStamp::Emission,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field, message: &str| Err(ModelError::Invalid { field, message: message.to_string() });
        if self.instances == 0 {
            return bad("generator.instances", "at least one instance is required");
        }
        if self.instances > u16::MAX as usize {
            return bad("generator.instances", "too many instances");
        }
        if self.total_events == Some(0) {
            return bad("generator.total_events", "total_events must be positive");
        }
        self.key_dist.validate().map_err(|e| match e {
            ModelError::Invalid { field, message } => ModelError::Invalid {
                field: match field {
                    "key_dist.key_space" => "generator.key_dist.key_space",
                    "key_dist.mean" => "generator.key_dist.mean",
                    "key_dist.stddev" => "generator.key_dist.stddev",
                    "key_dist.fixed_key" => "generator.key_dist.fixed_key",
                    other => other,
                },
                message,
            },
        })?;
        if self.price.min_cents > self.price.max_cents {
            return bad("generator.price", "min_cents must not exceed max_cents");
        }
        let StreamMix { purchases, ads } = self.streams;
        if purchases < 0.0 || ads < 0.0 || ((purchases + ads) - 1.0).abs() > 1e-9 {
            return bad("generator.streams", "stream shares must be non-negative and sum to 1");
        }
        Ok(())
    }

    fn instance_seed(&self, instance: usize) -> u64 {
        mix64(self.seed, instance as u64)
    }

    /// The payload of event `seq` of `instance`, with a zero event-time.
    pub fn make_event(&self, instance: usize, seq: u64) -> Event {
        let seed = self.instance_seed(instance);
        let user_id = draw_key(seq, &self.key_dist, seed ^ USER_KEY_SALT);
        let gem_pack_id = draw_key(seq, &self.key_dist, seed ^ GEM_KEY_SALT);
        let mut rng = seeded_rng(seed ^ PAYLOAD_SALT, seq);
        let stream = if rng.random::<f64>() < self.streams.purchases { Stream::Purchases } else { Stream::Ads };
        let price = match stream {
            Stream::Purchases => Price::from_cents(rng.random_range(self.price.min_cents..=self.price.max_cents)),
            Stream::Ads => Price::ZERO,
        };
        Event { stream, user_id, gem_pack_id, price, event_time: Default::default(), ingest_time: None, seq }
    }

    /// This instance's share of `total_events`.
    fn instance_limit(&self, instance: usize) -> Option<u64> {
        self.total_events.map(|total| {
            let n = self.instances as u64;
            total / n + u64::from((instance as u64) < total % n)
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GenerationReport {
    pub events_emitted: u64,
    pub wall_time: Duration,
    /// Worst delay between an event's scheduled instant and its emission.
    pub max_pacing_error: Duration,
    pub cancelled: bool,
}

impl GenerationReport {
    fn merge(&mut self, other: &GenerationReport) {
        self.events_emitted += other.events_emitted;
        self.wall_time = self.wall_time.max(other.wall_time);
        self.max_pacing_error = self.max_pacing_error.max(other.max_pacing_error);
        self.cancelled |= other.cancelled;
    }
}

/// Runs one generator instance to completion on the calling thread.
///
/// `schedule` is this instance's own rate. The queue is closed when the
/// schedule (or the instance's event limit) is exhausted, or on cancellation.
pub fn generate(
    config: &GeneratorConfig,
    instance: usize,
    schedule: &RateSchedule,
    out: &QueueHandle,
    clock: &Clock,
    start: Instant,
    cancel: &CancelToken,
) -> Result<GenerationReport, GeneratorError> {
    let mut bucket = TokenBucket::new(schedule.clone(), start);
    if let Some(limit) = config.instance_limit(instance) {
        bucket = bucket.with_limit(limit);
    }
    let mut seq = 0u64;
    let mut batch = Vec::with_capacity(MAX_BATCH as usize);
    let cancelled = loop {
        match bucket.acquire(MAX_BATCH, cancel) {
            Acquire::Granted(n) => {
                batch.clear();
                for _ in 0..n {
                    let mut e = config.make_event(instance, seq);
                    e.event_time = match config.event_time {
                        EventTimeStamp::Emission => clock.now(),
                        EventTimeStamp::Scheduled => {
                            let due = schedule.time_of((seq + 1) as f64).unwrap_or_else(|| schedule.total_duration());
                            clock.timestamp_of(start + due)
                        }
                    };
                    batch.push(e);
                    seq += 1;
                }
                if let Err(source) = out.offer_batch(batch.drain(..)) {
                    return Err(GeneratorError::Queue { instance, source });
                }
            }
            Acquire::Exhausted => break false,
            Acquire::Cancelled => break true,
        }
    };
    out.close();
    Ok(GenerationReport {
        events_emitted: seq,
        wall_time: start.elapsed(),
        max_pacing_error: bucket.max_lateness(),
        cancelled,
    })
}

/// All instances of one run, each on its own thread.
pub struct Generator {
    handles: Vec<JoinHandle<Result<GenerationReport, GeneratorError>>>,
    cancel: CancelToken,
}

impl Generator {
    /// `schedule` is the aggregate offered load; each of the `queues` gets
    /// an equal share.
    pub fn spawn(
        config: &GeneratorConfig,
        schedule: &RateSchedule,
        queues: &[QueueHandle],
        clock: &Clock,
        start: Instant,
    ) -> Generator {
        let cancel = CancelToken::new();
        let per_instance = schedule.scaled(1.0 / queues.len() as f64);
        let handles = queues
            .iter()
            .enumerate()
            .map(|(instance, queue)| {
                let (config, schedule, queue, clock, cancel) =
                    (config.clone(), per_instance.clone(), queue.clone(), clock.clone(), cancel.clone());
                thread::Builder::new()
                    .name(format!("generator-{instance}"))
                    .spawn(move || generate(&config, instance, &schedule, &queue, &clock, start, &cancel))
                    .expect("spawn generator thread")
            })
            .collect();
        Generator { handles, cancel }
    }

    pub fn cancel(&self) {
        self.cancel.cancel();
    }

    pub fn is_finished(&self) -> bool {
        self.handles.iter().all(JoinHandle::is_finished)
    }

    /// Joins all instances. The first error wins.
    pub fn join(self) -> Result<GenerationReport, GeneratorError> {
        let mut report = GenerationReport::default();
        let mut first_err = None;
        for (instance, h) in self.handles.into_iter().enumerate() {
            match h.join() {
                Ok(Ok(r)) => report.merge(&r),
                Ok(Err(e)) => {
                    first_err.get_or_insert(e);
                }
                Err(_) => {
                    first_err.get_or_insert(GeneratorError::Panicked { instance });
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(report),
        }
    }
}

/// Generator-only throughput into a null sink, events per second over all
/// instances.
pub fn calibrate(config: &GeneratorConfig, duration: Duration) -> f64 {
    let clock = Clock::system();
    let start = Instant::now();
    let deadline = start + duration;
    let handles: Vec<_> = (0..config.instances)
        .map(|instance| {
            let config = config.clone();
            let clock = clock.clone();
            thread::spawn(move || {
                let mut seq = 0u64;
                loop {
                    for _ in 0..1024 {
                        let mut e = config.make_event(instance, seq);
                        e.event_time = clock.now();
                        black_box(e);
                        seq += 1;
                    }
                    if Instant::now() >= deadline {
                        return seq;
                    }
                }
            })
        })
        .collect();
    let total: u64 = handles.into_iter().map(|h| h.join().unwrap_or(0)).sum();
    total as f64 / start.elapsed().as_secs_f64()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queue::{QueueError, QueueLimits};

    fn drain(q: &QueueHandle) -> Vec<Event> {
        let mut all = Vec::new();
        loop {
            match q.take_batch(usize::MAX) {
                Ok(b) => all.extend(b),
                Err(QueueError::Closed) => return all,
                Err(e) => panic!("{e}"),
            }
        }
    }

    #[test]
    fn payloads_are_pure() {
        let c = GeneratorConfig { streams: StreamMix::HALF_AND_HALF, ..Default::default() };
        for seq in [0, 1, 1000] {
            assert_eq!(c.make_event(1, seq), c.make_event(1, seq));
        }
        assert_ne!(c.make_event(0, 5).payload(), c.make_event(1, 5).payload());
        let e = (0..100).map(|s| c.make_event(0, s));
        for e in e {
            match e.stream {
                Stream::Ads => assert_eq!(e.price, Price::ZERO),
                Stream::Purchases => assert!((100..=10_000).contains(&e.price.cents())),
            }
        }
    }

    #[test]
    fn stream_mix_is_respected() {
        let c = GeneratorConfig { streams: StreamMix::HALF_AND_HALF, ..Default::default() };
        let ads = (0..10_000).filter(|&s| c.make_event(0, s).stream == Stream::Ads).count();
        assert!((4_700..5_300).contains(&ads), "{ads}");
    }

    #[test]
    fn validation_names_the_field() {
        let c = GeneratorConfig { streams: StreamMix { purchases: 0.7, ads: 0.7 }, ..Default::default() };
        assert!(c.validate().unwrap_err().to_string().starts_with("generator.streams"));
        let c = GeneratorConfig { instances: 0, ..Default::default() };
        assert!(c.validate().unwrap_err().to_string().starts_with("generator.instances"));
    }

    #[test]
    fn total_events_limit_splits_across_instances() {
        let c = GeneratorConfig { instances: 3, total_events: Some(10), ..Default::default() };
        let parts: Vec<u64> = (0..3).map(|i| c.instance_limit(i).unwrap()).collect();
        assert_eq!(parts, vec![4, 3, 3]);
    }

    #[test]
    fn short_run_emits_exact_count_in_order() {
        let c = GeneratorConfig { instances: 1, ..Default::default() };
        let q = QueueHandle::new(0, QueueLimits::default());
        let clock = Clock::system();
        let schedule = RateSchedule::constant(20_000.0, Duration::from_millis(200));
        let r = generate(&c, 0, &schedule, &q, &clock, Instant::now(), &CancelToken::new()).unwrap();
        assert_eq!(r.events_emitted, 4000);
        let events = drain(&q);
        assert_eq!(events.len(), 4000);
        for (i, w) in events.windows(2).enumerate() {
            assert_eq!(w[0].seq, i as u64);
            assert!(w[1].event_time >= w[0].event_time);
        }
    }

    #[test]
    fn dropped_queue_stops_the_instance() {
        let c = GeneratorConfig { instances: 1, ..Default::default() };
        let q = QueueHandle::new(0, QueueLimits::default());
        q.mark_dropped();
        let schedule = RateSchedule::constant(1000.0, Duration::from_secs(1));
        let err = generate(&c, 0, &schedule, &q, &Clock::system(), Instant::now(), &CancelToken::new()).unwrap_err();
        assert_eq!(err.queue_error(), Some(&QueueError::Dropped));
    }

    #[test]
    fn cancellation_is_observed_quickly() {
        let c = GeneratorConfig { instances: 1, ..Default::default() };
        let q = QueueHandle::new(0, QueueLimits::default());
        let start = Instant::now();
        let g = Generator::spawn(&c, &RateSchedule::constant(10.0, Duration::from_secs(60)), &[q.clone()], &Clock::system(), start);
        thread::sleep(Duration::from_millis(50));
        let t = Instant::now();
        g.cancel();
        let r = g.join().unwrap();
        assert!(t.elapsed() < Duration::from_millis(25), "{:?}", t.elapsed());
        assert!(r.cancelled);
        assert_eq!(q.state(), crate::queue::QueueState::Closed);
    }
}
