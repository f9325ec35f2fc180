//! Latency accounting, done entirely on the driver side.
//!
//! For every output record the driver computes
//!
//! * event-time latency: `emission_time - max_event_time`, which includes the
//!   time events spent waiting in the driver queues, and
//! * processing-time latency: `emission_time - max_ingest_time`, which does
//!   not.
//!
//! Samples are bucketed by the second of the run in which they were emitted,
//! so warmup can be cut by run time and per-second series can be plotted.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::OutputRecord;

pub const BUCKET_NANOS: u64 = 1_000_000;
/// Latencies above this land in the overflow bucket.
pub const TRACKED_RANGE_NANOS: u64 = 300_000_000_000;
const TRACKED_BUCKETS: usize = (TRACKED_RANGE_NANOS / BUCKET_NANOS) as usize;
const NANOS_PER_SEC: u64 = 1_000_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("output record has no emission time")]
    MissingEmissionTime,
    #[error("negative latency: emission precedes the record's {which} timestamp by {nanos} ns")]
    NegativeLatency { which: &'static str, nanos: u64 },
    #[error("no samples left after excluding warmup")]
    EmptyAfterWarmup,
    #[error("warmup fraction {0} is outside [0, 1)")]
    InvalidWarmup(f64),
    #[error("need at least {needed} seconds of series, have {have}")]
    InsufficientData { needed: u32, have: u32 },
}

/// Fixed-width latency histogram with 1 ms buckets.
///
/// Bucket `k` covers `[k - 0.5, k + 0.5)` ms, so its midpoint is exactly `k`
/// ms and a bucketed quantile is within half a bucket of the exact one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    counts: Vec<u64>,
    overflow: u64,
    n: u64,
    sum: u128,
    sum_sq: u128,
    min: u64,
    max: u64,
}

impl Histogram {
    pub fn new() -> Self {
        Self::default()
    }

    fn bucket_of(nanos: u64) -> usize {
        ((nanos + BUCKET_NANOS / 2) / BUCKET_NANOS) as usize
    }

    pub fn record(&mut self, nanos: u64) {
        let b = Self::bucket_of(nanos);
        if b >= TRACKED_BUCKETS {
            self.overflow += 1;
        } else {
            if b >= self.counts.len() {
                self.counts.resize(b + 1, 0);
            }
            self.counts[b] += 1;
        }
        if self.n == 0 || nanos < self.min {
            self.min = nanos;
        }
        self.max = self.max.max(nanos);
        self.n += 1;
        self.sum += nanos as u128;
        self.sum_sq += (nanos as u128) * (nanos as u128);
    }

    pub fn merge(&mut self, other: &Histogram) {
        if other.n == 0 {
            return;
        }
        if other.counts.len() > self.counts.len() {
            self.counts.resize(other.counts.len(), 0);
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.min = if self.n == 0 { other.min } else { self.min.min(other.min) };
        self.max = self.max.max(other.max);
        self.overflow += other.overflow;
        self.n += other.n;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn overflow(&self) -> u64 {
        self.overflow
    }

    pub fn min(&self) -> Option<u64> {
        (self.n > 0).then_some(self.min)
    }

    pub fn max(&self) -> Option<u64> {
        (self.n > 0).then_some(self.max)
    }

    pub fn mean(&self) -> Option<u64> {
        (self.n > 0).then(|| (self.sum / self.n as u128) as u64)
    }

    pub fn stddev(&self) -> Option<u64> {
        if self.n == 0 {
            return None;
        }
        let n = self.n as f64;
        let mean = self.sum as f64 / n;
        let var = (self.sum_sq as f64 / n - mean * mean).max(0.0);
        Some(var.sqrt().round() as u64)
    }

    /// Nearest-rank quantile over bucket midpoints, clamped to the observed
    /// extremes.
    pub fn quantile(&self, q: f64) -> Option<u64> {
        if self.n == 0 {
            return None;
        }
        let rank = ((q * self.n as f64).ceil() as u64).clamp(1, self.n);
        let mut seen = 0;
        for (k, &c) in self.counts.iter().enumerate() {
            seen += c;
            if seen >= rank {
                return Some((k as u64 * BUCKET_NANOS).clamp(self.min, self.max));
            }
        }
        Some(self.max)
    }

    pub fn summary(&self) -> Option<MetricsSummary> {
        Some(MetricsSummary {
            n: self.n,
            avg: self.mean()?,
            min: self.min()?,
            max: self.max()?,
            stddev: self.stddev()?,
            p50: self.quantile(0.50)?,
            q90: self.quantile(0.90)?,
            q95: self.quantile(0.95)?,
            q99: self.quantile(0.99)?,
        })
    }
}

/// Aggregate latency statistics, all in nanoseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub n: u64,
    pub avg: u64,
    pub min: u64,
    pub max: u64,
    pub stddev: u64,
    pub p50: u64,
    pub q90: u64,
    pub q95: u64,
    pub q99: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    EventTime,
    ProcessingTime,
}

impl Metric {
    pub fn label(self) -> &'static str {
        match self {
            Metric::EventTime => "event",
            Metric::ProcessingTime => "proc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySample {
    pub event_latency: u64,
    pub proc_latency: u64,
    /// Second of the run in which the record was emitted.
    pub bucket: u32,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
struct SecondBucket {
    event: Histogram,
    proc: Histogram,
}

/// Per-run latency store: one pair of histograms per second of the run.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct LatencyRecorder {
    seconds: Vec<SecondBucket>,
    recorded: u64,
    anomalies: u64,
    run_seconds: Option<f64>,
    raw: Option<Vec<LatencySample>>,
}

impl LatencyRecorder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Scheduled run length; warmup is a fraction of this. Without it the
    /// span of observed buckets is used.
    pub fn with_run_length(mut self, secs: f64) -> Self {
        self.run_seconds = Some(secs);
        self
    }

    pub fn keep_raw_samples(mut self) -> Self {
        self.raw = Some(Vec::new());
        self
    }

    pub fn raw_samples(&self) -> Option<&[LatencySample]> {
        self.raw.as_deref()
    }

    /// Records one output whose emission time has been stamped.
    pub fn record(&mut self, rec: &OutputRecord) -> Result<LatencySample, MetricsError> {
        self.recorded += 1;
        let result = Self::sample_of(rec);
        match &result {
            Ok(sample) => {
                let b = sample.bucket as usize;
                if b >= self.seconds.len() {
                    self.seconds.resize_with(b + 1, SecondBucket::default);
                }
                self.seconds[b].event.record(sample.event_latency);
                self.seconds[b].proc.record(sample.proc_latency);
                if let Some(raw) = &mut self.raw {
                    raw.push(*sample);
                }
            }
            Err(_) => self.anomalies += 1,
        }
        result
    }

    fn sample_of(rec: &OutputRecord) -> Result<LatencySample, MetricsError> {
        let emitted = rec.emission_time.ok_or(MetricsError::MissingEmissionTime)?;
        let event = emitted.nanos_since(rec.max_event_time);
        let proc = emitted.nanos_since(rec.max_ingest_time);
        if event < 0 {
            return Err(MetricsError::NegativeLatency { which: "event", nanos: event.unsigned_abs() });
        }
        if proc < 0 {
            return Err(MetricsError::NegativeLatency { which: "ingest", nanos: proc.unsigned_abs() });
        }
        if proc > event {
            // Ingestion cannot precede generation on a shared clock.
            return Err(MetricsError::NegativeLatency { which: "ingest-vs-event", nanos: (proc - event) as u64 });
        }
        Ok(LatencySample {
            event_latency: event as u64,
            proc_latency: proc as u64,
            bucket: (emitted.as_nanos() / NANOS_PER_SEC) as u32,
        })
    }

    pub fn merge(&mut self, other: &LatencyRecorder) {
        if other.seconds.len() > self.seconds.len() {
            self.seconds.resize_with(other.seconds.len(), SecondBucket::default);
        }
        for (a, b) in self.seconds.iter_mut().zip(&other.seconds) {
            a.event.merge(&b.event);
            a.proc.merge(&b.proc);
        }
        self.recorded += other.recorded;
        self.anomalies += other.anomalies;
        if let (Some(a), Some(b)) = (&mut self.raw, &other.raw) {
            a.extend_from_slice(b);
        }
    }

    pub fn recorded(&self) -> u64 {
        self.recorded
    }

    pub fn anomalies(&self) -> u64 {
        self.anomalies
    }

    pub fn seconds(&self) -> u32 {
        self.seconds.len() as u32
    }

    fn run_seconds(&self) -> f64 {
        self.run_seconds.unwrap_or(self.seconds.len() as f64)
    }

    /// First bucket that survives a warmup cut of `warmup_fraction`.
    pub fn warmup_cutoff(&self, warmup_fraction: f64) -> Result<u32, MetricsError> {
        if !(0.0..1.0).contains(&warmup_fraction) {
            return Err(MetricsError::InvalidWarmup(warmup_fraction));
        }
        Ok((warmup_fraction * self.run_seconds()).ceil() as u32)
    }

    /// Merged histogram of all buckets from `cutoff` on.
    pub fn histogram_from(&self, metric: Metric, cutoff: u32) -> Histogram {
        let mut h = Histogram::new();
        for s in self.seconds.iter().skip(cutoff as usize) {
            h.merge(match metric {
                Metric::EventTime => &s.event,
                Metric::ProcessingTime => &s.proc,
            });
        }
        h
    }

    pub fn summarize(&self, metric: Metric, warmup_fraction: f64) -> Result<MetricsSummary, MetricsError> {
        let cutoff = self.warmup_cutoff(warmup_fraction)?;
        self.histogram_from(metric, cutoff).summary().ok_or(MetricsError::EmptyAfterWarmup)
    }

    /// Per-second statistics for both metrics, seconds without output omitted.
    pub fn time_series(&self) -> LatencySeries {
        let mut points = Vec::new();
        for (second, bucket) in self.seconds.iter().enumerate() {
            for (metric, h) in [(Metric::EventTime, &bucket.event), (Metric::ProcessingTime, &bucket.proc)] {
                if let Some(summary) = h.summary() {
                    points.push(SeriesPoint { second: second as u32, metric, summary });
                }
            }
        }
        LatencySeries { points }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub second: u32,
    pub metric: Metric,
    pub summary: MetricsSummary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LatencySeries {
    pub points: Vec<SeriesPoint>,
}

fn secs(nanos: u64) -> f64 {
    nanos as f64 / NANOS_PER_SEC as f64
}

impl LatencySeries {
    pub fn metric(&self, metric: Metric) -> impl Iterator<Item = &SeriesPoint> {
        self.points.iter().filter(move |p| p.metric == metric)
    }

    /// `second,metric,p50,p90,p95,p99,avg,min,max`, latencies in seconds.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("second,metric,p50,p90,p95,p99,avg,min,max\n");
        for p in &self.points {
            let s = &p.summary;
            let _ = writeln!(
                out,
                "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                p.second,
                p.metric.label(),
                secs(s.p50),
                secs(s.q90),
                secs(s.q95),
                secs(s.q99),
                secs(s.avg),
                secs(s.min),
                secs(s.max)
            );
        }
        out
    }
}

/// Least-squares slope of `y` over `x`. Exact zero for constant `y`.
pub fn least_squares_slope(points: &[(i64, i128)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as i128;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0i128, 0i128, 0i128, 0i128);
    for &(x, y) in points {
        let x = x as i128;
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let den = n * sxx - sx * sx;
    if den == 0 {
        return None;
    }
    Some((n * sxy - sx * sy) as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    /// Growth of the per-second median event-time latency, seconds per second.
    pub event_slope: f64,
    pub proc_slope: f64,
}

pub const MIN_DIVERGENCE_SPAN: u32 = 30;

/// Slopes of per-second median latencies. A growing event-time latency next
/// to a flat processing-time latency is the signature of queueing that an
/// SUT-internal measurement would miss.
pub fn divergence_report(series: &LatencySeries) -> Result<DivergenceReport, MetricsError> {
    let medians = |metric| -> Vec<(i64, i128)> {
        series.metric(metric).map(|p| (p.second as i64, p.summary.p50 as i128)).collect()
    };
    let event = medians(Metric::EventTime);
    let proc = medians(Metric::ProcessingTime);
    let span = match (event.first(), event.last()) {
        (Some(a), Some(b)) => (b.0 - a.0 + 1) as u32,
        _ => 0,
    };
    let insufficient = MetricsError::InsufficientData { needed: MIN_DIVERGENCE_SPAN, have: span };
    if span < MIN_DIVERGENCE_SPAN {
        return Err(insufficient);
    }
    let slope = |pts: &[(i64, i128)]| least_squares_slope(pts).map(|s| s / NANOS_PER_SEC as f64);
    Ok(DivergenceReport {
        event_slope: slope(&event).ok_or(insufficient.clone())?,
        proc_slope: slope(&proc).ok_or(insufficient)?,
    })
}
