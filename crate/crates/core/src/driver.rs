//! Experiment orchestration: single runs, sustainability verdicts, the
//! sustainable-throughput search and the standard suite.
//!
//! A run is sustainable when the driver queues stop growing. Over the tail
//! of the run (the last half by default) the least-squares slope of the
//! total queue depth must stay within 1% of the offered rate per second and
//! the deepest sample within five seconds' worth of events. Transient
//! backlog early in a run is tolerated.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{self, AdapterError, DriverSink, OutputRecord, ShutdownMode, SutDescriptor, SutReport};
use crate::clock::Clock;
use crate::generator::{self, GenerationReport, GeneratorConfig, GeneratorError};
use crate::metrics::{least_squares_slope, LatencyRecorder, Metric, MetricsError, MetricsSummary};
use crate::model::{KeyDistribution, ModelError};
use crate::pacing::RateSchedule;
use crate::queue::{QueueError, QueueHandle, QueueLimits, QueueTelemetry, TelemetrySampler};

const MONITOR_TICK: Duration = Duration::from_millis(10);
/// Head start between connecting the SUT and the first generated event.
const LEAD_IN: Duration = Duration::from_millis(50);
const EVIDENCE_SAMPLES: usize = 10;

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Invalid(#[from] ModelError),
    #[error("generator-bound: {requested:.0} events/s requested, generator sustains {capacity:.0} events/s")]
    GeneratorBound { requested: f64, capacity: f64 },
    #[error("run of {duration:?} is shorter than the policy minimum of {min:?}")]
    RunTooShort { duration: Duration, min: Duration },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error("SUT dropped its connection during the run at {rate:.0} events/s")]
    ConnectionDrop { rate: f64 },
    #[error("no probed rate was sustainable")]
    NothingSustainable { probes: Vec<Probe> },
    #[error("non-monotone SUT: sustained {} events/s but not {} events/s", higher.rate, lower.rate)]
    NonMonotoneSut { lower: Probe, higher: Probe },
    #[error("generator failed: {0}")]
    Generator(String),
}

impl DriverError {
    /// Failures of the SUT or its connection, as opposed to bad input.
    pub fn is_runtime(&self) -> bool {
        !matches!(self, DriverError::Invalid(_) | DriverError::RunTooShort { .. })
    }
}

fn default_depth_cap_seconds() -> f64 {
    5.0
}

fn default_slope_fraction() -> f64 {
    0.01
}

fn default_observation_fraction() -> f64 {
    0.5
}

fn default_min_run() -> Duration {
    Duration::from_secs(30)
}

/// Thresholds relative to the offered rate, so that one policy serves every
/// scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SustainabilityPolicy {
    /// Maximum tail queue depth, in seconds of offered load.
    #[serde(default = "default_depth_cap_seconds")]
    pub depth_cap_seconds: f64,
    /// Maximum tail growth of the queue depth per second, as a fraction of
    /// the offered rate.
    #[serde(default = "default_slope_fraction")]
    pub slope_fraction: f64,
    /// Trailing fraction of the run that is judged.
    #[serde(default = "default_observation_fraction")]
    pub observation_fraction: f64,
    #[serde(with = "crate::durations", default = "default_min_run")]
    pub min_run: Duration,
}

impl Default for SustainabilityPolicy {
    fn default() -> Self {
        SustainabilityPolicy {
            depth_cap_seconds: default_depth_cap_seconds(),
            slope_fraction: default_slope_fraction(),
            observation_fraction: default_observation_fraction(),
            min_run: default_min_run(),
        }
    }
}

impl SustainabilityPolicy {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field, message: &str| Err(ModelError::Invalid { field, message: message.to_string() });
        if !(self.depth_cap_seconds > 0.0) {
            return bad("policy.depth_cap_seconds", "must be positive");
        }
        if !(self.slope_fraction > 0.0) {
            return bad("policy.slope_fraction", "must be positive");
        }
        if !(self.observation_fraction > 0.0 && self.observation_fraction <= 1.0) {
            return bad("policy.observation_fraction", "must be in (0, 1]");
        }
        if self.min_run.is_zero() {
            return bad("policy.min_run", "must be positive");
        }
        Ok(())
    }

    /// Absolute thresholds at `rate`: `(max depth, max slope per second)`.
    pub fn resolve(&self, rate: f64) -> (f64, f64) {
        (self.depth_cap_seconds * rate, self.slope_fraction * rate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerdictReason {
    Ok,
    QueueGrowth,
    DepthCap,
    ConnectionDrop,
    GeneratorBound,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    /// First telemetry second included in the judged tail.
    pub tail_from: u32,
    /// Least-squares slope of total depth over the tail, events per second.
    pub tail_slope: f64,
    pub tail_max_depth: u64,
    pub max_depth: f64,
    pub max_slope: f64,
    /// Last few `(second, depth)` samples.
    pub excerpt: Vec<(u32, u64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub sustainable: bool,
    pub reason: VerdictReason,
    pub evidence: Evidence,
}

impl Verdict {
    fn failed(reason: VerdictReason, note: impl Into<String>) -> Verdict {
        Verdict { sustainable: false, reason, evidence: Evidence { note: Some(note.into()), ..Default::default() } }
    }
}

/// Applies `policy` to the queue telemetry of a run offered at `rate`.
pub fn judge(telemetry: &QueueTelemetry, rate: f64, policy: &SustainabilityPolicy) -> Verdict {
    let samples = &telemetry.samples;
    let (max_depth, max_slope) = policy.resolve(rate);
    let n = samples.len();
    let tail_len = ((n as f64 * policy.observation_fraction).ceil() as usize).clamp(n.min(2), n);
    let tail = &samples[n - tail_len..];
    let points: Vec<(i64, i128)> = tail.iter().map(|s| (s.second as i64, s.depth as i128)).collect();
    let mut evidence = Evidence {
        tail_from: tail.first().map_or(0, |s| s.second),
        tail_slope: least_squares_slope(&points).unwrap_or(0.0),
        tail_max_depth: tail.iter().map(|s| s.depth).max().unwrap_or(0),
        max_depth,
        max_slope,
        excerpt: tail.iter().rev().take(EVIDENCE_SAMPLES).rev().map(|s| (s.second, s.depth)).collect(),
        note: None,
    };
    if tail.len() < 2 {
        evidence.note = Some("too few telemetry samples to judge".into());
        return Verdict { sustainable: false, reason: VerdictReason::QueueGrowth, evidence };
    }
    let reason = if evidence.tail_slope > max_slope {
        VerdictReason::QueueGrowth
    } else if evidence.tail_max_depth as f64 > max_depth {
        VerdictReason::DepthCap
    } else {
        VerdictReason::Ok
    };
    Verdict { sustainable: reason == VerdictReason::Ok, reason, evidence }
}

/// One run to execute.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub label: String,
    pub schedule: RateSchedule,
    /// Let the SUT consume every queued event before stopping it.
    pub drain: bool,
    /// Keep every output record (for oracle checks).
    pub capture_outputs: bool,
    pub keep_raw_samples: bool,
}

impl RunSpec {
    pub fn new(label: impl Into<String>, schedule: RateSchedule) -> Self {
        RunSpec { label: label.into(), schedule, drain: false, capture_outputs: false, keep_raw_samples: false }
    }

    pub fn constant(label: impl Into<String>, rate: f64, duration: Duration) -> Self {
        Self::new(label, RateSchedule::constant(rate, duration))
    }

    pub fn drained(mut self) -> Self {
        self.drain = true;
        self
    }

    pub fn capturing(mut self) -> Self {
        self.capture_outputs = true;
        self
    }

    pub fn mean_rate(&self) -> f64 {
        self.schedule.total_events() as f64 / self.schedule.total_duration().as_secs_f64()
    }
}

/// Everything observed in one run.
#[derive(Debug)]
pub struct RunOutcome {
    pub label: String,
    pub schedule: RateSchedule,
    pub verdict: Verdict,
    /// False when the run was halted by a connection drop; such runs carry
    /// no latency numbers.
    pub valid: bool,
    pub generation: GenerationReport,
    pub sut: Option<SutReport>,
    pub telemetry: QueueTelemetry,
    pub latency: LatencyRecorder,
    pub event_latency: Option<MetricsSummary>,
    pub proc_latency: Option<MetricsSummary>,
    pub outputs: Option<Vec<OutputRecord>>,
}

impl RunOutcome {
    pub fn mean_rate(&self) -> f64 {
        self.schedule.total_events() as f64 / self.schedule.total_duration().as_secs_f64()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub rate: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MstResult {
    pub mst: f64,
    pub probes: Vec<Probe>,
    /// The upper bound itself was sustainable.
    pub ceiling_reached: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchPlan {
    pub lo: f64,
    pub hi: f64,
    pub tol: f64,
    #[serde(with = "crate::durations")]
    pub probe_duration: Duration,
    pub max_probes: usize,
}

impl SearchPlan {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |field, message: &str| Err(ModelError::Invalid { field, message: message.to_string() });
        if !(self.lo >= 0.0 && self.hi > self.lo) {
            return bad("search.hi", "need 0 <= lo < hi");
        }
        if !(self.tol > 0.0 && self.tol < 1.0) {
            return bad("search.tol", "tolerance must be in (0, 1)");
        }
        if self.max_probes == 0 {
            return bad("search.max_probes", "must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Driver {
    sut: SutDescriptor,
    generator: GeneratorConfig,
    policy: SustainabilityPolicy,
    warmup_fraction: f64,
    queue_limits: QueueLimits,
    generator_capacity: Option<f64>,
    calibration: Duration,
    drain_timeout: Duration,
}

impl Driver {
    pub fn new(sut: SutDescriptor, generator: GeneratorConfig) -> Self {
        Driver {
            sut,
            generator,
            policy: SustainabilityPolicy::default(),
            warmup_fraction: 0.25,
            queue_limits: QueueLimits::default(),
            generator_capacity: None,
            calibration: Duration::from_secs(5),
            drain_timeout: Duration::from_secs(120),
        }
    }

    pub fn with_policy(mut self, policy: SustainabilityPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_warmup(mut self, fraction: f64) -> Self {
        self.warmup_fraction = fraction;
        self
    }

    pub fn with_queue_limits(mut self, limits: QueueLimits) -> Self {
        self.queue_limits = limits;
        self
    }

    pub fn with_calibration(mut self, duration: Duration) -> Self {
        self.calibration = duration;
        self
    }

    /// Skips calibration and trusts `rate` as the generator's capacity.
    pub fn assume_generator_capacity(mut self, rate: f64) -> Self {
        self.generator_capacity = Some(rate);
        self
    }

    pub fn with_generator(mut self, generator: GeneratorConfig) -> Self {
        self.generator = generator;
        self.generator_capacity = None;
        self
    }

    pub fn generator(&self) -> &GeneratorConfig {
        &self.generator
    }

    pub fn policy(&self) -> &SustainabilityPolicy {
        &self.policy
    }

    /// Generator-only throughput, measured once and cached.
    pub fn generator_capacity(&mut self) -> f64 {
        *self.generator_capacity.get_or_insert_with(|| {
            let rate = generator::calibrate(&self.generator, self.calibration);
            log::info!("generator calibrated at {rate:.0} events/s");
            rate
        })
    }

    fn check_generator(&mut self, rate: f64) -> Result<(), DriverError> {
        let capacity = self.generator_capacity();
        if rate > capacity {
            return Err(DriverError::GeneratorBound { requested: rate, capacity });
        }
        Ok(())
    }

    /// Executes one run and judges it. Connection drops are reported in the
    /// outcome, not as an error.
    pub fn execute(&mut self, spec: &RunSpec) -> Result<RunOutcome, DriverError> {
        self.generator.validate()?;
        spec.schedule.validate()?;
        self.check_generator(spec.schedule.max_rate())?;

        let start = Instant::now() + LEAD_IN;
        let clock = Clock::starting_at(start);
        let queues: Vec<QueueHandle> =
            (0..self.generator.instances).map(|i| QueueHandle::new(i, self.queue_limits)).collect();
        let (sink, rx) = DriverSink::new(clock.clone());
        let duration = spec.schedule.total_duration();
        let mut recorder = LatencyRecorder::new().with_run_length(duration.as_secs_f64());
        if spec.keep_raw_samples {
            recorder = recorder.keep_raw_samples();
        }
        let stop_collecting = Arc::new(AtomicBool::new(false));
        let collector = {
            let stop = Arc::clone(&stop_collecting);
            let capture = spec.capture_outputs;
            thread::Builder::new()
                .name("driver-sink".into())
                .spawn(move || {
                    let mut outputs = capture.then(Vec::new);
                    let mut take = |rec: OutputRecord| {
                        if let Err(e) = recorder.record(&rec) {
                            log::debug!("latency anomaly: {e}");
                        }
                        if let Some(out) = &mut outputs {
                            out.push(rec);
                        }
                    };
                    loop {
                        match rx.recv_timeout(Duration::from_millis(20)) {
                            Ok(rec) => take(rec),
                            Err(crossbeam_channel::RecvTimeoutError::Disconnected) => break,
                            Err(crossbeam_channel::RecvTimeoutError::Timeout) => {
                                if stop.load(Ordering::Acquire) {
                                    rx.try_iter().for_each(&mut take);
                                    break;
                                }
                            }
                        }
                    }
                    (recorder, outputs)
                })
                .expect("spawn sink collector")
        };

        let mut session = adapter::connect(&self.sut, &queues, &clock, sink)?;
        let sampler = TelemetrySampler::start(queues.clone(), start);
        let generators = generator::Generator::spawn(&self.generator, &spec.schedule, &queues, &clock, start);

        let mut dropped = false;
        while !generators.is_finished() {
            if session.is_dropped() {
                dropped = true;
                generators.cancel();
                break;
            }
            thread::sleep(MONITOR_TICK);
        }
        let generated = generators.join();
        let telemetry = sampler.finish();
        dropped |= session.is_dropped();

        let mut hard_cap = None;
        let generation = match generated {
            Ok(report) => report,
            Err(GeneratorError::Queue { source: QueueError::Dropped, .. }) => {
                dropped = true;
                GenerationReport::default()
            }
            Err(GeneratorError::Queue { source: QueueError::DepthCap { depth }, .. }) => {
                hard_cap = Some(depth);
                queues.iter().for_each(QueueHandle::close);
                GenerationReport::default()
            }
            Err(e) => return Err(DriverError::Generator(e.to_string())),
        };

        let mode = if spec.drain && !dropped && hard_cap.is_none() { ShutdownMode::Drain } else { ShutdownMode::Cancel };
        let sut = match session.shutdown(mode, self.drain_timeout) {
            Ok(report) => Some(report),
            Err(AdapterError::ConnectionDropped) => {
                dropped = true;
                None
            }
            Err(e) => {
                log::warn!("SUT shutdown: {e}");
                None
            }
        };
        drop(session);
        stop_collecting.store(true, Ordering::Release);
        let (latency, outputs) = collector.join().map_err(|_| DriverError::Generator("sink collector panicked".into()))?;

        let rate = spec.mean_rate();
        let verdict = if dropped {
            Verdict::failed(VerdictReason::ConnectionDrop, "SUT dropped its connection to the driver queues")
        } else if let Some(depth) = hard_cap {
            Verdict::failed(VerdictReason::DepthCap, format!("queue hit the hard cap at depth {depth}"))
        } else {
            judge(&telemetry, rate, &self.policy)
        };
        let summary = |metric| match latency.summarize(metric, self.warmup_fraction) {
            Ok(s) => Some(s),
            Err(MetricsError::EmptyAfterWarmup) => None,
            Err(e) => {
                log::warn!("{}: {e}", spec.label);
                None
            }
        };
        let (event_latency, proc_latency) =
            if dropped { (None, None) } else { (summary(Metric::EventTime), summary(Metric::ProcessingTime)) };
        log::info!(
            "{}: {:.0} events/s, verdict {:?}, event p50 {:?}",
            spec.label,
            rate,
            verdict.reason,
            event_latency.map(|s| Duration::from_nanos(s.p50))
        );
        Ok(RunOutcome {
            label: spec.label.clone(),
            schedule: spec.schedule.clone(),
            verdict,
            valid: !dropped,
            generation,
            sut,
            telemetry,
            latency,
            event_latency,
            proc_latency,
            outputs,
        })
    }

    /// One constant-rate run judged for sustainability.
    pub fn probe(&mut self, rate: f64, duration: Duration) -> Result<Verdict, DriverError> {
        if duration < self.policy.min_run {
            return Err(DriverError::RunTooShort { duration, min: self.policy.min_run });
        }
        let outcome = self.execute(&RunSpec::constant(format!("probe@{rate:.0}"), rate, duration))?;
        Ok(outcome.verdict)
    }

    /// Binary search for the highest sustainable rate in `[lo, hi]`.
    pub fn find_mst(&mut self, plan: &SearchPlan) -> Result<MstResult, DriverError> {
        plan.validate()?;
        self.check_generator(plan.hi)?;
        let mut probes: Vec<Probe> = Vec::new();
        let run = |driver: &mut Driver, rate: f64, probes: &mut Vec<Probe>| -> Result<bool, DriverError> {
            let verdict = driver.probe(rate, plan.probe_duration)?;
            if verdict.reason == VerdictReason::ConnectionDrop {
                return Err(DriverError::ConnectionDrop { rate });
            }
            let probe = Probe { rate, verdict };
            let ok = probe.verdict.sustainable;
            for other in probes.iter() {
                let (lower, higher) = if ok { (other, &probe) } else { (&probe, other) };
                if lower.rate < higher.rate && !lower.verdict.sustainable && higher.verdict.sustainable {
                    return Err(DriverError::NonMonotoneSut { lower: lower.clone(), higher: higher.clone() });
                }
            }
            probes.push(probe);
            Ok(ok)
        };

        let (mut lo, mut hi) = (plan.lo, plan.hi);
        let mut best = None;
        if lo > 0.0 {
            if !run(self, lo, &mut probes)? {
                return Err(DriverError::NothingSustainable { probes });
            }
            best = Some(lo);
        }
        let mut hi_failed = false;
        let mut warnings = Vec::new();
        while (hi - lo) / hi > plan.tol {
            if probes.len() >= plan.max_probes {
                warnings.push(format!("stopped after {} probes", probes.len()));
                break;
            }
            let mid = (lo + hi) / 2.0;
            if run(self, mid, &mut probes)? {
                lo = mid;
                best = Some(mid);
            } else {
                hi = mid;
                hi_failed = true;
            }
        }
        if !hi_failed && probes.len() < plan.max_probes {
            if run(self, plan.hi, &mut probes)? {
                log::warn!("search ceiling reached: {} events/s is sustainable", plan.hi);
                warnings.push("search ceiling reached".into());
                return Ok(MstResult { mst: plan.hi, probes, ceiling_reached: true, warnings });
            }
        }
        match best {
            Some(mst) => Ok(MstResult { mst, probes, ceiling_reached: false, warnings }),
            None => Err(DriverError::NothingSustainable { probes }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuitePlan {
    pub name: String,
    pub search: SearchPlan,
    /// Skip the search and use this rate as the MST.
    pub fixed_mst: Option<f64>,
    #[serde(with = "crate::durations")]
    pub run_duration: Duration,
    pub fluctuating: Option<RateSchedule>,
    /// Also search and run with every event on a single key.
    pub skew: bool,
}

/// Outcome of [`Driver::run_suite`].
#[derive(Debug)]
pub struct SuiteOutcome {
    pub mst: Option<MstResult>,
    pub skew_mst: Option<MstResult>,
    pub runs: Vec<RunOutcome>,
    /// Why the suite stopped early, if it did.
    pub halted: Option<String>,
}

impl SuiteOutcome {
    pub fn valid(&self) -> bool {
        self.halted.is_none() && self.runs.iter().all(|r| r.valid)
    }
}

impl Driver {
    /// MST search, a run at the MST, a run at 90% of it, then the optional
    /// fluctuating and skewed runs. A connection drop halts the suite.
    pub fn run_suite(&mut self, plan: &SuitePlan) -> Result<SuiteOutcome, DriverError> {
        let mut suite = SuiteOutcome { mst: None, skew_mst: None, runs: Vec::new(), halted: None };
        let mst = match plan.fixed_mst {
            Some(rate) => rate,
            None => match self.find_mst(&plan.search) {
                Ok(result) => {
                    let rate = result.mst;
                    suite.mst = Some(result);
                    rate
                }
                Err(DriverError::ConnectionDrop { rate }) => {
                    suite.halted = Some(format!("SUT dropped its connection while probing {rate:.0} events/s"));
                    return Ok(suite);
                }
                Err(e) => return Err(e),
            },
        };
        let mut runs = vec![
            RunSpec::constant(plan.name.clone(), mst, plan.run_duration),
            RunSpec::constant(format!("{}(90%)", plan.name), 0.9 * mst, plan.run_duration),
        ];
        if let Some(schedule) = &plan.fluctuating {
            runs.push(RunSpec::new(format!("{}(fluctuating)", plan.name), schedule.clone()));
        }
        for spec in runs {
            if !self.run_into(&mut suite, &spec)? {
                return Ok(suite);
            }
        }
        if plan.skew {
            let key_space = self.generator.key_dist.key_space();
            let skewed = GeneratorConfig {
                key_dist: KeyDistribution::SingleKey { key_space, fixed_key: key_space / 2 },
                ..self.generator.clone()
            };
            let mut skew_driver = self.clone().with_generator(skewed);
            skew_driver.generator_capacity = self.generator_capacity;
            let search = SearchPlan { hi: mst, ..plan.search };
            match skew_driver.find_mst(&search) {
                Ok(result) => {
                    let rate = result.mst;
                    suite.skew_mst = Some(result);
                    let spec = RunSpec::constant(format!("{}(skew)", plan.name), rate, plan.run_duration);
                    skew_driver.run_into(&mut suite, &spec)?;
                }
                Err(DriverError::ConnectionDrop { rate }) => {
                    suite.halted = Some(format!("SUT dropped its connection while probing {rate:.0} events/s"));
                }
                Err(DriverError::NothingSustainable { .. }) => {
                    log::warn!("skewed workload: nothing sustainable below {mst:.0} events/s");
                }
                Err(e) => return Err(e),
            }
        }
        Ok(suite)
    }

    fn run_into(&mut self, suite: &mut SuiteOutcome, spec: &RunSpec) -> Result<bool, DriverError> {
        let outcome = self.execute(spec)?;
        let valid = outcome.valid;
        if !valid {
            suite.halted = Some(format!("SUT dropped its connection during run {}", spec.label));
        }
        suite.runs.push(outcome);
        Ok(valid)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::queue::TelemetrySample;

    fn telemetry(depths: &[u64]) -> QueueTelemetry {
        QueueTelemetry {
            samples: depths
                .iter()
                .enumerate()
                .map(|(i, &depth)| TelemetrySample {
                    second: i as u32 + 1,
                    at_nanos: (i as u64 + 1) * 1_000_000_000,
                    depth,
                    offered_total: 0,
                    taken_total: 0,
                    offer_rate: 0,
                    take_rate: 0,
                    high_watermark: false,
                })
                .collect(),
        }
    }

    #[test]
    fn flat_queue_is_sustainable() {
        let v = judge(&telemetry(&[10; 30]), 1000.0, &SustainabilityPolicy::default());
        assert!(v.sustainable);
        assert_eq!(v.reason, VerdictReason::Ok);
        assert_eq!(v.evidence.tail_slope, 0.0);
        assert_eq!(v.evidence.tail_from, 16);
    }

    #[test]
    fn growth_in_the_tail_fails() {
        let depths: Vec<u64> = (0..30).map(|s| s * 200).collect();
        let v = judge(&telemetry(&depths), 1000.0, &SustainabilityPolicy::default());
        assert_eq!(v.reason, VerdictReason::QueueGrowth);
        assert!((v.evidence.tail_slope - 200.0).abs() < 1e-9);
    }

    #[test]
    fn early_backlog_that_drains_is_tolerated() {
        let mut depths = vec![0u64; 30];
        depths[2] = 50_000;
        depths[3] = 20_000;
        let v = judge(&telemetry(&depths), 1000.0, &SustainabilityPolicy::default());
        assert!(v.sustainable);
    }

    #[test]
    fn deep_but_flat_queue_hits_the_cap() {
        let v = judge(&telemetry(&[6_000; 30]), 1000.0, &SustainabilityPolicy::default());
        assert_eq!(v.reason, VerdictReason::DepthCap);
    }

    #[test]
    fn search_plan_validation() {
        let plan = SearchPlan { lo: 10.0, hi: 5.0, tol: 0.05, probe_duration: Duration::from_secs(30), max_probes: 8 };
        assert!(plan.validate().is_err());
    }
}
