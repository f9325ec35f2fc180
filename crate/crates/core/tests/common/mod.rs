//! Brute-force oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use streamgauge::adapter::{Endpoint, OutputPayload, OutputRecord, Query, SutDescriptor};
use streamgauge::clock::Timestamp;
use streamgauge::driver::{Driver, RunOutcome, RunSpec};
use streamgauge::engine::{EngineConfig, ReferenceEngine, Trace, TraceTap};
use streamgauge::generator::GeneratorConfig;
use streamgauge::model::{Event, Stream, TimeSemantics, WindowSpec};

/// `(window_start, key) -> (sum cents, count, max event time, max ingest time)`.
pub type AggTable = BTreeMap<(i64, u64), (u64, u64, u64, u64)>;

/// `(window_start, user, gem, price cents, max event time, max ingest time)`.
pub type JoinRow = (i64, u64, u64, u64, u64, u64);

fn time_of(e: &Event, semantics: TimeSemantics) -> u64 {
    match semantics {
        TimeSemantics::EventTime => e.event_time.as_nanos(),
        TimeSemantics::ProcessingTime => e.ingest_time.expect("traced events carry ingest stamps").as_nanos(),
    }
}

/// Every window containing `t`, found by stepping over aligned starts.
fn windows_containing(t: u64, spec: &WindowSpec) -> Vec<(i64, i64)> {
    let range = spec.range.as_nanos() as i64;
    let slide = spec.slide.as_nanos() as i64;
    let t = t as i64;
    let mut start = spec.offset.as_nanos() as i64;
    while start > t - range {
        start -= slide;
    }
    while start <= t - range {
        start += slide;
    }
    let mut out = Vec::new();
    while start <= t {
        out.push((start, start + range));
        start += slide;
    }
    out
}

fn closed(end: i64, trace: &Trace, semantics: TimeSemantics) -> bool {
    let wm = trace.final_watermark(semantics).expect("every source finished").as_nanos() as i64;
    end <= wm
}

pub fn agg_oracle(trace: &Trace, spec: &WindowSpec) -> AggTable {
    let mut table = AggTable::new();
    for e in trace.events.iter().filter(|e| e.stream == Stream::Purchases) {
        for (start, end) in windows_containing(time_of(e, spec.semantics), spec) {
            if !closed(end, trace, spec.semantics) {
                continue;
            }
            let row = table.entry((start, e.gem_pack_id)).or_insert((0, 0, 0, 0));
            row.0 += e.price.cents();
            row.1 += 1;
            row.2 = row.2.max(e.event_time.as_nanos());
            row.3 = row.3.max(e.ingest_time.unwrap().as_nanos());
        }
    }
    table
}

pub fn agg_table(outputs: &[OutputRecord]) -> AggTable {
    let mut table = AggTable::new();
    for o in outputs {
        let OutputPayload::Agg { gem_pack_id, sum_price, count, window_start } = o.payload else {
            panic!("unexpected join output");
        };
        let row = (sum_price.cents(), count, o.max_event_time.as_nanos(), o.max_ingest_time.as_nanos());
        assert!(table.insert((window_start, gem_pack_id), row).is_none(), "duplicate output for a window and key");
    }
    table
}

/// Nested-loop join. Each output carries the larger of the purchases-side
/// and ads-side window maxima.
pub fn join_oracle(trace: &Trace, spec: &WindowSpec) -> Vec<JoinRow> {
    let mut by_window: BTreeMap<i64, (Vec<&Event>, Vec<&Event>)> = BTreeMap::new();
    for e in &trace.events {
        for (start, end) in windows_containing(time_of(e, spec.semantics), spec) {
            if closed(end, trace, spec.semantics) {
                let slot = by_window.entry(start).or_default();
                match e.stream {
                    Stream::Purchases => slot.0.push(e),
                    Stream::Ads => slot.1.push(e),
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (start, (purchases, ads)) in by_window {
        let max = |side: &[&Event], f: fn(&Event) -> u64| side.iter().map(|e| f(e)).max().unwrap_or(0);
        let ev = |e: &Event| e.event_time.as_nanos();
        let ing = |e: &Event| e.ingest_time.unwrap().as_nanos();
        let max_event = max(&purchases, ev).max(max(&ads, ev));
        let max_ingest = max(&purchases, ing).max(max(&ads, ing));
        for p in &purchases {
            for a in &ads {
                if p.user_id == a.user_id && p.gem_pack_id == a.gem_pack_id {
                    rows.push((start, p.user_id, p.gem_pack_id, p.price.cents(), max_event, max_ingest));
                }
            }
        }
    }
    rows.sort_unstable();
    rows
}

pub fn join_rows(outputs: &[OutputRecord]) -> Vec<JoinRow> {
    let mut rows: Vec<JoinRow> = outputs
        .iter()
        .map(|o| {
            let OutputPayload::Join { user_id, gem_pack_id, price, window_start } = o.payload else {
                panic!("unexpected aggregation output");
            };
            (window_start, user_id, gem_pack_id, price.cents(), o.max_event_time.as_nanos(), o.max_ingest_time.as_nanos())
        })
        .collect();
    rows.sort_unstable();
    rows
}

pub fn traced_sut(engine: EngineConfig) -> (SutDescriptor, TraceTap) {
    let tap: TraceTap = Arc::new(Mutex::new(Trace::default()));
    let engine = ReferenceEngine::new(engine).with_trace(Arc::clone(&tap));
    (SutDescriptor { name: "reference".into(), endpoint: Endpoint::InProcess(Arc::new(engine)) }, tap)
}

pub fn in_process(engine: EngineConfig) -> SutDescriptor {
    SutDescriptor { name: "reference".into(), endpoint: Endpoint::InProcess(Arc::new(ReferenceEngine::new(engine))) }
}

/// Runs `total` events at `rate` through a traced reference engine and
/// returns the drained outcome with every output captured.
pub fn traced_run(
    query: Query,
    window: WindowSpec,
    generator: GeneratorConfig,
    rate: f64,
) -> (RunOutcome, Trace) {
    let total = generator.total_events.expect("traced runs are bounded");
    let (sut, tap) = traced_sut(EngineConfig::new(query, window));
    let mut driver = Driver::new(sut, generator).assume_generator_capacity(f64::MAX);
    let duration = Duration::from_secs_f64(total as f64 / rate + 1.0);
    let outcome = driver.execute(&RunSpec::constant("traced", rate, duration).drained().capturing()).expect("run");
    let trace = tap.lock().unwrap().clone();
    (outcome, trace)
}

pub fn ts(secs: u64) -> Timestamp {
    Timestamp::from_secs(secs)
}
