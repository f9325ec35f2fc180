//! Single-threaded windowed operator: keyed sliding-window SUM and the
//! windowed purchases/ads join.
//!
//! Output timestamps follow these rules:
//!
//! * aggregation: `max_event_time` and `max_ingest_time` are the maxima over
//!   the events that contributed to the `(window, key)` sum;
//! * join: every tuple inherits its window's per-stream maximum, and an
//!   output carries the larger of the purchases-side and ads-side values.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::adapter::{OutputPayload, OutputRecord, Query};
use crate::clock::Timestamp;
use crate::model::{assign_windows, Event, Price, Stream, TimeSemantics, WindowId, WindowSpec};

use super::EngineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowAccumulator {
    pub window: WindowId,
    pub key: u64,
    pub sum_price: Price,
    pub count: u64,
    pub max_event_time: Timestamp,
    pub max_ingest_time: Timestamp,
}

impl WindowAccumulator {
    fn new(window: WindowId, key: u64) -> Self {
        WindowAccumulator {
            window,
            key,
            sum_price: Price::ZERO,
            count: 0,
            max_event_time: Timestamp::ZERO,
            max_ingest_time: Timestamp::ZERO,
        }
    }

    fn add(&mut self, e: &Event, ingest: Timestamp) {
        self.sum_price += e.price;
        self.count += 1;
        self.max_event_time = self.max_event_time.max(e.event_time);
        self.max_ingest_time = self.max_ingest_time.max(ingest);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct StreamMax {
    event: Timestamp,
    ingest: Timestamp,
}

impl StreamMax {
    fn observe(&mut self, e: &Event, ingest: Timestamp) {
        self.event = self.event.max(e.event_time);
        self.ingest = self.ingest.max(ingest);
    }
}

/// State of one join window.
#[derive(Debug, Clone, Default)]
pub struct JoinWindowState {
    purchases: HashMap<(u64, u64), Vec<Price>>,
    ads: HashMap<(u64, u64), u64>,
    purchases_max: StreamMax,
    ads_max: StreamMax,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorStats {
    pub events: u64,
    pub late_events: u64,
    pub windows_closed: u64,
    pub outputs: u64,
}

#[derive(Debug)]
pub struct WindowOperator {
    query: Query,
    spec: WindowSpec,
    agg: BTreeMap<WindowId, HashMap<u64, WindowAccumulator>>,
    join: BTreeMap<WindowId, JoinWindowState>,
    watermark: Option<Timestamp>,
    last_closed: Option<i64>,
    stats: OperatorStats,
}

impl WindowOperator {
    pub fn new(query: Query, spec: WindowSpec) -> Self {
        WindowOperator {
            query,
            spec,
            agg: BTreeMap::new(),
            join: BTreeMap::new(),
            watermark: None,
            last_closed: None,
            stats: OperatorStats::default(),
        }
    }

    pub fn stats(&self) -> OperatorStats {
        self.stats
    }

    pub fn watermark(&self) -> Option<Timestamp> {
        self.watermark
    }

    pub fn open_windows(&self) -> usize {
        self.agg.len() + self.join.len()
    }

    /// The time an event is windowed by. Events without an ingest stamp fall
    /// back to their event time.
    pub fn time_of(&self, e: &Event) -> Timestamp {
        match self.spec.semantics {
            TimeSemantics::EventTime => e.event_time,
            TimeSemantics::ProcessingTime => e.ingest_time.unwrap_or(e.event_time),
        }
    }

    /// Adds `e` to every open window containing it. Windows that already
    /// closed are skipped and the event counted as late.
    pub fn ingest(&mut self, e: &Event) {
        self.stats.events += 1;
        let ingest = e.ingest_time.unwrap_or(e.event_time);
        let mut late = false;
        for w in assign_windows(self.time_of(e), &self.spec) {
            if self.watermark.is_some_and(|wm| w.end <= wm.as_nanos() as i64) {
                late = true;
                continue;
            }
            match self.query {
                Query::WindowedAggregation => {
                    if e.stream != Stream::Purchases {
                        continue;
                    }
                    self.agg
                        .entry(w)
                        .or_default()
                        .entry(e.gem_pack_id)
                        .or_insert_with(|| WindowAccumulator::new(w, e.gem_pack_id))
                        .add(e, ingest);
                }
                Query::WindowedJoin => {
                    let state = self.join.entry(w).or_default();
                    let key = (e.user_id, e.gem_pack_id);
                    match e.stream {
                        Stream::Purchases => {
                            state.purchases.entry(key).or_default().push(e.price);
                            state.purchases_max.observe(e, ingest);
                        }
                        Stream::Ads => {
                            *state.ads.entry(key).or_default() += 1;
                            state.ads_max.observe(e, ingest);
                        }
                    }
                }
            }
        }
        if late {
            self.stats.late_events += 1;
        }
    }

    /// Moves the watermark forward and closes every window ending at or
    /// before it, oldest first. A watermark that does not advance is a no-op.
    pub fn advance(&mut self, watermark: Timestamp) -> Vec<OutputRecord> {
        if self.watermark.is_some_and(|wm| wm >= watermark) {
            return Vec::new();
        }
        self.watermark = Some(watermark);
        let wm = watermark.as_nanos() as i64;
        let due: Vec<WindowId> = match self.query {
            Query::WindowedAggregation => self.agg.keys().take_while(|w| w.end <= wm).copied().collect(),
            Query::WindowedJoin => self.join.keys().take_while(|w| w.end <= wm).copied().collect(),
        };
        let mut out = Vec::new();
        for w in due {
            out.extend(self.close_window(w).expect("due windows are open and ascending"));
        }
        out
    }

    /// Emits the results of `w` and releases its state. Windows must be
    /// closed in ascending start order, each at most once.
    pub fn close_window(&mut self, w: WindowId) -> Result<Vec<OutputRecord>, EngineError> {
        if self.last_closed.is_some_and(|last| w.start <= last) {
            return Err(EngineError::DoubleClose { start: w.start, end: w.end });
        }
        self.last_closed = Some(w.start);
        self.stats.windows_closed += 1;
        let out = match self.query {
            Query::WindowedAggregation => close_agg(self.agg.remove(&w).unwrap_or_default()),
            Query::WindowedJoin => close_join(w, self.join.remove(&w).unwrap_or_default()),
        };
        self.stats.outputs += out.len() as u64;
        Ok(out)
    }
}

fn close_agg(accumulators: HashMap<u64, WindowAccumulator>) -> Vec<OutputRecord> {
    let mut accs: Vec<WindowAccumulator> = accumulators.into_values().collect();
    accs.sort_unstable_by_key(|a| a.key);
    accs.into_iter()
        .map(|a| OutputRecord {
            payload: OutputPayload::Agg {
                gem_pack_id: a.key,
                sum_price: a.sum_price,
                count: a.count,
                window_start: a.window.start,
            },
            max_event_time: a.max_event_time,
            max_ingest_time: a.max_ingest_time,
            emission_time: None,
        })
        .collect()
}

fn close_join(w: WindowId, state: JoinWindowState) -> Vec<OutputRecord> {
    let max_event_time = state.purchases_max.event.max(state.ads_max.event);
    let max_ingest_time = state.purchases_max.ingest.max(state.ads_max.ingest);
    let mut keys: Vec<&(u64, u64)> = state.purchases.keys().filter(|k| state.ads.contains_key(k)).collect();
    keys.sort_unstable();
    let mut out = Vec::new();
    for &(user_id, gem_pack_id) in keys {
        let ads = state.ads[&(user_id, gem_pack_id)];
        for &price in &state.purchases[&(user_id, gem_pack_id)] {
            for _ in 0..ads {
                out.push(OutputRecord {
                    payload: OutputPayload::Join { user_id, gem_pack_id, price, window_start: w.start },
                    max_event_time,
                    max_ingest_time,
                    emission_time: None,
                });
            }
        }
    }
    out
}
