//! A benchmark harness for stream processing systems.
//!
//! The driver generates paced event streams into in-memory queues, a system
//! under test pulls from those queues, and every output is timestamped when
//! it comes back so that latency includes the time events spent queued.

pub mod adapter;
pub mod cli;
pub mod clock;
pub mod config;
pub mod driver;
pub mod durations;
pub mod engine;
pub mod generator;
pub mod metrics;
pub mod model;
pub mod pacing;
pub mod queue;
pub mod report;
