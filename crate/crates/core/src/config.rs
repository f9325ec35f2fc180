//! Benchmark configuration files.
//!
//! ```toml
//! name = "reference"
//! query = "windowed_aggregation"
//! output_dir = "results"
//!
//! [window]
//! range = "8s"
//! slide = "4s"
//! semantics = "event_time"
//!
//! [generator]
//! instances = 2
//! seed = 42
//! key_dist = { mode = "normal", key_space = 1000, mean = 500.0, stddev = 100.0 }
//!
//! [sut]
//! mode = "in_process"
//! service_rate_cap = 50000.0
//!
//! [search]
//! hi = 200000.0
//! tol = 0.05
//! probe_duration = "30s"
//!
//! [suite]
//! run_duration = "60s"
//! ```
//!
//! Every table except `window` and `sut` may be omitted. `STREAMGAUGE_OUT`
//! overrides `output_dir` when set.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{Endpoint, Query, SutDescriptor};
use crate::driver::{Driver, SearchPlan, SuitePlan, SustainabilityPolicy};
use crate::engine::{EngineConfig, ReferenceEngine};
use crate::generator::GeneratorConfig;
use crate::model::{ModelError, WindowSpec};
use crate::pacing::RateSchedule;
use crate::queue::QueueLimits;

pub const OUTPUT_DIR_ENV: &str = "STREAMGAUGE_OUT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Invalid(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SutMode {
    InProcess,
    Remote,
}

/// Where the SUT runs. The engine fields only apply in process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SutConfig {
    pub mode: SutMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub service_rate_cap: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub capacity_jitter: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partitions: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub buffer_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub lo: f64,
    pub hi: f64,
    pub tol: f64,
    #[serde(with = "crate::durations")]
    pub probe_duration: Duration,
    pub max_probes: usize,
    /// Skip the search and treat this rate as the MST.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fixed: Option<f64>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            lo: 0.0,
            hi: 200_000.0,
            tol: 0.05,
            probe_duration: Duration::from_secs(30),
            max_probes: 16,
            fixed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SuiteConfig {
    #[serde(with = "crate::durations")]
    pub run_duration: Duration,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fluctuating: Option<RateSchedule>,
    pub skew: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig { run_duration: Duration::from_secs(60), fluctuating: None, skew: false }
    }
}

fn default_name() -> String {
    "sut".into()
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("results")
}

fn default_warmup() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub query: Query,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Leading fraction of each run excluded from latency statistics.
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    /// Known generator throughput. Skips the start-up calibration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator_capacity: Option<f64>,
    pub window: WindowSpec,
    #[serde(default)]
    pub generator: GeneratorConfig,
    pub sut: SutConfig,
    #[serde(default)]
    pub policy: SustainabilityPolicy,
    #[serde(default)]
    pub search: SearchConfig,
    #[serde(default)]
    pub suite: SuiteConfig,
    #[serde(default)]
    pub queue: QueueLimits,
}

fn invalid(field: &'static str, message: &str) -> ModelError {
    ModelError::Invalid { field, message: message.to_string() }
}

impl BenchConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let config: BenchConfig = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    /// Reads, validates and applies the `STREAMGAUGE_OUT` override.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut config = Self::parse(&text)?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV).filter(|d| !d.is_empty()) {
            config.output_dir = PathBuf::from(dir);
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.name.is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(invalid("warmup_fraction", "must be in [0, 1)"));
        }
        if self.generator_capacity.is_some_and(|c| !(c > 0.0)) {
            return Err(invalid("generator_capacity", "must be positive"));
        }
        self.window.validate()?;
        self.generator.validate()?;
        match self.sut.mode {
            SutMode::Remote if self.sut.address.as_deref().is_none_or(str::is_empty) => {
                return Err(invalid("sut.address", "remote mode needs an address"));
            }
            SutMode::InProcess => self.engine_config().validate()?,
            SutMode::Remote => {}
        }
        self.policy.validate()?;
        self.search_plan().validate()?;
        if let Some(rate) = self.search.fixed {
            if !(rate > 0.0) {
                return Err(invalid("search.fixed", "must be positive"));
            }
        }
        if self.suite.run_duration < self.policy.min_run {
            return Err(invalid("suite.run_duration", "shorter than policy.min_run"));
        }
        if self.search.fixed.is_none() && self.search.probe_duration < self.policy.min_run {
            return Err(invalid("search.probe_duration", "shorter than policy.min_run"));
        }
        if let Some(schedule) = &self.suite.fluctuating {
            schedule.validate()?;
        }
        if self.queue.capacity_soft > self.queue.hard_cap {
            return Err(invalid("queue.capacity_soft", "exceeds queue.hard_cap"));
        }
        Ok(())
    }

    pub fn engine_config(&self) -> EngineConfig {
        let mut engine = EngineConfig::new(self.query, self.window);
        engine.service_rate_cap = self.sut.service_rate_cap;
        engine.seed = self.generator.seed;
        if let Some(j) = self.sut.capacity_jitter {
            engine.capacity_jitter = j;
        }
        if let Some(p) = self.sut.partitions {
            engine.partitions = p;
        }
        if let Some(b) = self.sut.batch_size {
            engine.batch_size = b;
        }
        if let Some(b) = self.sut.buffer_size {
            engine.buffer_size = b;
        }
        engine
    }

    pub fn sut_descriptor(&self) -> SutDescriptor {
        match self.sut.mode {
            SutMode::InProcess => SutDescriptor {
                name: self.name.clone(),
                endpoint: Endpoint::InProcess(Arc::new(ReferenceEngine::new(self.engine_config()))),
            },
            SutMode::Remote => SutDescriptor {
                name: self.name.clone(),
                endpoint: Endpoint::Remote(self.sut.address.clone().unwrap_or_default()),
            },
        }
    }

    pub fn driver(&self) -> Driver {
        let mut driver = Driver::new(self.sut_descriptor(), self.generator.clone())
            .with_policy(self.policy)
            .with_warmup(self.warmup_fraction)
            .with_queue_limits(self.queue);
        if let Some(capacity) = self.generator_capacity {
            driver = driver.assume_generator_capacity(capacity);
        }
        driver
    }

    pub fn search_plan(&self) -> SearchPlan {
        SearchPlan {
            lo: self.search.lo,
            hi: self.search.hi,
            tol: self.search.tol,
            probe_duration: self.search.probe_duration,
            max_probes: self.search.max_probes,
        }
    }

    pub fn suite_plan(&self) -> SuitePlan {
        SuitePlan {
            name: self.name.clone(),
            search: self.search_plan(),
            fixed_mst: self.search.fixed,
            run_duration: self.suite.run_duration,
            fluctuating: self.suite.fluctuating.clone(),
            skew: self.suite.skew,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{KeyDistribution, TimeSemantics};

    const MINIMAL: &str = r#"
query = "windowed_aggregation"

[window]
range = "8s"
slide = "4s"
semantics = "event_time"

[sut]
mode = "in_process"
service_rate_cap = 50000.0
"#;

    #[test]
    fn minimal_config_takes_defaults() {
        let c = BenchConfig::parse(MINIMAL).unwrap();
        assert_eq!(c.name, "sut");
        assert_eq!(c.window.semantics, TimeSemantics::EventTime);
        assert_eq!(c.generator, GeneratorConfig::default());
        assert_eq!(c.search.tol, 0.05);
        assert_eq!(c.engine_config().service_rate_cap, Some(50_000.0));
    }

    #[test]
    fn round_trip() {
        let mut c = BenchConfig::parse(MINIMAL).unwrap();
        c.generator.key_dist = KeyDistribution::SingleKey { key_space: 10, fixed_key: 3 };
        c.suite.fluctuating = Some(RateSchedule::constant(1000.0, Duration::from_secs(30)));
        c.search.fixed = Some(1234.5);
        let text = c.to_toml();
        assert_eq!(BenchConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn slide_longer_than_range_names_the_field() {
        let text = MINIMAL.replace("slide = \"4s\"", "slide = \"9s\"");
        match BenchConfig::parse(&text) {
            Err(ConfigError::Invalid(ModelError::Invalid { field, .. })) => assert_eq!(field, "window.slide"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn remote_needs_an_address() {
        let text = MINIMAL.replace("mode = \"in_process\"", "mode = \"remote\"");
        match BenchConfig::parse(&text) {
            Err(ConfigError::Invalid(ModelError::Invalid { field, .. })) => assert_eq!(field, "sut.address"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shipped_examples_parse() {
        let reference = BenchConfig::parse(include_str!("../configs/reference.toml")).unwrap();
        assert_eq!(reference.engine_config().service_rate_cap, Some(50_000.0));
        let join = BenchConfig::parse(include_str!("../configs/remote-join.toml")).unwrap();
        assert_eq!(join.suite.fluctuating.unwrap().segments().len(), 3);
    }

    #[test]
    fn unknown_query_is_a_parse_error() {
        let text = MINIMAL.replace("windowed_aggregation", "top_k");
        assert!(matches!(BenchConfig::parse(&text), Err(ConfigError::Parse(_))));
    }
}
