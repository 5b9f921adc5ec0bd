//! TOML pipeline configuration.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::analytics::FeatureSampleSpec;
use crate::error::{Error, Result};
use crate::ingest::RetryPolicy;
use crate::manifest::DEFAULT_SHARD_RECORDS;
use crate::model::{LidConfig, SegmentationConfig};
use crate::package::{PackageConfig, SplitSizes, SplitSpec};
use crate::worker::{Task, WorkerSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub workdir: PathBuf,
    pub output_dir: PathBuf,
    /// Directory of `.wav` files collected as the `local` source.
    #[serde(default)]
    pub local_audio_dir: Option<PathBuf>,
    /// TSV of podcast feed URLs and language labels.
    #[serde(default)]
    pub feed_list: Option<PathBuf>,
    /// JSON map from keyword to result URIs.
    #[serde(default)]
    pub search_results: Option<PathBuf>,
    /// One title per line; keywords are sampled from these.
    #[serde(default)]
    pub titles_file: Option<PathBuf>,
    /// Serve every URL from this directory instead of the network.
    #[serde(default)]
    pub fetch_root: Option<PathBuf>,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectConfig {
    #[serde(default = "CollectConfig::default_keywords")]
    pub num_keywords: usize,
    /// Only feeds labelled with this language are read; empty reads all.
    #[serde(default)]
    pub feed_language: String,
    #[serde(default = "CollectConfig::default_per_host")]
    pub per_host_limit: usize,
    #[serde(default = "CollectConfig::default_concurrency")]
    pub concurrency: usize,
    #[serde(default = "CollectConfig::default_attempts")]
    pub retry_attempts: u32,
    #[serde(default = "CollectConfig::default_delay")]
    pub retry_base_delay_ms: u64,
    #[serde(default = "CollectConfig::default_timeout")]
    pub fetch_timeout_s: u64,
}

impl CollectConfig {
    fn default_keywords() -> usize {
        100
    }
    fn default_per_host() -> usize {
        4
    }
    fn default_concurrency() -> usize {
        8
    }
    fn default_attempts() -> u32 {
        3
    }
    fn default_delay() -> u64 {
        500
    }
    fn default_timeout() -> u64 {
        60
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            attempts: self.retry_attempts,
            base_delay: Duration::from_millis(self.retry_base_delay_ms),
        }
    }
}

impl Default for CollectConfig {
    fn default() -> Self {
        toml::from_str("").expect("collect defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidStageConfig {
    #[serde(flatten)]
    pub filter: LidConfig,
    /// Seconds of audio the classifier sees.
    #[serde(default = "LidStageConfig::default_window")]
    pub window_s: f64,
}

impl LidStageConfig {
    fn default_window() -> f64 {
        30.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsConfig {
    pub keywords: u64,
    pub split: u64,
    pub features: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShardsConfig {
    #[serde(default = "ShardsConfig::default_max")]
    pub max_records: usize,
}

impl ShardsConfig {
    fn default_max() -> usize {
        DEFAULT_SHARD_RECORDS
    }
}

impl Default for ShardsConfig {
    fn default() -> Self {
        Self {
            max_records: Self::default_max(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PackageSection {
    #[serde(default = "PackageSection::default_rate")]
    pub sample_rate_hz: u32,
}

impl PackageSection {
    fn default_rate() -> u32 {
        16_000
    }
}

impl Default for PackageSection {
    fn default() -> Self {
        Self {
            sample_rate_hz: Self::default_rate(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeaturesSection {
    #[serde(default = "FeaturesSection::default_samples")]
    pub n_samples: usize,
    #[serde(default = "FeaturesSection::default_window")]
    pub window_s: f64,
    #[serde(default)]
    pub worker_params: serde_json::Map<String, serde_json::Value>,
}

impl FeaturesSection {
    fn default_samples() -> usize {
        1000
    }
    fn default_window() -> f64 {
        5.0
    }
}

impl Default for FeaturesSection {
    fn default() -> Self {
        Self {
            n_samples: Self::default_samples(),
            window_s: Self::default_window(),
            worker_params: Default::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerCommand {
    pub command: Vec<String>,
    #[serde(default = "WorkerCommand::default_pool")]
    pub pool_size: usize,
    #[serde(default = "WorkerCommand::default_timeout")]
    pub timeout_s: u64,
}

impl WorkerCommand {
    fn default_pool() -> usize {
        1
    }
    fn default_timeout() -> u64 {
        600
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WorkersConfig {
    /// Answer every task in process from sidecar files.
    #[serde(default)]
    pub mock: bool,
    /// Per-task subprocess commands, keyed by task name.
    #[serde(flatten)]
    pub tasks: BTreeMap<String, WorkerCommand>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: PathsConfig,
    #[serde(default)]
    pub collect: CollectConfig,
    pub lid: LidStageConfig,
    #[serde(default)]
    pub segmentation: SegmentationConfig,
    pub split: SplitSizes,
    pub seeds: SeedsConfig,
    #[serde(default)]
    pub shards: ShardsConfig,
    #[serde(default)]
    pub package: PackageSection,
    #[serde(default)]
    pub features: FeaturesSection,
    #[serde(default)]
    pub workers: WorkersConfig,
}

fn config_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{}: {e}", path.display()))
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths are taken relative to the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => config_err(path, m),
            other => other,
        })?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        let fix = |q: &mut PathBuf| {
            if q.is_relative() {
                *q = base.join(&*q);
            }
        };
        fix(&mut p.workdir);
        fix(&mut p.output_dir);
        for q in [
            &mut p.local_audio_dir,
            &mut p.feed_list,
            &mut p.search_results,
            &mut p.titles_file,
            &mut p.fetch_root,
            &mut p.cache_dir,
        ]
        .into_iter()
        .flatten()
        {
            fix(q);
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| r.map_err(|e| Error::Config(e.to_string()));
        wrap(self.lid.filter.validate())?;
        wrap(self.segmentation.validate())?;
        wrap(self.split_spec().validate())?;
        wrap(self.feature_spec().validate())?;
        if !(self.lid.window_s > 0.0) {
            return Err(Error::Config("lid.window_s must be > 0".into()));
        }
        if self.shards.max_records == 0 {
            return Err(Error::Config("shards.max_records must be > 0".into()));
        }
        if self.package.sample_rate_hz == 0 {
            return Err(Error::Config("package.sample_rate_hz must be > 0".into()));
        }
        if self.collect.per_host_limit == 0 {
            return Err(Error::Config("collect.per_host_limit must be > 0".into()));
        }
        if self.paths.search_results.is_some() != self.paths.titles_file.is_some() {
            return Err(Error::Config(
                "paths.search_results and paths.titles_file must be given together".into(),
            ));
        }
        for (name, w) in &self.workers.tasks {
            name.parse::<Task>()
                .map_err(|_| Error::Config(format!("workers.{name}: unknown task")))?;
            if w.command.is_empty() {
                return Err(Error::Config(format!("workers.{name}.command is empty")));
            }
            if w.pool_size == 0 {
                return Err(Error::Config(format!("workers.{name}.pool_size must be > 0")));
            }
        }
        Ok(())
    }

    pub fn override_seeds(&mut self, seed: u64) {
        self.seeds = SeedsConfig {
            keywords: seed,
            split: seed,
            features: seed,
        };
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            sizes: self.split,
            seed: self.seeds.split,
        }
    }

    pub fn package_config(&self) -> PackageConfig {
        PackageConfig {
            sample_rate_hz: self.package.sample_rate_hz,
            split: self.split_spec(),
        }
    }

    pub fn feature_spec(&self) -> FeatureSampleSpec {
        FeatureSampleSpec {
            n_samples: self.features.n_samples,
            window_s: self.features.window_s,
            seed: self.seeds.features,
            worker_params: self.features.worker_params.clone(),
        }
    }

    pub fn worker_spec(&self, task: Task) -> Option<WorkerSpec> {
        let w = self.workers.tasks.get(task.as_str())?;
        Some(WorkerSpec {
            task,
            command: w.command.clone(),
            pool_size: w.pool_size,
            timeout: Duration::from_secs(w.timeout_s),
            log_path: Some(self.paths.workdir.join("logs").join(format!("{task}.log"))),
        })
    }
}
