//! The resumable, sharded stage runner.
//!
//! Every stage reads the previous stage's manifest and writes its own under
//! `<workdir>/manifest/<stage>/`. Per-shard stages (lid, diarize, segment,
//! cleanse) run shards in parallel; collect, package and stats are
//! corpus-level. Progress is recorded in `<workdir>/ledger.jsonl` and a unit
//! whose input and output are unchanged since its last `done` entry is
//! skipped on the next run.

pub mod config;
pub mod ledger;
pub mod report;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crate::analytics::{
    is_corpus_dialogue, sample_frame_features, write_feature_matrix, FeatureMatrix, StatsReport,
};
use crate::error::{Error, Result};
use crate::ingest::{
    build_inventory, fetch_with_retry, list_local_audio, parse_rss, read_feed_list,
    sample_keywords, Fetcher, HttpFetcher, InventorySource, LocalFetcher, PreparedResults, Prober,
    SourceAdapter, WavProber,
};
use crate::lid::{filter_by_language, LanguageIdResult};
use crate::manifest::{
    file_sha256, num_shards_for, read_shard, sha256_hex, shard_file_name, shard_of, write_atomic,
    write_shard, Shard, ShardHeader, TurnList,
};
use crate::model::{sort_turns, AudioDocument, Dialogue, DiarizationTurn, Stage, StageStatus};
use crate::package::{cleanse, package, tree_hash, PackageSummary};
use crate::segment::segment_document;
use crate::worker::protocol::{DiarizePayload, LidPayload};
use crate::worker::{InferenceBackend, MockBackend, Task, WorkerPool, WorkerRequest, WorkerResponse};

pub use config::PipelineConfig;
pub use ledger::{EntryStatus, Ledger, LedgerEntry};
pub use report::{funnel_report, FunnelReport, FunnelRow};

/// Where everything lives under the work directory.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    pub workdir: PathBuf,
    pub output_dir: PathBuf,
}

impl Layout {
    pub fn new(workdir: impl Into<PathBuf>, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            workdir: workdir.into(),
            output_dir: output_dir.into(),
        }
    }

    pub fn ledger(&self) -> PathBuf {
        self.workdir.join("ledger.jsonl")
    }

    pub fn manifest_dir(&self, stage: Stage) -> PathBuf {
        self.workdir.join("manifest").join(stage.as_str())
    }

    pub fn shard_path(&self, stage: Stage, shard: u32) -> PathBuf {
        self.manifest_dir(stage).join(shard_file_name(shard))
    }

    pub fn enhanced_dir(&self) -> PathBuf {
        self.workdir.join("enhanced")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.workdir.join("reports")
    }

    pub fn stats_path(&self) -> PathBuf {
        self.reports_dir().join("stats.json")
    }

    pub fn scratch_dir(&self) -> PathBuf {
        self.workdir.join("scratch")
    }
}

/// Simulated crash: the run stops with [`Error::Interrupted`] once
/// `after_units` units of `stage` have written their output, before the
/// last of them is recorded as done.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interrupt {
    pub stage: Stage,
    pub after_units: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub jobs: usize,
    pub interrupt: Option<Interrupt>,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            jobs: thread::available_parallelism().map_or(1, |n| n.get()),
            interrupt: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: Option<Stage>,
    pub ran: usize,
    pub skipped: usize,
    /// Documents or dialogues marked failed by this run of the stage.
    pub failures: usize,
}

impl StageOutcome {
    fn new(stage: Stage) -> Self {
        Self {
            stage: Some(stage),
            ..Self::default()
        }
    }
}

enum BackendSource {
    Fixed(Arc<dyn InferenceBackend>),
    Mock,
    Pools(Box<PipelineConfig>),
}

/// Resolves a backend per task, spawning worker pools on first use.
pub struct Backends {
    source: BackendSource,
    spawned: Mutex<BTreeMap<Task, Arc<dyn InferenceBackend>>>,
}

impl Backends {
    pub fn fixed(backend: Arc<dyn InferenceBackend>) -> Self {
        Self {
            source: BackendSource::Fixed(backend),
            spawned: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn from_config(cfg: &PipelineConfig) -> Self {
        let source = if cfg.workers.mock {
            BackendSource::Mock
        } else {
            BackendSource::Pools(Box::new(cfg.clone()))
        };
        Self {
            source,
            spawned: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn get(&self, task: Task) -> Result<Arc<dyn InferenceBackend>> {
        let cfg = match &self.source {
            BackendSource::Fixed(b) => return Ok(b.clone()),
            BackendSource::Mock => return Ok(Arc::new(MockBackend::all())),
            BackendSource::Pools(cfg) => cfg,
        };
        let mut spawned = self.spawned.lock().expect("backend lock");
        if let Some(b) = spawned.get(&task) {
            return Ok(b.clone());
        }
        let spec = cfg
            .worker_spec(task)
            .ok_or_else(|| Error::Config(format!("no worker configured for task {task}")))?;
        let pool: Arc<dyn InferenceBackend> = Arc::new(WorkerPool::spawn(&spec)?);
        spawned.insert(task, pool.clone());
        Ok(pool)
    }
}

/// Applies `f` to every item on up to `concurrency` threads, keeping order.
fn parallel_map<T: Sync, R: Send>(items: &[T], concurrency: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    thread::scope(|s| {
        for _ in 0..concurrency.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(i) else { break };
                *slots[i].lock().expect("slot lock") = Some(f(item));
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every item mapped"))
        .collect()
}

fn call_all(backend: &dyn InferenceBackend, requests: Vec<WorkerRequest>, concurrency: usize) -> Vec<WorkerResponse> {
    parallel_map(&requests, concurrency, |r| backend.call(r.clone()))
}

fn audio_path(doc: &AudioDocument) -> String {
    doc.local_path.clone().unwrap_or_else(|| doc.uri.clone())
}

fn hash_parts<'a>(parts: impl IntoIterator<Item = &'a str>) -> String {
    let mut buf = String::new();
    for p in parts {
        buf.push_str(p);
        buf.push('\n');
    }
    sha256_hex(buf.as_bytes())
}

/// Normalizes worker turns to storage form and checks them against the
/// document.
fn normalize_turns(doc: &AudioDocument, turns: Vec<DiarizationTurn>) -> Result<Vec<DiarizationTurn>> {
    let mut out: Vec<DiarizationTurn> = turns
        .into_iter()
        .map(|t| DiarizationTurn::new(t.speaker, t.start_s, t.end_s))
        .collect();
    for t in &out {
        if !(t.start_s >= 0.0 && t.start_s < t.end_s) {
            return Err(Error::Worker(format!(
                "turn {}[{}, {}] violates 0 <= start < end",
                t.speaker, t.start_s, t.end_s
            )));
        }
        if t.end_s > doc.duration_s + 1e-6 {
            return Err(Error::Worker(format!(
                "turn {}[{}, {}] extends past document end {}",
                t.speaker, t.start_s, t.end_s, doc.duration_s
            )));
        }
    }
    sort_turns(&mut out);
    Ok(out)
}

pub struct Pipeline {
    config: PipelineConfig,
    layout: Layout,
    options: RunOptions,
    backends: Backends,
    ledger: Ledger,
    fetcher: Box<dyn Fetcher>,
    prober: Box<dyn Prober>,
}

impl Pipeline {
    /// A pipeline whose workers come from the config.
    pub fn new(config: PipelineConfig, options: RunOptions) -> Result<Self> {
        let backends = Backends::from_config(&config);
        Self::with_backends(config, options, backends)
    }

    pub fn with_backends(config: PipelineConfig, options: RunOptions, backends: Backends) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config.paths.workdir, &config.paths.output_dir);
        let ledger = Ledger::open(&layout.ledger())?;
        let fetcher: Box<dyn Fetcher> = match &config.paths.fetch_root {
            Some(root) => Box::new(LocalFetcher::new(root)),
            None => Box::new(HttpFetcher::new(
                config
                    .paths
                    .cache_dir
                    .clone()
                    .unwrap_or_else(|| layout.workdir.join("cache")),
                config.collect.per_host_limit,
                Duration::from_secs(config.collect.fetch_timeout_s),
            )),
        };
        Ok(Self {
            config,
            layout,
            options,
            backends,
            ledger,
            fetcher,
            prober: Box::new(WavProber),
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    pub fn run_all(&self) -> Result<Vec<StageOutcome>> {
        Stage::ALL.iter().map(|s| self.run_stage(*s)).collect()
    }

    /// Runs `stages[..=last]` in order.
    pub fn run_through(&self, last: Stage) -> Result<Vec<StageOutcome>> {
        Stage::ALL
            .iter()
            .take_while(|s| **s <= last)
            .map(|s| self.run_stage(*s))
            .collect()
    }

    pub fn run_stage(&self, stage: Stage) -> Result<StageOutcome> {
        let outcome = match stage {
            Stage::Collect => self.collect()?,
            Stage::Lid => self.per_shard(stage, |_, s| self.lid_shard(s))?,
            Stage::Diarize => self.per_shard(stage, |_, s| self.diarize_shard(s))?,
            Stage::Segment => self.per_shard(stage, |_, s| self.segment_shard(s))?,
            Stage::Cleanse => self.per_shard(stage, |_, s| self.cleanse_shard(s))?,
            Stage::Package => self.package_stage()?,
            Stage::Stats => self.stats_stage()?,
        };
        tracing::info!(
            stage = %stage,
            ran = outcome.ran,
            skipped = outcome.skipped,
            failures = outcome.failures,
            "stage finished"
        );
        if outcome.failures > 0 {
            tracing::warn!(stage = %stage, failures = outcome.failures, "some items failed");
        }
        Ok(outcome)
    }

    fn interrupt_check(&self, stage: Stage, counter: &AtomicUsize) -> Result<()> {
        let n = counter.fetch_add(1, Ordering::SeqCst) + 1;
        match self.options.interrupt {
            Some(i) if i.stage == stage && i.after_units == n => {
                Err(Error::Interrupted { stage, shards: n })
            }
            _ => Ok(()),
        }
    }

    /// Whether a unit's latest ledger entry is `done` and its output still
    /// hashes as recorded. `input_hash` is compared when given.
    fn is_current(&self, stage: Stage, shard: Option<u32>, input_hash: Option<&str>, output_hash: Option<&str>) -> bool {
        let Some(e) = self.ledger.latest(stage, shard) else {
            return false;
        };
        e.status == EntryStatus::Done
            && input_hash.is_none_or(|h| e.input_hash == h)
            && output_hash.is_some()
            && e.output_hash.as_deref() == output_hash
    }

    fn shard_hash(&self, stage: Stage, shard: u32) -> Option<String> {
        file_sha256(&self.layout.shard_path(stage, shard)).ok()
    }

    /// Number of shards recorded by the last completed collect.
    pub fn num_shards(&self) -> Result<u32> {
        let e = self
            .ledger
            .latest(Stage::Collect, None)
            .filter(|e| e.status == EntryStatus::Done)
            .ok_or(Error::StageOrder {
                stage: Stage::Lid,
                reason: "collect has not completed".into(),
            })?;
        e.shards.ok_or_else(|| Error::invalid("collect ledger entry lacks a shard count"))
    }

    /// Fails unless `stage` is complete and intact on every shard.
    fn require_complete(&self, stage: Stage, for_stage: Stage) -> Result<u32> {
        let n = self.num_shards().map_err(|_| Error::StageOrder {
            stage: for_stage,
            reason: "collect has not completed".into(),
        })?;
        if stage == Stage::Collect {
            return Ok(n);
        }
        for i in 0..n {
            let h = self.shard_hash(stage, i);
            if !self.is_current(stage, Some(i), None, h.as_deref()) {
                return Err(Error::StageOrder {
                    stage: for_stage,
                    reason: format!("{stage} has not completed shard {i}"),
                });
            }
        }
        Ok(n)
    }

    fn stage_params(&self, stage: Stage) -> String {
        let v = match stage {
            Stage::Lid => serde_json::to_value(&self.config.lid),
            Stage::Segment => serde_json::to_value(self.config.segmentation),
            Stage::Package => serde_json::to_value(self.config.package_config()),
            _ => Ok(serde_json::Value::Null),
        };
        v.expect("config serializes").to_string()
    }

    fn per_shard(
        &self,
        stage: Stage,
        f: impl Fn(u32, Shard) -> Result<(Shard, usize)> + Sync,
    ) -> Result<StageOutcome> {
        let prev = stage.previous().expect("per-shard stages have a predecessor");
        let n = self.require_complete(prev, stage)?;
        let params = self.stage_params(stage);
        let counter = AtomicUsize::new(0);
        let stop = AtomicBool::new(false);
        let shards: Vec<u32> = (0..n).collect();
        let results = parallel_map(&shards, self.options.jobs, |&i| -> Result<(bool, usize)> {
            if stop.load(Ordering::SeqCst) {
                return Ok((false, 0));
            }
            let r = self.run_shard_unit(stage, prev, i, &params, &counter, &f);
            if r.is_err() {
                stop.store(true, Ordering::SeqCst);
            }
            r
        });
        let mut out = StageOutcome::new(stage);
        let mut first_err = None;
        for r in results {
            match r {
                Ok((true, failures)) => {
                    out.ran += 1;
                    out.failures += failures;
                }
                Ok((false, _)) => out.skipped += 1,
                Err(e) => {
                    if first_err.is_none() || matches!(e, Error::Interrupted { .. }) {
                        first_err = Some(e);
                    }
                }
            }
        }
        match first_err {
            Some(e) => Err(e),
            None => Ok(out),
        }
    }

    fn run_shard_unit(
        &self,
        stage: Stage,
        prev: Stage,
        i: u32,
        params: &str,
        counter: &AtomicUsize,
        f: &(impl Fn(u32, Shard) -> Result<(Shard, usize)> + Sync),
    ) -> Result<(bool, usize)> {
        let input = self.layout.shard_path(prev, i);
        let output = self.layout.shard_path(stage, i);
        let input_hash = hash_parts([file_sha256(&input)?.as_str(), params]);
        let out_hash = self.shard_hash(stage, i);
        if self.is_current(stage, Some(i), Some(&input_hash), out_hash.as_deref()) {
            return Ok((false, 0));
        }
        self.ledger.append(LedgerEntry {
            stage,
            shard: Some(i),
            status: EntryStatus::Running,
            input_hash: input_hash.clone(),
            output_hash: None,
            shards: None,
        })?;
        let shard = Shard::from_records(read_shard(&input)?);
        let segmentation = shard.header.as_ref().and_then(|h| h.segmentation);
        let (mut shard, failures) = f(i, shard)?;
        let mut header = ShardHeader::new(stage, i);
        header.segmentation = shard.header.as_ref().and_then(|h| h.segmentation).or(segmentation);
        shard.header = Some(header);
        let hash = write_shard(&output, &shard.into_records())?;
        self.interrupt_check(stage, counter)?;
        self.ledger.append(LedgerEntry {
            stage,
            shard: Some(i),
            status: EntryStatus::Done,
            input_hash,
            output_hash: Some(hash),
            shards: None,
        })?;
        Ok((true, failures))
    }

    fn search_sources(&self, seen: &mut HashSet<String>, out: &mut Vec<InventorySource>) -> Result<()> {
        let (Some(results), Some(titles)) = (&self.config.paths.search_results, &self.config.paths.titles_file)
        else {
            return Ok(());
        };
        let text = fs::read_to_string(titles).map_err(|e| Error::io(titles, e))?;
        let titles: Vec<String> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        let unique = titles.iter().collect::<HashSet<_>>().len();
        let n = self.config.collect.num_keywords.min(unique);
        if n < self.config.collect.num_keywords {
            tracing::warn!(requested = self.config.collect.num_keywords, available = n, "fewer titles than keywords");
        }
        let adapter = PreparedResults::from_file(results)?;
        for keyword in sample_keywords(&titles, n, self.config.seeds.keywords)? {
            for uri in adapter.search(&keyword)? {
                if seen.insert(uri.clone()) {
                    out.push(InventorySource::SearchResult {
                        keyword: keyword.clone(),
                        uri,
                    });
                }
            }
        }
        Ok(())
    }

    fn feed_sources(&self, seen: &mut HashSet<String>, out: &mut Vec<InventorySource>) -> Result<()> {
        let Some(list) = &self.config.paths.feed_list else {
            return Ok(());
        };
        let want = &self.config.collect.feed_language;
        let retry = self.config.collect.retry_policy();
        for (url, lang) in read_feed_list(list)? {
            if !want.is_empty() && &lang != want {
                continue;
            }
            let parsed = fetch_with_retry(self.fetcher.as_ref(), &url, &retry)
                .map_err(Error::from)
                .and_then(|p| fs::read(&p).map_err(|e| Error::io(&p, e)))
                .and_then(|bytes| parse_rss(&url, &bytes).map_err(Error::from));
            match parsed {
                Ok(enclosures) => {
                    for e in enclosures {
                        if seen.insert(e.enclosure_url.clone()) {
                            out.push(InventorySource::Enclosure(e));
                        }
                    }
                }
                Err(e) => tracing::warn!(feed = %url, error = %e, "skipping feed"),
            }
        }
        Ok(())
    }

    /// The collection input, in a deterministic order.
    pub fn collect_sources(&self) -> Result<Vec<InventorySource>> {
        let mut seen = HashSet::new();
        let mut out = Vec::new();
        self.search_sources(&mut seen, &mut out)?;
        self.feed_sources(&mut seen, &mut out)?;
        if let Some(dir) = &self.config.paths.local_audio_dir {
            for path in list_local_audio(dir)? {
                if seen.insert(path.display().to_string()) {
                    out.push(InventorySource::LocalFile { path });
                }
            }
        }
        Ok(out)
    }

    fn collect(&self) -> Result<StageOutcome> {
        let stage = Stage::Collect;
        let sources = self.collect_sources()?;
        let input_hash = hash_parts([
            sha256_hex(&serde_json::to_vec(&sources)?).as_str(),
            &self.config.shards.max_records.to_string(),
        ]);
        let mut out = StageOutcome::new(stage);
        if let Some(e) = self.ledger.latest(stage, None) {
            let current = e.status == EntryStatus::Done
                && e.input_hash == input_hash
                && e.shards.is_some_and(|n| {
                    let hashes: Option<Vec<String>> = (0..n).map(|i| self.shard_hash(stage, i)).collect();
                    hashes.is_some_and(|h| e.output_hash.as_deref() == Some(hash_parts(h.iter().map(String::as_str)).as_str()))
                });
            if current {
                out.skipped = 1;
                return Ok(out);
            }
        }
        self.ledger.append(LedgerEntry {
            stage,
            shard: None,
            status: EntryStatus::Running,
            input_hash: input_hash.clone(),
            output_hash: None,
            shards: None,
        })?;

        let docs = build_inventory(
            &sources,
            self.fetcher.as_ref(),
            self.prober.as_ref(),
            &self.config.collect.retry_policy(),
            self.config.collect.concurrency,
        );
        out.failures = docs.iter().filter(|d| d.status(stage) == StageStatus::Failed).count();
        let n = num_shards_for(docs.len(), self.config.shards.max_records);
        let mut shards: Vec<Shard> = (0..n).map(|_| Shard::default()).collect();
        for d in docs {
            shards[shard_of(&d.doc_id, n) as usize].documents.push(d);
        }
        let dir = self.layout.manifest_dir(stage);
        self.remove_stale_shards(&dir, n)?;
        let counter = AtomicUsize::new(0);
        let mut hashes = Vec::new();
        for (i, mut shard) in shards.into_iter().enumerate() {
            shard.header = Some(ShardHeader::new(stage, i as u32));
            hashes.push(write_shard(&self.layout.shard_path(stage, i as u32), &shard.into_records())?);
            self.interrupt_check(stage, &counter)?;
        }
        self.ledger.append(LedgerEntry {
            stage,
            shard: None,
            status: EntryStatus::Done,
            input_hash,
            output_hash: Some(hash_parts(hashes.iter().map(String::as_str))),
            shards: Some(n),
        })?;
        out.ran = 1;
        Ok(out)
    }

    fn remove_stale_shards(&self, dir: &Path, n: u32) -> Result<()> {
        let Ok(entries) = fs::read_dir(dir) else {
            return Ok(());
        };
        let keep: HashSet<String> = (0..n).map(shard_file_name).collect();
        for entry in entries {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            if name.starts_with("shard-") && !keep.contains(&name) {
                fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
        }
        Ok(())
    }

    fn lid_shard(&self, mut shard: Shard) -> Result<(Shard, usize)> {
        let cfg = &self.config.lid;
        let target = &cfg.filter.target_language;
        let backend = self.backends.get(Task::Lid)?;
        let eligible: Vec<usize> = (0..shard.documents.len())
            .filter(|&i| shard.documents[i].is_done(Stage::Collect))
            .collect();
        let requests = eligible
            .iter()
            .map(|&i| {
                let d = &shard.documents[i];
                WorkerRequest::lid(format!("lid:{}", d.doc_id), audio_path(d), target, cfg.window_s)
            })
            .collect();
        let responses = call_all(backend.as_ref(), requests, self.options.jobs);
        let mut results = HashMap::new();
        let mut failures = 0;
        for (&i, resp) in eligible.iter().zip(responses) {
            let doc = &mut shard.documents[i];
            let r = resp
                .into_payload::<LidPayload>()
                .and_then(|p| LanguageIdResult::new(doc.doc_id.clone(), p.probabilities, target));
            match r {
                Ok(r) => {
                    results.insert(doc.doc_id.clone(), r);
                }
                Err(e) => {
                    tracing::warn!(doc = %doc.doc_id, error = %e, "language id failed");
                    doc.mark_failed(Stage::Lid, e.to_string());
                    failures += 1;
                }
            }
        }
        let (scored, rest): (Vec<AudioDocument>, Vec<AudioDocument>) = shard
            .documents
            .into_iter()
            .partition(|d| results.contains_key(&d.doc_id));
        let part = filter_by_language(scored, &results, &cfg.filter)?;
        shard.documents = rest.into_iter().chain(part.retained).chain(part.rejected).collect();
        Ok((shard, failures))
    }

    fn diarize_shard(&self, mut shard: Shard) -> Result<(Shard, usize)> {
        let backend = self.backends.get(Task::Diarize)?;
        let eligible: Vec<usize> = (0..shard.documents.len())
            .filter(|&i| shard.documents[i].is_done(Stage::Lid))
            .collect();
        let requests = eligible
            .iter()
            .map(|&i| {
                let d = &shard.documents[i];
                WorkerRequest::diarize(format!("diarize:{}", d.doc_id), audio_path(d))
            })
            .collect();
        let responses = call_all(backend.as_ref(), requests, self.options.jobs);
        let mut failures = 0;
        for (&i, resp) in eligible.iter().zip(responses) {
            let doc = &mut shard.documents[i];
            let r = resp
                .into_payload::<DiarizePayload>()
                .and_then(|p| normalize_turns(doc, p.turns));
            match r {
                Ok(turns) => {
                    doc.mark(Stage::Diarize, StageStatus::Done);
                    shard.turns.push(TurnList {
                        doc_id: doc.doc_id.clone(),
                        turns,
                    });
                }
                Err(e) => {
                    tracing::warn!(doc = %doc.doc_id, error = %e, "diarization failed");
                    doc.mark_failed(Stage::Diarize, e.to_string());
                    failures += 1;
                }
            }
        }
        Ok((shard, failures))
    }

    fn segment_shard(&self, mut shard: Shard) -> Result<(Shard, usize)> {
        let cfg = self.config.segmentation;
        let turns: HashMap<String, Vec<DiarizationTurn>> =
            shard.turns.iter().map(|t| (t.doc_id.clone(), t.turns.clone())).collect();
        let mut failures = 0;
        for doc in shard.documents.iter_mut().filter(|d| d.is_done(Stage::Diarize)) {
            let Some(t) = turns.get(&doc.doc_id) else {
                doc.mark_failed(Stage::Segment, "no turn list recorded");
                failures += 1;
                continue;
            };
            match segment_document(doc, t, &cfg) {
                Ok(ds) => shard.dialogues.extend(ds),
                Err(e) => {
                    doc.mark_failed(Stage::Segment, e.to_string());
                    failures += 1;
                }
            }
        }
        let mut header = ShardHeader::new(Stage::Segment, 0);
        header.segmentation = Some(cfg);
        shard.header = Some(header);
        Ok((shard, failures))
    }

    fn cleanse_shard(&self, mut shard: Shard) -> Result<(Shard, usize)> {
        let backend = self.backends.get(Task::Enhance)?;
        let sources: HashMap<&str, String> = shard
            .documents
            .iter()
            .map(|d| (d.doc_id.as_str(), audio_path(d)))
            .collect();
        let eligible: Vec<usize> = (0..shard.dialogues.len())
            .filter(|&i| {
                let d = &shard.dialogues[i];
                d.rejection.is_none() && d.status(Stage::Segment) == StageStatus::Done
            })
            .collect();
        let enhanced = self.layout.enhanced_dir();
        let results = parallel_map(&eligible, self.options.jobs, |&i| {
            let d = &shard.dialogues[i];
            let src = sources
                .get(d.doc_id.as_str())
                .ok_or_else(|| Error::invalid(format!("document {} missing from shard", d.doc_id)))?;
            cleanse(d, Path::new(src), backend.as_ref(), &enhanced.join(format!("{}.wav", d.id())))
        });
        drop(sources);
        let mut failures = 0;
        for (&i, r) in eligible.iter().zip(results) {
            let d = &mut shard.dialogues[i];
            match r {
                Ok(path) => {
                    d.enhanced_path = Some(path.display().to_string());
                    d.stage_status.insert(Stage::Cleanse, StageStatus::Done);
                }
                Err(e) => {
                    tracing::warn!(dialogue = %d.id(), error = %e, "cleansing failed");
                    d.stage_status.insert(Stage::Cleanse, StageStatus::Failed);
                    d.failure = Some(e.to_string());
                    failures += 1;
                }
            }
        }
        Ok((shard, failures))
    }

    /// Dialogues that made it through cleansing, sorted by id.
    pub fn corpus_dialogues(&self) -> Result<Vec<Dialogue>> {
        let n = self.require_complete(Stage::Cleanse, Stage::Package)?;
        let mut out = Vec::new();
        for i in 0..n {
            let shard = Shard::from_records(read_shard(&self.layout.shard_path(Stage::Cleanse, i))?);
            out.extend(
                shard
                    .dialogues
                    .into_iter()
                    .filter(|d| is_corpus_dialogue(d) && d.status(Stage::Cleanse) == StageStatus::Done),
            );
        }
        out.sort_by_key(|d| d.id());
        Ok(out)
    }

    fn cleanse_input_hash(&self, n: u32, extra: &str) -> Result<String> {
        let mut parts = Vec::new();
        for i in 0..n {
            parts.push(file_sha256(&self.layout.shard_path(Stage::Cleanse, i))?);
        }
        parts.push(extra.to_string());
        Ok(hash_parts(parts.iter().map(String::as_str)))
    }

    fn package_stage(&self) -> Result<StageOutcome> {
        let stage = Stage::Package;
        let n = self.require_complete(Stage::Cleanse, stage)?;
        let input_hash = self.cleanse_input_hash(n, &self.stage_params(stage))?;
        let out_dir = &self.layout.output_dir;
        let mut out = StageOutcome::new(stage);
        let current_tree = out_dir.is_dir().then(|| tree_hash(out_dir)).transpose()?;
        if self.is_current(stage, None, Some(&input_hash), current_tree.as_deref()) {
            out.skipped = 1;
            return Ok(out);
        }
        self.ledger.append(LedgerEntry {
            stage,
            shard: None,
            status: EntryStatus::Running,
            input_hash: input_hash.clone(),
            output_hash: None,
            shards: None,
        })?;
        let summary = self.package_now()?;
        tracing::info!(train = summary.train, valid = summary.valid, test = summary.test, "packaged");
        let hash = tree_hash(out_dir)?;
        self.interrupt_check(stage, &AtomicUsize::new(0))?;
        self.ledger.append(LedgerEntry {
            stage,
            shard: None,
            status: EntryStatus::Done,
            input_hash,
            output_hash: Some(hash),
            shards: None,
        })?;
        out.ran = 1;
        Ok(out)
    }

    fn package_now(&self) -> Result<PackageSummary> {
        let dialogues = self.corpus_dialogues()?;
        package(&dialogues, &self.layout.output_dir, &self.config.package_config())
    }

    /// Corpus statistics over the cleansed dialogues.
    pub fn stats_report(&self) -> Result<StatsReport> {
        let dialogues = self.corpus_dialogues()?;
        Ok(StatsReport::from_dialogues(dialogues.iter()))
    }

    fn stats_stage(&self) -> Result<StageOutcome> {
        let stage = Stage::Stats;
        let n = self.require_complete(Stage::Cleanse, stage)?;
        let package_done = self
            .ledger
            .latest(Stage::Package, None)
            .filter(|e| e.status == EntryStatus::Done)
            .and_then(|e| e.output_hash)
            .ok_or(Error::StageOrder {
                stage,
                reason: "package has not completed".into(),
            })?;
        let input_hash = self.cleanse_input_hash(n, &package_done)?;
        let path = self.layout.stats_path();
        let mut out = StageOutcome::new(stage);
        let current = file_sha256(&path).ok();
        if self.is_current(stage, None, Some(&input_hash), current.as_deref()) {
            out.skipped = 1;
            return Ok(out);
        }
        self.ledger.append(LedgerEntry {
            stage,
            shard: None,
            status: EntryStatus::Running,
            input_hash: input_hash.clone(),
            output_hash: None,
            shards: None,
        })?;
        let report = self.stats_report()?;
        let mut bytes = serde_json::to_vec_pretty(&report)?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        self.interrupt_check(stage, &AtomicUsize::new(0))?;
        self.ledger.append(LedgerEntry {
            stage,
            shard: None,
            status: EntryStatus::Done,
            input_hash,
            output_hash: Some(sha256_hex(&bytes)),
            shards: None,
        })?;
        out.ran = 1;
        Ok(out)
    }

    /// Samples frame features from the cleansed dialogues and writes
    /// `<stem>.f32` and `<stem>.json`.
    pub fn features(&self, stem: &Path) -> Result<FeatureMatrix> {
        let dialogues = self.corpus_dialogues()?;
        let backend = self.backends.get(Task::Features)?;
        let spec = self.config.feature_spec();
        let matrix = sample_frame_features(
            &dialogues,
            |d| d.enhanced_path.clone(),
            &spec,
            backend.as_ref(),
            &self.layout.scratch_dir().join("features"),
        )?;
        write_feature_matrix(stem, &matrix, &spec)?;
        Ok(matrix)
    }

    pub fn funnel(&self) -> Result<FunnelReport> {
        funnel_report(&self.layout)
    }
}
