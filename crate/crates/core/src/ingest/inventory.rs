use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use serde::{Deserialize, Serialize};

use crate::audio::{probe_wav, AudioInfo};
use crate::error::Result;
use crate::ingest::fetch::{fetch_with_retry, Fetcher, RetryPolicy};
use crate::ingest::rss::EnclosureRecord;
use crate::manifest::sha256_hex;
use crate::model::{AudioDocument, Source, Stage, StageStatus};

/// One entry of the collection input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum InventorySource {
    Enclosure(EnclosureRecord),
    SearchResult { keyword: String, uri: String },
    LocalFile { path: PathBuf },
}

impl InventorySource {
    pub fn source(&self) -> Source {
        match self {
            InventorySource::Enclosure(_) => Source::Podcast,
            InventorySource::SearchResult { .. } => Source::Youtube,
            InventorySource::LocalFile { .. } => Source::Local,
        }
    }

    pub fn uri(&self) -> String {
        match self {
            InventorySource::Enclosure(e) => e.enclosure_url.clone(),
            InventorySource::SearchResult { uri, .. } => uri.clone(),
            InventorySource::LocalFile { path } => path.display().to_string(),
        }
    }
}

pub trait Prober: Send + Sync {
    fn probe(&self, path: &Path) -> Result<AudioInfo>;
}

/// Header-only WAV prober.
#[derive(Debug, Clone, Copy, Default)]
pub struct WavProber;

impl Prober for WavProber {
    fn probe(&self, path: &Path) -> Result<AudioInfo> {
        probe_wav(path)
    }
}

pub fn doc_id_for(source: Source, uri: &str) -> String {
    format!("{}-{}", source, &sha256_hex(uri.as_bytes())[..16])
}

fn resolve(
    src: &InventorySource,
    fetcher: &dyn Fetcher,
    prober: &dyn Prober,
    retry: &RetryPolicy,
) -> std::result::Result<(PathBuf, AudioInfo), String> {
    let path = match src {
        InventorySource::LocalFile { path } => path.clone(),
        _ => fetch_with_retry(fetcher, &src.uri(), retry).map_err(|e| e.to_string())?,
    };
    let info = prober.probe(&path).map_err(|e| e.to_string())?;
    Ok((path, info))
}

/// Fetches and probes every source, using up to `concurrency` threads.
/// Output order follows input order; failures become documents with
/// `collect = failed` so that no source is dropped. Repeated URIs get a
/// numeric suffix on their id.
pub fn build_inventory(
    sources: &[InventorySource],
    fetcher: &dyn Fetcher,
    prober: &dyn Prober,
    retry: &RetryPolicy,
    concurrency: usize,
) -> Vec<AudioDocument> {
    let results: Mutex<Vec<Option<std::result::Result<(PathBuf, AudioInfo), String>>>> =
        Mutex::new(vec![None; sources.len()]);
    let next = AtomicUsize::new(0);
    thread::scope(|s| {
        for _ in 0..concurrency.clamp(1, sources.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(src) = sources.get(i) else { break };
                let r = resolve(src, fetcher, prober, retry);
                results.lock().expect("results lock")[i] = Some(r);
            });
        }
    });

    let mut id_uses: HashMap<String, usize> = HashMap::new();
    sources
        .iter()
        .zip(results.into_inner().expect("results lock"))
        .map(|(src, result)| {
            let source = src.source();
            let uri = src.uri();
            let base_id = doc_id_for(source, &uri);
            let n = id_uses.entry(base_id.clone()).or_default();
            let doc_id = if *n == 0 { base_id } else { format!("{base_id}-{n}") };
            *n += 1;
            let mut doc = AudioDocument {
                doc_id,
                source,
                uri,
                local_path: None,
                duration_s: 0.0,
                sample_rate_hz: 0,
                channels: 0,
                stage_status: BTreeMap::new(),
                failure: None,
                p_target: None,
            };
            match result.expect("every index processed") {
                Ok((path, info)) => {
                    doc.local_path = Some(path.display().to_string());
                    doc.duration_s = info.duration_s;
                    doc.sample_rate_hz = info.sample_rate_hz;
                    doc.channels = info.channels;
                    doc.mark(Stage::Collect, StageStatus::Done);
                }
                Err(reason) => {
                    tracing::warn!(uri = %doc.uri, %reason, "collect failed");
                    doc.mark_failed(Stage::Collect, reason);
                }
            }
            doc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::write_tone;
    use crate::ingest::fetch::LocalFetcher;

    #[test]
    fn probes_local_fixtures() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.wav");
        let b = dir.path().join("b.wav");
        // 3 s and 5 s at 8 kHz: 24,000 and 40,000 frames
        write_tone(&a, 8_000, 3.0, 300.0).unwrap();
        write_tone(&b, 8_000, 5.0, 300.0).unwrap();
        let sources = vec![
            InventorySource::LocalFile { path: a },
            InventorySource::LocalFile { path: b },
        ];
        let docs = build_inventory(
            &sources,
            &LocalFetcher::new(dir.path()),
            &WavProber,
            &RetryPolicy::default(),
            2,
        );
        assert_eq!(docs.len(), 2);
        assert!((docs[0].duration_s - 3.0).abs() <= 0.01);
        assert!((docs[1].duration_s - 5.0).abs() <= 0.01);
        assert!(docs.iter().all(|d| d.is_done(Stage::Collect)));
    }

    #[test]
    fn empty_sources() {
        let docs = build_inventory(
            &[],
            &LocalFetcher::new("/"),
            &WavProber,
            &RetryPolicy::default(),
            4,
        );
        assert!(docs.is_empty());
    }

    #[test]
    fn failures_are_isolated() {
        let dir = tempfile::tempdir().unwrap();
        let host = dir.path().join("pod.example.jp");
        std::fs::create_dir_all(&host).unwrap();
        write_tone(&host.join("ok.wav"), 8_000, 1.0, 300.0).unwrap();
        let enc = |name: &str| {
            InventorySource::Enclosure(EnclosureRecord {
                feed_url: "https://pod.example.jp/feed.xml".into(),
                item_guid: name.into(),
                enclosure_url: format!("https://pod.example.jp/{name}"),
                mime_type: "audio/wav".into(),
                declared_length_bytes: None,
            })
        };
        let sources = vec![enc("ok.wav"), enc("missing.wav")];
        let docs = build_inventory(
            &sources,
            &LocalFetcher::new(dir.path()),
            &WavProber,
            &RetryPolicy::default(),
            2,
        );
        assert_eq!(docs.len(), 2);
        assert_eq!(docs[0].status(Stage::Collect), StageStatus::Done);
        assert_eq!(docs[1].status(Stage::Collect), StageStatus::Failed);
        assert!(docs[1].failure.as_deref().unwrap().contains("not found"));
        assert_eq!(docs[0].source, Source::Podcast);
    }

    #[test]
    fn duplicate_uris_get_distinct_ids() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.wav");
        write_tone(&a, 8_000, 1.0, 300.0).unwrap();
        let s = InventorySource::LocalFile { path: a };
        let docs = build_inventory(
            &[s.clone(), s],
            &LocalFetcher::new(dir.path()),
            &WavProber,
            &RetryPolicy::default(),
            1,
        );
        assert_ne!(docs[0].doc_id, docs[1].doc_id);
    }
}
