//! Building the document inventory from search results, podcast feeds and
//! local files.

pub mod fetch;
pub mod inventory;
pub mod keywords;
pub mod rss;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use fetch::{fetch_with_retry, FetchError, Fetcher, HttpFetcher, LocalFetcher, RetryPolicy};
pub use inventory::{build_inventory, doc_id_for, InventorySource, Prober, WavProber};
pub use keywords::sample_keywords;
pub use rss::{parse_rss, EnclosureRecord, FeedRecord, RssError};

/// Expands a search keyword into candidate media URIs.
pub trait SourceAdapter: Send + Sync {
    fn search(&self, keyword: &str) -> Result<Vec<String>>;
}

/// Serves search results from a prepared JSON file mapping each keyword to
/// a list of URIs. Unknown keywords yield no results.
#[derive(Debug, Clone, Default)]
pub struct PreparedResults {
    results: BTreeMap<String, Vec<String>>,
}

impl PreparedResults {
    pub fn new(results: BTreeMap<String, Vec<String>>) -> Self {
        Self { results }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let results = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })?;
        Ok(Self { results })
    }
}

impl SourceAdapter for PreparedResults {
    fn search(&self, keyword: &str) -> Result<Vec<String>> {
        Ok(self.results.get(keyword).cloned().unwrap_or_default())
    }
}

/// Reads a feed list: one `url<TAB>language` pair per line; blank lines and
/// `#` comments are ignored. A line without a language column gets an empty
/// label.
pub fn read_feed_list(path: &Path) -> Result<Vec<(String, String)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split('\t');
        let url = cols.next().unwrap_or_default().trim().to_string();
        if url::Url::parse(&url).is_err() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: format!("feed URL `{url}` is not absolute"),
            });
        }
        let lang = cols.next().unwrap_or_default().trim().to_string();
        out.push((url, lang));
    }
    Ok(out)
}

/// Lists `.wav` files directly under `dir`, sorted.
pub fn list_local_audio(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}
