//! Resolving source URIs to local files.

use std::collections::HashMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::Duration;

use thiserror::Error;
use url::Url;

use crate::manifest::sha256_hex;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FetchError {
    /// Worth retrying (connection reset, 5xx, timeouts).
    #[error("transient fetch failure for {uri}: {message}")]
    Transient { uri: String, message: String },
    #[error("fetch failed for {uri}: {message}")]
    Permanent { uri: String, message: String },
}

impl FetchError {
    pub fn is_transient(&self) -> bool {
        matches!(self, FetchError::Transient { .. })
    }
}

pub trait Fetcher: Send + Sync {
    /// Makes `uri` available as a local file, returning its path.
    fn fetch(&self, uri: &str) -> Result<PathBuf, FetchError>;
}

/// Resolves URIs against a local directory. URLs map to
/// `<root>/<host>/<path>`, `file://` URLs and plain paths map to themselves
/// (relative paths are taken relative to the root).
#[derive(Debug, Clone)]
pub struct LocalFetcher {
    root: PathBuf,
}

impl LocalFetcher {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn resolve(&self, uri: &str) -> PathBuf {
        match Url::parse(uri) {
            Ok(u) if u.scheme() == "file" => u
                .to_file_path()
                .unwrap_or_else(|_| PathBuf::from(u.path())),
            Ok(u) => {
                let mut p = self.root.join(u.host_str().unwrap_or(""));
                for seg in u.path_segments().into_iter().flatten() {
                    p.push(seg);
                }
                p
            }
            Err(_) => self.root.join(uri),
        }
    }
}

impl Fetcher for LocalFetcher {
    fn fetch(&self, uri: &str) -> Result<PathBuf, FetchError> {
        let path = self.resolve(uri);
        if path.is_file() {
            Ok(path)
        } else {
            Err(FetchError::Permanent {
                uri: uri.to_string(),
                message: format!("{} not found", path.display()),
            })
        }
    }
}

/// Counting semaphore keyed by host.
#[derive(Debug, Default)]
struct HostLimiter {
    active: Mutex<HashMap<String, usize>>,
    freed: Condvar,
}

impl HostLimiter {
    fn acquire(&self, host: &str, cap: usize) {
        let mut active = self.active.lock().expect("limiter lock");
        while active.get(host).copied().unwrap_or(0) >= cap {
            active = self.freed.wait(active).expect("limiter lock");
        }
        *active.entry(host.to_string()).or_default() += 1;
    }

    fn release(&self, host: &str) {
        let mut active = self.active.lock().expect("limiter lock");
        if let Some(n) = active.get_mut(host) {
            *n = n.saturating_sub(1);
        }
        self.freed.notify_all();
    }
}

/// Downloads over HTTP(S) into a cache directory, at most
/// `per_host_limit` concurrent requests per host. Files already in the
/// cache are not downloaded again.
pub struct HttpFetcher {
    cache_dir: PathBuf,
    per_host_limit: usize,
    agent: ureq::Agent,
    limiter: HostLimiter,
}

impl HttpFetcher {
    pub fn new(cache_dir: impl Into<PathBuf>, per_host_limit: usize, timeout: Duration) -> Self {
        Self {
            cache_dir: cache_dir.into(),
            per_host_limit: per_host_limit.max(1),
            agent: ureq::AgentBuilder::new().timeout(timeout).build(),
            limiter: HostLimiter::default(),
        }
    }

    fn cache_path(&self, url: &Url) -> PathBuf {
        let ext = Path::new(url.path())
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| format!(".{}", e.to_ascii_lowercase()))
            .unwrap_or_default();
        self.cache_dir
            .join(format!("{}{ext}", &sha256_hex(url.as_str().as_bytes())[..24]))
    }

    fn download(&self, uri: &str, url: &Url, dest: &Path) -> Result<(), FetchError> {
        let transient = |message: String| FetchError::Transient {
            uri: uri.to_string(),
            message,
        };
        let resp = match self.agent.get(url.as_str()).call() {
            Ok(r) => r,
            Err(ureq::Error::Status(code, _)) if code >= 500 || code == 429 => {
                return Err(transient(format!("HTTP {code}")))
            }
            Err(ureq::Error::Status(code, _)) => {
                return Err(FetchError::Permanent {
                    uri: uri.to_string(),
                    message: format!("HTTP {code}"),
                })
            }
            Err(e) => return Err(transient(e.to_string())),
        };
        let io_err = |e: io::Error| transient(e.to_string());
        fs::create_dir_all(&self.cache_dir).map_err(io_err)?;
        let tmp = dest.with_extension("part");
        let mut file = fs::File::create(&tmp).map_err(io_err)?;
        io::copy(&mut resp.into_reader(), &mut file).map_err(io_err)?;
        file.sync_all().map_err(io_err)?;
        fs::rename(&tmp, dest).map_err(io_err)
    }
}

impl Fetcher for HttpFetcher {
    fn fetch(&self, uri: &str) -> Result<PathBuf, FetchError> {
        let url = Url::parse(uri).map_err(|e| FetchError::Permanent {
            uri: uri.to_string(),
            message: e.to_string(),
        })?;
        if !matches!(url.scheme(), "http" | "https") {
            return Err(FetchError::Permanent {
                uri: uri.to_string(),
                message: format!("unsupported scheme {}", url.scheme()),
            });
        }
        let dest = self.cache_path(&url);
        if dest.is_file() {
            return Ok(dest);
        }
        let host = url.host_str().unwrap_or("").to_string();
        self.limiter.acquire(&host, self.per_host_limit);
        let result = self.download(uri, &url, &dest);
        self.limiter.release(&host);
        result.map(|_| dest)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

/// Retries transient failures with exponential backoff
/// (`base_delay * 2^attempt`). Permanent failures return immediately.
pub fn fetch_with_retry(
    fetcher: &dyn Fetcher,
    uri: &str,
    policy: &RetryPolicy,
) -> Result<PathBuf, FetchError> {
    let attempts = policy.attempts.max(1);
    let mut last = None;
    for attempt in 0..attempts {
        match fetcher.fetch(uri) {
            Ok(p) => return Ok(p),
            Err(e) if e.is_transient() => {
                tracing::warn!(uri, attempt, error = %e, "fetch failed, retrying");
                last = Some(e);
                if attempt + 1 < attempts {
                    thread::sleep(policy.base_delay * 2u32.pow(attempt));
                }
            }
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}
