//! Subprocess worker pool.
//!
//! Each worker is a child process speaking the line protocol over stdio.
//! Requests are written under a per-worker lock; a reader thread per worker
//! routes responses back to waiting callers by `request_id`, so responses
//! may arrive in any order.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crate::error::{Error, Result};
use crate::worker::protocol::{
    to_line, ErrorKind, Hello, InferenceBackend, Task, WorkerRequest, WorkerResponse, PROTOCOL,
};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(600);
const HELLO_TIMEOUT: Duration = Duration::from_secs(30);
pub const WORKER_LOG_ENV: &str = "JCHAT_WORKER_LOG";

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerSpec {
    pub task: Task,
    /// Program followed by its arguments.
    pub command: Vec<String>,
    pub pool_size: usize,
    pub timeout: Duration,
    /// Passed to the worker as `JCHAT_WORKER_LOG`.
    pub log_path: Option<PathBuf>,
}

impl WorkerSpec {
    pub fn new(task: Task, command: Vec<String>) -> Self {
        Self {
            task,
            command,
            pool_size: 1,
            timeout: DEFAULT_TIMEOUT,
            log_path: None,
        }
    }
}

struct Shared {
    pending: Mutex<HashMap<String, Sender<WorkerResponse>>>,
    alive: AtomicBool,
    dropped: AtomicUsize,
}

impl Shared {
    /// Marks the worker dead and fails everything outstanding.
    fn fail_all(&self, kind: ErrorKind, message: &str) {
        let mut pending = self.pending.lock().expect("pending lock");
        self.alive.store(false, Ordering::SeqCst);
        for (id, tx) in pending.drain() {
            let _ = tx.send(WorkerResponse::error(id, kind, message));
        }
    }
}

struct WorkerProcess {
    index: usize,
    child: Mutex<Child>,
    stdin: Mutex<Option<ChildStdin>>,
    shared: Arc<Shared>,
}

impl WorkerProcess {
    fn spawn(spec: &WorkerSpec, index: usize) -> Result<Self> {
        let (program, args) = spec
            .command
            .split_first()
            .ok_or_else(|| Error::Config(format!("empty worker command for task {}", spec.task)))?;
        let mut cmd = Command::new(program);
        cmd.args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        if let Some(log) = &spec.log_path {
            if let Some(dir) = log.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            cmd.env(WORKER_LOG_ENV, log);
        }
        let mut child = cmd
            .spawn()
            .map_err(|e| Error::Worker(format!("cannot launch `{program}`: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = child.stdout.take().expect("piped stdout");

        let shared = Arc::new(Shared {
            pending: Mutex::new(HashMap::new()),
            alive: AtomicBool::new(true),
            dropped: AtomicUsize::new(0),
        });
        let (hello_tx, hello_rx) = mpsc::channel::<std::result::Result<Hello, String>>();
        let reader_shared = shared.clone();
        thread::Builder::new()
            .name(format!("{}-worker-{index}", spec.task))
            .spawn(move || read_loop(BufReader::new(stdout), reader_shared, hello_tx))
            .map_err(|e| Error::Worker(format!("cannot start reader thread: {e}")))?;

        let proc = WorkerProcess {
            index,
            child: Mutex::new(child),
            stdin: Mutex::new(Some(stdin)),
            shared,
        };
        let hello = match hello_rx.recv_timeout(HELLO_TIMEOUT) {
            Ok(Ok(h)) => h,
            Ok(Err(msg)) => {
                proc.kill();
                return Err(Error::Worker(format!("worker `{program}`: {msg}")));
            }
            Err(_) => {
                proc.kill();
                return Err(Error::Worker(format!("worker `{program}` sent no hello line")));
            }
        };
        if hello.protocol != PROTOCOL {
            proc.kill();
            return Err(Error::Worker(format!(
                "worker `{program}` speaks {}, expected {PROTOCOL}",
                hello.protocol
            )));
        }
        if !hello.tasks.contains(&spec.task) {
            proc.kill();
            return Err(Error::Worker(format!(
                "worker `{program}` does not offer task {}",
                spec.task
            )));
        }
        Ok(proc)
    }

    fn is_alive(&self) -> bool {
        self.shared.alive.load(Ordering::SeqCst)
    }

    fn kill(&self) {
        self.shared.fail_all(ErrorKind::WorkerDied, "worker killed");
        self.stdin.lock().expect("stdin lock").take();
        let mut child = self.child.lock().expect("child lock");
        let _ = child.kill();
        let _ = child.wait();
    }

    fn submit(&self, request: &WorkerRequest) -> std::result::Result<Receiver<WorkerResponse>, WorkerResponse> {
        let id = request.request_id.clone();
        let (tx, rx) = mpsc::channel();
        {
            let mut pending = self.shared.pending.lock().expect("pending lock");
            if !self.is_alive() {
                return Err(WorkerResponse::error(id, ErrorKind::WorkerDied, "worker is not running"));
            }
            if pending.contains_key(&id) {
                return Err(WorkerResponse::error(
                    id,
                    ErrorKind::Protocol,
                    "request_id already outstanding",
                ));
            }
            pending.insert(id.clone(), tx);
        }
        let mut stdin = self.stdin.lock().expect("stdin lock");
        let written = match stdin.as_mut() {
            Some(pipe) => pipe
                .write_all(to_line(request).as_bytes())
                .and_then(|_| pipe.flush())
                .map_err(|e| e.to_string()),
            None => Err("stdin closed".to_string()),
        };
        if let Err(e) = written {
            drop(stdin);
            self.shared.pending.lock().expect("pending lock").remove(&id);
            self.shared.fail_all(ErrorKind::WorkerDied, &format!("write failed: {e}"));
            return Err(WorkerResponse::error(id, ErrorKind::WorkerDied, e));
        }
        Ok(rx)
    }
}

impl Drop for WorkerProcess {
    fn drop(&mut self) {
        self.kill();
    }
}

fn read_loop(
    reader: impl BufRead,
    shared: Arc<Shared>,
    hello_tx: Sender<std::result::Result<Hello, String>>,
) {
    let mut lines = reader.lines();
    match lines.next() {
        Some(Ok(line)) => match serde_json::from_str::<Hello>(&line) {
            Ok(h) => {
                let _ = hello_tx.send(Ok(h));
            }
            Err(e) => {
                let _ = hello_tx.send(Err(format!("bad hello line: {e}")));
                shared.fail_all(ErrorKind::Protocol, "bad hello line");
                return;
            }
        },
        _ => {
            let _ = hello_tx.send(Err("exited before hello".into()));
            shared.fail_all(ErrorKind::WorkerDied, "exited before hello");
            return;
        }
    }

    for line in lines {
        let line = match line {
            Ok(l) => l,
            Err(_) => break,
        };
        if line.trim().is_empty() {
            continue;
        }
        let resp: WorkerResponse = match serde_json::from_str(&line) {
            Ok(r) => r,
            Err(e) => {
                tracing::error!(error = %e, "malformed worker response; quarantining worker");
                shared.fail_all(ErrorKind::Protocol, &format!("malformed response line: {e}"));
                return;
            }
        };
        let waiter = shared.pending.lock().expect("pending lock").remove(&resp.request_id);
        match waiter {
            Some(tx) => {
                let _ = tx.send(resp);
            }
            None => {
                shared.dropped.fetch_add(1, Ordering::SeqCst);
                tracing::warn!(request_id = %resp.request_id, "dropping duplicate or unknown response");
            }
        }
    }
    shared.fail_all(ErrorKind::WorkerDied, "worker exited");
}

/// A submitted request; `wait` blocks for its response or the timeout.
pub struct Ticket {
    request_id: String,
    rx: std::result::Result<Receiver<WorkerResponse>, WorkerResponse>,
    shared: Option<Arc<Shared>>,
    timeout: Duration,
}

impl Ticket {
    pub fn wait(self) -> WorkerResponse {
        let rx = match self.rx {
            Ok(rx) => rx,
            Err(resp) => return resp,
        };
        match rx.recv_timeout(self.timeout) {
            Ok(resp) => resp,
            Err(RecvTimeoutError::Timeout) => {
                if let Some(shared) = &self.shared {
                    shared.pending.lock().expect("pending lock").remove(&self.request_id);
                }
                WorkerResponse::error(
                    self.request_id,
                    ErrorKind::Timeout,
                    format!("no response within {:?}", self.timeout),
                )
            }
            Err(RecvTimeoutError::Disconnected) => {
                WorkerResponse::error(self.request_id, ErrorKind::WorkerDied, "worker went away")
            }
        }
    }
}

/// Fixed-size pool of workers for one task. Requests go to live workers
/// in round-robin order; each worker handles its queue first in, first out.
pub struct WorkerPool {
    task: Task,
    workers: Vec<WorkerProcess>,
    next: AtomicUsize,
    timeout: Duration,
}

impl WorkerPool {
    pub fn spawn(spec: &WorkerSpec) -> Result<Self> {
        let workers = (0..spec.pool_size.max(1))
            .map(|i| WorkerProcess::spawn(spec, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            task: spec.task,
            workers,
            next: AtomicUsize::new(0),
            timeout: spec.timeout,
        })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn size(&self) -> usize {
        self.workers.len()
    }

    pub fn live_workers(&self) -> usize {
        self.workers.iter().filter(|w| w.is_alive()).count()
    }

    /// Responses that matched no outstanding request (duplicates, late
    /// arrivals after a timeout).
    pub fn dropped_responses(&self) -> usize {
        self.workers
            .iter()
            .map(|w| w.shared.dropped.load(Ordering::SeqCst))
            .sum()
    }

    /// Kills one worker process; its outstanding requests fail with
    /// `worker_died`.
    pub fn kill_worker(&self, index: usize) {
        if let Some(w) = self.workers.get(index) {
            w.kill();
        }
    }

    pub fn submit(&self, request: WorkerRequest) -> Ticket {
        let id = request.request_id.clone();
        if request.task != self.task {
            return Ticket {
                request_id: id.clone(),
                rx: Err(WorkerResponse::error(
                    id,
                    ErrorKind::Protocol,
                    format!("{} request sent to {} pool", request.task, self.task),
                )),
                shared: None,
                timeout: self.timeout,
            };
        }
        let n = self.workers.len();
        let start = self.next.fetch_add(1, Ordering::SeqCst);
        let worker = (0..n)
            .map(|k| &self.workers[(start + k) % n])
            .find(|w| w.is_alive());
        match worker {
            None => Ticket {
                request_id: id.clone(),
                rx: Err(WorkerResponse::error(id, ErrorKind::WorkerDied, "no live workers in pool")),
                shared: None,
                timeout: self.timeout,
            },
            Some(w) => {
                tracing::debug!(request_id = %id, worker = w.index, "dispatch");
                Ticket {
                    request_id: id,
                    rx: w.submit(&request),
                    shared: Some(w.shared.clone()),
                    timeout: self.timeout,
                }
            }
        }
    }

    pub fn send_request(&self, request: WorkerRequest) -> WorkerResponse {
        self.submit(request).wait()
    }
}

impl InferenceBackend for WorkerPool {
    fn call(&self, request: WorkerRequest) -> WorkerResponse {
        self.send_request(request)
    }
}
