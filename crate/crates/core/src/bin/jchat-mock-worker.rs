//! Mock inference worker speaking `jchat-worker/1` on stdio. Answers from
//! sidecar files; see `jchat_core::worker::mock`.

use std::fs::OpenOptions;
use std::io::{self, BufRead, Write};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use clap::Parser;
use jchat_core::worker::mock::handle_request;
use jchat_core::worker::protocol::{to_line, ErrorKind, Hello, Task, WorkerRequest, WorkerResponse};
use jchat_core::worker::WORKER_LOG_ENV;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(about = "Deterministic mock worker for the jchat pipeline")]
struct Args {
    /// Comma-separated tasks to advertise.
    #[arg(long, value_delimiter = ',', default_value = "lid,diarize,enhance,features")]
    tasks: Vec<String>,
    /// Exit without answering once this many requests have been read.
    #[arg(long)]
    exit_after: Option<usize>,
    /// Emit a garbage line instead of the response to this request number (1-based).
    #[arg(long)]
    malformed_at: Option<usize>,
    /// Send every response twice.
    #[arg(long)]
    duplicate: bool,
    /// Answer each request on its own thread after a pseudo-random delay of
    /// up to this many milliseconds, so responses come back out of order.
    #[arg(long)]
    jitter_ms: Option<u64>,
    /// Sleep this long before answering each request.
    #[arg(long)]
    delay_ms: Option<u64>,
}

fn log(msg: &str) {
    if let Ok(path) = std::env::var(WORKER_LOG_ENV) {
        if let Ok(mut f) = OpenOptions::new().create(true).append(true).open(path) {
            let _ = writeln!(f, "{msg}");
        }
    }
}

fn emit(out: &Mutex<io::Stdout>, line: &str, times: usize) {
    let mut out = out.lock().expect("stdout lock");
    for _ in 0..times {
        let _ = out.write_all(line.as_bytes());
    }
    let _ = out.flush();
}

fn main() {
    let args = Args::parse();
    let tasks: Vec<Task> = match args.tasks.iter().map(|t| t.parse()).collect() {
        Ok(t) => t,
        Err(e) => {
            eprintln!("{e}");
            println!("{}", serde_json::json!({"protocol": jchat_core::worker::PROTOCOL, "tasks": []}));
            std::process::exit(3);
        }
    };
    let out = Arc::new(Mutex::new(io::stdout()));
    emit(&out, &to_line(&Hello::new(tasks.clone())), 1);
    log("mock worker started");

    let times = if args.duplicate { 2 } else { 1 };
    let mut handles = Vec::new();
    for (n, line) in io::stdin().lock().lines().enumerate() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        if args.exit_after.is_some_and(|k| n >= k) {
            log("exiting early");
            std::process::exit(1);
        }
        if args.malformed_at == Some(n + 1) {
            emit(&out, "{this is not json\n", 1);
            continue;
        }
        let response_line = match serde_json::from_str::<WorkerRequest>(&line) {
            Ok(req) if !tasks.contains(&req.task) => to_line(&WorkerResponse::error(
                req.request_id,
                ErrorKind::Task,
                format!("task {} not offered", req.task),
            )),
            Ok(req) => {
                log(&format!("request {}", req.request_id));
                if let Some(ms) = args.jitter_ms {
                    let out = out.clone();
                    let digest = Sha256::digest(req.request_id.as_bytes());
                    let delay = u64::from(digest[0]) % (ms + 1);
                    handles.push(thread::spawn(move || {
                        thread::sleep(Duration::from_millis(delay));
                        emit(&out, &to_line(&handle_request(&req)), times);
                    }));
                    continue;
                }
                if let Some(ms) = args.delay_ms {
                    thread::sleep(Duration::from_millis(ms));
                }
                to_line(&handle_request(&req))
            }
            Err(e) => {
                log(&format!("unparseable request: {e}"));
                continue;
            }
        };
        emit(&out, &response_line, times);
    }
    for h in handles {
        let _ = h.join();
    }
}
