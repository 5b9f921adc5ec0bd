//! Deterministic stand-ins for the inference workers, driven by sidecar
//! files next to each audio file:
//!
//! - `<audio>.lid.json`: language → probability map
//! - `<audio>.turns.json`: list of `{speaker, start_s, end_s}`
//! - `<audio>.enhance_fail.json` (optional): excerpt start times for which
//!   enhancement fails
//!
//! Enhancement is the identity (an excerpt copy). Features are a hash of
//! the file name, window start and frame index, or all ones in `constant`
//! mode.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::audio::write_excerpt;
use crate::error::{Error, Result};
use crate::manifest::write_atomic;
use crate::model::{sort_turns, to_us, DiarizationTurn};
use crate::worker::protocol::{
    DiarizePayload, EnhancePayload, ErrorKind, FeaturesPayload, InferenceBackend, LidPayload, Task,
    WorkerRequest, WorkerResponse,
};

pub const DEFAULT_FEATURE_DIM: usize = 16;
/// 20 ms hop.
pub const FEATURE_FRAME_RATE_HZ: f64 = 50.0;

pub fn sidecar(audio_path: &Path, suffix: &str) -> PathBuf {
    let mut s = audio_path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn mock_lid(audio_path: &Path) -> Result<BTreeMap<String, f64>> {
    read_json(&sidecar(audio_path, ".lid.json"))
}

/// The sidecar turns, rounded to microseconds and sorted.
pub fn mock_diarize(audio_path: &Path) -> Result<Vec<DiarizationTurn>> {
    let raw: Vec<DiarizationTurn> = read_json(&sidecar(audio_path, ".turns.json"))?;
    let mut turns: Vec<DiarizationTurn> = raw
        .into_iter()
        .map(|t| DiarizationTurn::new(t.speaker, t.start_s, t.end_s))
        .collect();
    sort_turns(&mut turns);
    Ok(turns)
}

pub fn mock_enhance(audio_path: &Path, start_s: f64, end_s: f64, output: &Path) -> Result<()> {
    let fail_list = sidecar(audio_path, ".enhance_fail.json");
    if fail_list.is_file() {
        let starts: Vec<f64> = read_json(&fail_list)?;
        if starts.iter().any(|s| to_us(*s) == to_us(start_s)) {
            return Err(Error::Worker(format!(
                "enhancement failed for {} at {start_s}",
                audio_path.display()
            )));
        }
    }
    write_excerpt(audio_path, start_s, end_s, output)
}

/// Row-major f32 matrix of `frames × dim`.
pub fn mock_features_matrix(
    audio_path: &Path,
    start_s: f64,
    end_s: f64,
    dim: usize,
    constant: bool,
) -> (usize, Vec<f32>) {
    let frames = (((end_s - start_s) * FEATURE_FRAME_RATE_HZ).round() as usize).max(1);
    if constant {
        return (frames, vec![1.0; frames * dim]);
    }
    let name = audio_path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let mut data = Vec::with_capacity(frames * dim);
    for f in 0..frames {
        let mut block = 0u32;
        while data.len() < (f + 1) * dim {
            let digest = Sha256::digest(format!("{name}:{}:{f}:{block}", to_us(start_s)).as_bytes());
            for b in digest.iter().take((f + 1) * dim - data.len()) {
                data.push(*b as f32 / 127.5 - 1.0);
            }
            block += 1;
        }
    }
    (frames, data)
}

pub fn encode_f32_le(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|x| x.to_le_bytes()).collect()
}

pub fn decode_f32_le(bytes: &[u8]) -> Result<Vec<f32>> {
    if bytes.len() % 4 != 0 {
        return Err(Error::invalid("f32 matrix length is not a multiple of 4"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn run(req: &WorkerRequest) -> Result<WorkerResponse> {
    let audio = Path::new(&req.audio_path);
    if !audio.is_file() {
        return Err(Error::Worker(format!("audio {} does not exist", req.audio_path)));
    }
    let id = req.request_id.clone();
    Ok(match req.task {
        Task::Lid => WorkerResponse::ok(id, &LidPayload {
            probabilities: mock_lid(audio)?,
        }),
        Task::Diarize => WorkerResponse::ok(id, &DiarizePayload {
            turns: mock_diarize(audio)?,
        }),
        Task::Enhance => {
            let out = req.str_param("output_path")?;
            mock_enhance(audio, req.f64_param("start_s")?, req.f64_param("end_s")?, Path::new(out))?;
            WorkerResponse::ok(id, &EnhancePayload {
                output_path: out.to_string(),
            })
        }
        Task::Features => {
            let out = req.str_param("output_path")?;
            let dim = req
                .params
                .get("dim")
                .and_then(|v| v.as_u64())
                .map(|d| d as usize)
                .unwrap_or(DEFAULT_FEATURE_DIM);
            let constant = req.params.get("mode").and_then(|v| v.as_str()) == Some("constant");
            let (frames, data) = mock_features_matrix(
                audio,
                req.f64_param("start_s")?,
                req.f64_param("end_s")?,
                dim,
                constant,
            );
            write_atomic(Path::new(out), &encode_f32_le(&data))?;
            WorkerResponse::ok(id, &FeaturesPayload {
                matrix_path: out.to_string(),
                frames,
                dim,
            })
        }
    })
}

/// Answers one request; failures become `status = error` responses.
pub fn handle_request(req: &WorkerRequest) -> WorkerResponse {
    run(req).unwrap_or_else(|e| WorkerResponse::error(req.request_id.clone(), ErrorKind::Task, e.to_string()))
}

/// In-process mock backend.
#[derive(Debug, Clone)]
pub struct MockBackend {
    tasks: Vec<Task>,
}

impl MockBackend {
    pub fn new(tasks: Vec<Task>) -> Self {
        Self { tasks }
    }

    pub fn all() -> Self {
        Self::new(Task::ALL.to_vec())
    }
}

impl InferenceBackend for MockBackend {
    fn call(&self, request: WorkerRequest) -> WorkerResponse {
        if !self.tasks.contains(&request.task) {
            return WorkerResponse::error(
                request.request_id,
                ErrorKind::Task,
                format!("task {} not supported", request.task),
            );
        }
        handle_request(&request)
    }
}
