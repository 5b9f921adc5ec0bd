//! Python bindings. Structured results come back as plain dicts and lists.

use std::path::PathBuf;

use jchat_core::analytics::{compute_manifest_stats, SubsetFilter};
use jchat_core::ingest::{parse_rss as parse_feed, sample_keywords as sample};
use jchat_core::manifest::{validate_manifest as validate, CorpusManifest};
use jchat_core::package::{assign_channels as channels, split_dataset as split, SplitSpec};
use jchat_core::pipeline::{Pipeline, PipelineConfig, RunOptions};
use jchat_core::segment::{rejection_reason, speaker_dominance as dominance, split_into_dialogues as split_turns};
use jchat_core::{Dialogue, DiarizationTurn, Error, SegmentationConfig, Source};
use pyo3::exceptions::{PyOSError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

fn to_py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::InvalidArgument(_) | Error::Config(_) | Error::Parse { .. } => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn to_py<'py>(py: Python<'py>, value: &impl Serialize) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn turns_of(turns: Vec<(String, f64, f64)>) -> Vec<DiarizationTurn> {
    let mut t: Vec<DiarizationTurn> = turns
        .into_iter()
        .map(|(s, a, b)| DiarizationTurn::new(s, a, b))
        .collect();
    jchat_core::model::sort_turns(&mut t);
    t
}

fn source_of(name: &str) -> PyResult<Source> {
    name.parse().map_err(|_| PyValueError::new_err(format!("unknown source {name:?}")))
}

fn one_dialogue(turns: Vec<(String, f64, f64)>) -> PyResult<Dialogue> {
    Dialogue::from_turns("py", Source::Local, 0, turns_of(turns)).map_err(to_py_err)
}

/// Splits `(speaker, start_s, end_s)` turns into dialogues. Each dialogue
/// dict carries a `rejection` key unless it passes the filter.
#[pyfunction]
#[pyo3(signature = (turns, doc_id = "doc", source = "local", gap_threshold_s = 5.0, dominance_threshold = 0.8, min_speakers = 2))]
fn split_into_dialogues<'py>(
    py: Python<'py>,
    turns: Vec<(String, f64, f64)>,
    doc_id: &str,
    source: &str,
    gap_threshold_s: f64,
    dominance_threshold: f64,
    min_speakers: usize,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = SegmentationConfig {
        gap_threshold_s,
        dominance_threshold,
        min_speakers,
    };
    let mut out = split_turns(doc_id, source_of(source)?, &turns_of(turns), &cfg).map_err(to_py_err)?;
    for d in &mut out {
        d.rejection = rejection_reason(d, &cfg).map_err(to_py_err)?;
    }
    to_py(py, &out)
}

#[pyfunction]
fn speaker_dominance<'py>(py: Python<'py>, turns: Vec<(String, f64, f64)>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &dominance(&one_dialogue(turns)?).map_err(to_py_err)?)
}

#[pyfunction]
fn assign_channels<'py>(py: Python<'py>, turns: Vec<(String, f64, f64)>) -> PyResult<Bound<'py, PyAny>> {
    to_py(py, &channels(&one_dialogue(turns)?).map_err(to_py_err)?)
}

/// Audio enclosures of an RSS 2.0 or Atom document.
#[pyfunction]
fn parse_rss<'py>(py: Python<'py>, feed_url: &str, data: &[u8]) -> PyResult<Bound<'py, PyAny>> {
    let records = parse_feed(feed_url, data).map_err(|e| PyValueError::new_err(e.to_string()))?;
    to_py(py, &records)
}

#[pyfunction]
fn sample_keywords(titles: Vec<String>, n: usize, seed: u64) -> PyResult<Vec<String>> {
    sample(&titles, n, seed).map_err(to_py_err)
}

/// Seeded split with exact valid and test counts; returns
/// `(train, valid, test)`.
#[pyfunction]
fn split_dataset(items: Vec<String>, valid: usize, test: usize, seed: u64) -> PyResult<(Vec<String>, Vec<String>, Vec<String>)> {
    let train = items.len().saturating_sub(valid + test);
    let s = split(&items, &SplitSpec::counts(train, valid, test, seed)).map_err(to_py_err)?;
    Ok((s.train, s.valid, s.test))
}

/// Statistics over the corpus dialogues in a manifest directory.
#[pyfunction]
#[pyo3(signature = (manifest_dir, source = None))]
fn subset_stats<'py>(py: Python<'py>, manifest_dir: PathBuf, source: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
    let filter = match source {
        None => SubsetFilter::All,
        Some(s) => SubsetFilter::Source(source_of(s)?),
    };
    let manifest = CorpusManifest::from_dir(&manifest_dir).map_err(to_py_err)?;
    to_py(py, &compute_manifest_stats(&manifest, filter).map_err(to_py_err)?)
}

/// Schema violations as `(record_id, field, rule)` tuples.
#[pyfunction]
fn validate_manifest(manifest_dir: PathBuf) -> PyResult<Vec<(String, String, String)>> {
    let manifest = CorpusManifest::from_dir(&manifest_dir).map_err(to_py_err)?;
    let report = validate(&manifest).map_err(to_py_err)?;
    Ok(report
        .violations
        .into_iter()
        .map(|v| (v.record_id, v.field, v.rule))
        .collect())
}

/// Runs every pending stage for a config file and returns the funnel.
#[pyfunction]
#[pyo3(signature = (config_path, jobs = None))]
fn run_pipeline<'py>(py: Python<'py>, config_path: PathBuf, jobs: Option<usize>) -> PyResult<Bound<'py, PyAny>> {
    let config = PipelineConfig::load(&config_path).map_err(to_py_err)?;
    let mut options = RunOptions::default();
    if let Some(j) = jobs {
        options.jobs = j.max(1);
    }
    let funnel = py
        .detach(|| {
            let p = Pipeline::new(config, options)?;
            p.run_all()?;
            p.funnel()
        })
        .map_err(to_py_err)?;
    to_py(py, &funnel)
}

#[pymodule]
fn jchat(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(split_into_dialogues, m)?)?;
    m.add_function(wrap_pyfunction!(speaker_dominance, m)?)?;
    m.add_function(wrap_pyfunction!(assign_channels, m)?)?;
    m.add_function(wrap_pyfunction!(parse_rss, m)?)?;
    m.add_function(wrap_pyfunction!(sample_keywords, m)?)?;
    m.add_function(wrap_pyfunction!(split_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(subset_stats, m)?)?;
    m.add_function(wrap_pyfunction!(validate_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(run_pipeline, m)?)?;
    Ok(())
}
