//! Corpus statistics and frame-feature sampling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::manifest::{write_atomic, CorpusManifest};
use crate::model::{round_us, to_us, Dialogue, Source, StageStatus};
use crate::worker::mock::{decode_f32_le, encode_f32_le};
use crate::worker::protocol::{FeaturesPayload, InferenceBackend, WorkerRequest};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub subset: String,
    /// Summed wall-clock dialogue spans.
    pub total_hours: f64,
    /// Summed turn durations.
    pub total_speech_hours: f64,
    pub num_dialogues: u64,
    pub avg_dialogue_duration_s: f64,
    pub avg_turns_per_dialogue: f64,
    pub avg_speakers_per_dialogue: f64,
}

/// Integer sums behind [`SubsetStats`]; merging is exact, so the result
/// does not depend on the order dialogues or shards are folded in.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StatsAccumulator {
    pub dialogues: u64,
    pub span_us: i64,
    pub speech_us: i64,
    pub turns: u64,
    pub speakers: u64,
}

impl StatsAccumulator {
    pub fn add(&mut self, d: &Dialogue) {
        self.dialogues += 1;
        self.span_us += to_us(d.end_s) - to_us(d.start_s);
        self.speech_us += d.turns.iter().map(|t| t.duration_us()).sum::<i64>();
        self.turns += d.turns.len() as u64;
        self.speakers += d.speakers.len() as u64;
    }

    pub fn merge(&mut self, other: &StatsAccumulator) {
        self.dialogues += other.dialogues;
        self.span_us += other.span_us;
        self.speech_us += other.speech_us;
        self.turns += other.turns;
        self.speakers += other.speakers;
    }

    pub fn finish(&self, subset: impl Into<String>) -> SubsetStats {
        let n = self.dialogues as f64;
        let mean = |x: f64| if self.dialogues == 0 { 0.0 } else { x / n };
        SubsetStats {
            subset: subset.into(),
            total_hours: self.span_us as f64 / 3.6e9,
            total_speech_hours: self.speech_us as f64 / 3.6e9,
            num_dialogues: self.dialogues,
            avg_dialogue_duration_s: mean(self.span_us as f64 / 1e6),
            avg_turns_per_dialogue: mean(self.turns as f64),
            avg_speakers_per_dialogue: mean(self.speakers as f64),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SubsetFilter {
    All,
    Source(Source),
}

impl SubsetFilter {
    pub fn name(&self) -> &'static str {
        match self {
            SubsetFilter::All => "all",
            SubsetFilter::Source(s) => s.as_str(),
        }
    }

    pub fn matches(&self, d: &Dialogue) -> bool {
        match self {
            SubsetFilter::All => true,
            SubsetFilter::Source(s) => d.source == *s,
        }
    }
}

pub fn compute_subset_stats<'a>(
    dialogues: impl IntoIterator<Item = &'a Dialogue>,
    filter: SubsetFilter,
) -> SubsetStats {
    let mut acc = StatsAccumulator::default();
    for d in dialogues.into_iter().filter(|d| filter.matches(d)) {
        acc.add(d);
    }
    acc.finish(filter.name())
}

/// A dialogue counts towards corpus statistics if it was retained and has
/// not failed at any later stage.
pub fn is_corpus_dialogue(d: &Dialogue) -> bool {
    d.rejection.is_none()
        && !d
            .stage_status
            .values()
            .any(|s| matches!(s, StageStatus::Failed | StageStatus::Rejected))
}

/// Stats over the corpus dialogues of a manifest, folded shard by shard.
pub fn compute_manifest_stats(manifest: &CorpusManifest, filter: SubsetFilter) -> Result<SubsetStats> {
    let mut acc = StatsAccumulator::default();
    for shard in manifest.load()? {
        let mut part = StatsAccumulator::default();
        for d in shard.dialogues.iter().filter(|d| is_corpus_dialogue(d) && filter.matches(d)) {
            part.add(d);
        }
        acc.merge(&part);
    }
    Ok(acc.finish(filter.name()))
}

/// Ratio of average dialogue durations, `numerator / denominator`.
pub fn duration_ratio(numerator: &SubsetStats, denominator: &SubsetStats) -> Option<f64> {
    (numerator.num_dialogues > 0 && denominator.num_dialogues > 0 && denominator.avg_dialogue_duration_s > 0.0)
        .then(|| numerator.avg_dialogue_duration_s / denominator.avg_dialogue_duration_s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub subsets: Vec<SubsetStats>,
    pub all: SubsetStats,
    /// Average podcast dialogue duration over average YouTube duration.
    pub podcast_to_youtube_duration_ratio: Option<f64>,
}

impl StatsReport {
    pub fn from_dialogues<'a>(dialogues: impl IntoIterator<Item = &'a Dialogue> + Clone) -> Self {
        let subsets: Vec<SubsetStats> = Source::ALL
            .iter()
            .map(|s| compute_subset_stats(dialogues.clone(), SubsetFilter::Source(*s)))
            .collect();
        let by_name: BTreeMap<&str, &SubsetStats> =
            subsets.iter().map(|s| (s.subset.as_str(), s)).collect();
        let ratio = duration_ratio(by_name["podcast"], by_name["youtube"]);
        Self {
            all: compute_subset_stats(dialogues, SubsetFilter::All),
            subsets,
            podcast_to_youtube_duration_ratio: ratio,
        }
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<8} {:>12} {:>12} {:>10} {:>10} {:>8} {:>9}",
            "subset", "hours", "speech_h", "dialogues", "avg_dur_s", "turns", "speakers"
        );
        for st in self.subsets.iter().chain([&self.all]) {
            let _ = writeln!(
                s,
                "{:<8} {:>12.6} {:>12.6} {:>10} {:>10.2} {:>8.2} {:>9.2}",
                st.subset,
                st.total_hours,
                st.total_speech_hours,
                st.num_dialogues,
                st.avg_dialogue_duration_s,
                st.avg_turns_per_dialogue,
                st.avg_speakers_per_dialogue
            );
        }
        if let Some(r) = self.podcast_to_youtube_duration_ratio {
            let _ = writeln!(s, "podcast/youtube average duration ratio: {r:.2}");
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSampleSpec {
    #[serde(default = "FeatureSampleSpec::default_samples")]
    pub n_samples: usize,
    #[serde(default = "FeatureSampleSpec::default_window")]
    pub window_s: f64,
    pub seed: u64,
    /// Extra parameters forwarded to the features worker.
    #[serde(default, skip_serializing_if = "Map::is_empty")]
    pub worker_params: Map<String, Value>,
}

impl FeatureSampleSpec {
    fn default_samples() -> usize {
        1000
    }
    fn default_window() -> f64 {
        5.0
    }

    pub fn new(seed: u64) -> Self {
        Self {
            n_samples: Self::default_samples(),
            window_s: Self::default_window(),
            seed,
            worker_params: Map::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::invalid("n_samples must be > 0"));
        }
        if !(self.window_s > 0.0 && self.window_s.is_finite()) {
            return Err(Error::invalid("window_s must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub dim: usize,
    /// Row-major.
    pub data: Vec<f32>,
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrixHeader {
    pub rows: usize,
    pub dim: usize,
    pub dtype: String,
    pub spec: FeatureSampleSpec,
}

/// Draws `spec.n_samples` frame vectors: each draw picks a dialogue at
/// least `window_s` long uniformly, a window uniformly inside it, and one
/// frame of that window's features uniformly. `audio_of` maps a dialogue to
/// audio whose time zero is the dialogue start. Intermediate matrices go to
/// `scratch_dir`.
pub fn sample_frame_features(
    dialogues: &[Dialogue],
    audio_of: impl Fn(&Dialogue) -> Option<String>,
    spec: &FeatureSampleSpec,
    backend: &dyn InferenceBackend,
    scratch_dir: &Path,
) -> Result<FeatureMatrix> {
    spec.validate()?;
    let window_us = to_us(spec.window_s);
    let mut eligible: Vec<&Dialogue> = dialogues
        .iter()
        .filter(|d| to_us(d.end_s) - to_us(d.start_s) >= window_us)
        .collect();
    if eligible.is_empty() {
        return Err(Error::invalid(format!(
            "feature sampling needs at least one dialogue of >= {} s",
            spec.window_s
        )));
    }
    eligible.sort_by_key(|d| d.id());
    fs::create_dir_all(scratch_dir).map_err(|e| Error::io(scratch_dir, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut data = Vec::new();
    let mut dim = None;
    for i in 0..spec.n_samples {
        let d = eligible[rng.gen_range(0..eligible.len())];
        let slack = d.duration_s() - spec.window_s;
        let offset = if slack > 0.0 { round_us(rng.gen_range(0.0..=slack)) } else { 0.0 };
        let audio = audio_of(d)
            .ok_or_else(|| Error::invalid(format!("no audio available for dialogue {}", d.id())))?;
        let out = scratch_dir.join(format!("features-{i:06}.f32"));
        let mut req = WorkerRequest::features(
            format!("features-{i:06}"),
            audio,
            offset,
            offset + spec.window_s,
            &out.display().to_string(),
        );
        for (k, v) in &spec.worker_params {
            req = req.param(k, v.clone());
        }
        let payload: FeaturesPayload = backend.call(req).into_payload()?;
        if payload.frames == 0 || payload.dim == 0 {
            return Err(Error::Worker(format!("features worker returned an empty matrix for draw {i}")));
        }
        match dim {
            None => dim = Some(payload.dim),
            Some(k) if k != payload.dim => {
                return Err(Error::Worker(format!("feature dim changed from {k} to {}", payload.dim)))
            }
            _ => {}
        }
        let path = Path::new(&payload.matrix_path);
        let matrix = decode_f32_le(&fs::read(path).map_err(|e| Error::io(path, e))?)?;
        if matrix.len() != payload.frames * payload.dim {
            return Err(Error::Worker(format!(
                "features matrix has {} values, expected {}x{}",
                matrix.len(),
                payload.frames,
                payload.dim
            )));
        }
        let frame = rng.gen_range(0..payload.frames);
        data.extend_from_slice(&matrix[frame * payload.dim..(frame + 1) * payload.dim]);
        let _ = fs::remove_file(path);
    }
    Ok(FeatureMatrix {
        rows: spec.n_samples,
        dim: dim.expect("n_samples > 0"),
        data,
    })
}

/// Writes `<stem>.f32` (little-endian f32, row-major) and `<stem>.json`.
pub fn write_feature_matrix(stem: &Path, matrix: &FeatureMatrix, spec: &FeatureSampleSpec) -> Result<()> {
    write_atomic(&stem.with_extension("f32"), &encode_f32_le(&matrix.data))?;
    let header = FeatureMatrixHeader {
        rows: matrix.rows,
        dim: matrix.dim,
        dtype: "f32le".into(),
        spec: spec.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&header)?;
    json.push(b'\n');
    write_atomic(&stem.with_extension("json"), &json)
}

pub fn read_feature_matrix(stem: &Path) -> Result<(FeatureMatrixHeader, FeatureMatrix)> {
    let hp = stem.with_extension("json");
    let header: FeatureMatrixHeader =
        serde_json::from_slice(&fs::read(&hp).map_err(|e| Error::io(&hp, e))?)?;
    let dp = stem.with_extension("f32");
    let data = decode_f32_le(&fs::read(&dp).map_err(|e| Error::io(&dp, e))?)?;
    if data.len() != header.rows * header.dim {
        return Err(Error::invalid("feature matrix size does not match its header"));
    }
    let m = FeatureMatrix {
        rows: header.rows,
        dim: header.dim,
        data,
    };
    Ok((header, m))
}
