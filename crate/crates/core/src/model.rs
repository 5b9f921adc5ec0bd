//! Shared domain types: documents, diarization turns, dialogues and the
//! stage/status vocabulary recorded in the manifest.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: &str = "jchat-manifest/1";

/// Pipeline stages, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Collect,
    Lid,
    Diarize,
    Segment,
    Cleanse,
    Package,
    Stats,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Collect,
        Stage::Lid,
        Stage::Diarize,
        Stage::Segment,
        Stage::Cleanse,
        Stage::Package,
        Stage::Stats,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Collect => "collect",
            Stage::Lid => "lid",
            Stage::Diarize => "diarize",
            Stage::Segment => "segment",
            Stage::Cleanse => "cleanse",
            Stage::Package => "package",
            Stage::Stats => "stats",
        }
    }

    pub fn previous(self) -> Option<Stage> {
        let idx = Stage::ALL.iter().position(|s| *s == self)?;
        idx.checked_sub(1).map(|i| Stage::ALL[i])
    }

    /// Stages that run independently on every shard.
    pub fn is_per_shard(self) -> bool {
        matches!(
            self,
            Stage::Lid | Stage::Diarize | Stage::Segment | Stage::Cleanse
        )
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .iter()
            .copied()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Pending,
    Done,
    Rejected,
    Failed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Youtube,
    Podcast,
    Local,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Youtube, Source::Podcast, Source::Local];

    pub fn as_str(self) -> &'static str {
        match self {
            Source::Youtube => "youtube",
            Source::Podcast => "podcast",
            Source::Local => "local",
        }
    }
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Source {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Source::ALL
            .iter()
            .copied()
            .find(|src| src.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown source `{s}`")))
    }
}

/// Rounds seconds to microsecond precision.
pub fn round_us(seconds: f64) -> f64 {
    (seconds * 1e6).round() / 1e6
}

/// Seconds as integer microseconds.
pub fn to_us(seconds: f64) -> i64 {
    (seconds * 1e6).round() as i64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AudioDocument {
    pub doc_id: String,
    pub source: Source,
    pub uri: String,
    /// Local copy of the audio, once fetched.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_path: Option<String>,
    pub duration_s: f64,
    pub sample_rate_hz: u32,
    pub channels: u16,
    pub stage_status: BTreeMap<Stage, StageStatus>,
    /// Why the document failed, for the stage recorded as failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_target: Option<f64>,
}

impl AudioDocument {
    pub fn status(&self, stage: Stage) -> StageStatus {
        self.stage_status
            .get(&stage)
            .copied()
            .unwrap_or(StageStatus::Pending)
    }

    pub fn is_done(&self, stage: Stage) -> bool {
        self.status(stage) == StageStatus::Done
    }

    pub fn mark(&mut self, stage: Stage, status: StageStatus) {
        self.stage_status.insert(stage, status);
    }

    pub fn mark_failed(&mut self, stage: Stage, reason: impl Into<String>) {
        self.stage_status.insert(stage, StageStatus::Failed);
        self.failure = Some(reason.into());
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiarizationTurn {
    pub speaker: String,
    pub start_s: f64,
    pub end_s: f64,
}

impl DiarizationTurn {
    pub fn new(speaker: impl Into<String>, start_s: f64, end_s: f64) -> Self {
        Self {
            speaker: speaker.into(),
            start_s: round_us(start_s),
            end_s: round_us(end_s),
        }
    }

    pub fn duration_us(&self) -> i64 {
        to_us(self.end_s) - to_us(self.start_s)
    }

    /// Storage order: (start, end, speaker).
    pub fn storage_cmp(&self, other: &Self) -> Ordering {
        self.start_s
            .total_cmp(&other.start_s)
            .then(self.end_s.total_cmp(&other.end_s))
            .then_with(|| self.speaker.cmp(&other.speaker))
    }
}

/// Sorts turns into storage order.
pub fn sort_turns(turns: &mut [DiarizationTurn]) {
    turns.sort_by(DiarizationTurn::storage_cmp);
}

pub fn turns_sorted(turns: &[DiarizationTurn]) -> bool {
    turns
        .windows(2)
        .all(|w| w[0].storage_cmp(&w[1]) != Ordering::Greater)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    Dominance,
    TooFewSpeakers,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub doc_id: String,
    pub source: Source,
    pub dialogue_index: u32,
    pub turns: Vec<DiarizationTurn>,
    pub start_s: f64,
    pub end_s: f64,
    pub speakers: BTreeSet<String>,
    pub dominance: BTreeMap<String, f64>,
    #[serde(default)]
    pub stage_status: BTreeMap<Stage, StageStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<RejectionReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enhanced_path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl Dialogue {
    /// Builds a dialogue from a nonempty run of sorted turns, deriving its
    /// bounds, speaker set and dominance shares.
    pub fn from_turns(
        doc_id: impl Into<String>,
        source: Source,
        dialogue_index: u32,
        turns: Vec<DiarizationTurn>,
    ) -> Result<Self> {
        if turns.is_empty() {
            return Err(Error::invalid("dialogue must contain at least one turn"));
        }
        let start_s = turns
            .iter()
            .map(|t| t.start_s)
            .fold(f64::INFINITY, f64::min);
        let end_s = turns
            .iter()
            .map(|t| t.end_s)
            .fold(f64::NEG_INFINITY, f64::max);
        let speakers = turns.iter().map(|t| t.speaker.clone()).collect();
        let times = speaking_time_us(&turns);
        let total: i64 = times.values().sum();
        let dominance = times
            .into_iter()
            .map(|(spk, us)| (spk, us as f64 / total as f64))
            .collect();
        Ok(Self {
            doc_id: doc_id.into(),
            source,
            dialogue_index,
            turns,
            start_s,
            end_s,
            speakers,
            dominance,
            stage_status: BTreeMap::new(),
            rejection: None,
            enhanced_path: None,
            failure: None,
        })
    }

    pub fn id(&self) -> String {
        format!("{}_{:04}", self.doc_id, self.dialogue_index)
    }

    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }

    pub fn status(&self, stage: Stage) -> StageStatus {
        self.stage_status
            .get(&stage)
            .copied()
            .unwrap_or(StageStatus::Pending)
    }
}

/// Per-speaker summed turn time in microseconds. Overlapping turns credit
/// every speaker in full.
pub fn speaking_time_us(turns: &[DiarizationTurn]) -> BTreeMap<String, i64> {
    let mut out = BTreeMap::new();
    for t in turns {
        *out.entry(t.speaker.clone()).or_insert(0) += t.duration_us();
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegmentationConfig {
    #[serde(default = "SegmentationConfig::default_gap")]
    pub gap_threshold_s: f64,
    #[serde(default = "SegmentationConfig::default_dominance")]
    pub dominance_threshold: f64,
    #[serde(default = "SegmentationConfig::default_min_speakers")]
    pub min_speakers: usize,
}

impl SegmentationConfig {
    fn default_gap() -> f64 {
        5.0
    }
    fn default_dominance() -> f64 {
        0.8
    }
    fn default_min_speakers() -> usize {
        2
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gap_threshold_s > 0.0 && self.gap_threshold_s.is_finite()) {
            return Err(Error::invalid("gap_threshold_s must be > 0"));
        }
        if !(self.dominance_threshold > 0.0 && self.dominance_threshold <= 1.0) {
            return Err(Error::invalid("dominance_threshold must be in (0, 1]"));
        }
        if self.min_speakers < 1 {
            return Err(Error::invalid("min_speakers must be >= 1"));
        }
        Ok(())
    }
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            gap_threshold_s: Self::default_gap(),
            dominance_threshold: Self::default_dominance(),
            min_speakers: Self::default_min_speakers(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LidConfig {
    pub target_language: String,
    #[serde(default = "LidConfig::default_threshold")]
    pub threshold: f64,
}

impl LidConfig {
    fn default_threshold() -> f64 {
        0.8
    }

    pub fn new(target_language: impl Into<String>) -> Self {
        Self {
            target_language: target_language.into(),
            threshold: Self::default_threshold(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::invalid("lid threshold must be in [0, 1]"));
        }
        if self.target_language.is_empty() {
            return Err(Error::invalid("target_language must be nonempty"));
        }
        Ok(())
    }
}
