//! Sharded JSON Lines manifest.
//!
//! Every shard file starts with a header record naming the schema version,
//! followed by document, turn-list and dialogue records, one per line.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{
    to_us, AudioDocument, Dialogue, DiarizationTurn, SegmentationConfig, Stage, StageStatus,
    MANIFEST_VERSION,
};

pub const DEFAULT_SHARD_RECORDS: usize = 100_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShardHeader {
    pub manifest_version: String,
    pub stage: Stage,
    pub shard: u32,
    /// Segmentation parameters in force, recorded once dialogues exist.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentationConfig>,
}

impl ShardHeader {
    pub fn new(stage: Stage, shard: u32) -> Self {
        Self {
            manifest_version: MANIFEST_VERSION.to_string(),
            stage,
            shard,
            segmentation: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnList {
    pub doc_id: String,
    pub turns: Vec<DiarizationTurn>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ManifestRecord {
    Header(ShardHeader),
    Document(AudioDocument),
    Turns(TurnList),
    Dialogue(Dialogue),
}

impl ManifestRecord {
    pub fn id(&self) -> String {
        match self {
            ManifestRecord::Header(h) => format!("header:{}", h.shard),
            ManifestRecord::Document(d) => d.doc_id.clone(),
            ManifestRecord::Turns(t) => format!("{}:turns", t.doc_id),
            ManifestRecord::Dialogue(d) => d.id(),
        }
    }
}

/// The records of one shard, grouped by kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Shard {
    pub header: Option<ShardHeader>,
    pub documents: Vec<AudioDocument>,
    pub turns: Vec<TurnList>,
    pub dialogues: Vec<Dialogue>,
}

impl Shard {
    pub fn from_records(records: Vec<ManifestRecord>) -> Self {
        let mut out = Shard::default();
        for r in records {
            match r {
                ManifestRecord::Header(h) => out.header = Some(h),
                ManifestRecord::Document(d) => out.documents.push(d),
                ManifestRecord::Turns(t) => out.turns.push(t),
                ManifestRecord::Dialogue(d) => out.dialogues.push(d),
            }
        }
        out
    }

    /// Records in canonical order: header, documents by id, then per
    /// document its turns and dialogues.
    pub fn into_records(mut self) -> Vec<ManifestRecord> {
        self.documents.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        self.turns.sort_by(|a, b| a.doc_id.cmp(&b.doc_id));
        self.dialogues
            .sort_by(|a, b| (&a.doc_id, a.dialogue_index).cmp(&(&b.doc_id, b.dialogue_index)));
        let mut out = Vec::new();
        if let Some(h) = self.header {
            out.push(ManifestRecord::Header(h));
        }
        out.extend(self.documents.into_iter().map(ManifestRecord::Document));
        out.extend(self.turns.into_iter().map(ManifestRecord::Turns));
        out.extend(self.dialogues.into_iter().map(ManifestRecord::Dialogue));
        out
    }
}

pub fn encode_records(records: &[ManifestRecord]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

/// Writes `bytes` to `path` via a temporary file and rename, so readers
/// never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn write_shard(path: &Path, records: &[ManifestRecord]) -> Result<String> {
    let bytes = encode_records(records)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

pub fn read_shard(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Stable shard assignment from a document id.
pub fn shard_of(doc_id: &str, num_shards: u32) -> u32 {
    let digest = Sha256::digest(doc_id.as_bytes());
    let mut word = [0u8; 8];
    word.copy_from_slice(&digest[..8]);
    (u64::from_be_bytes(word) % num_shards.max(1) as u64) as u32
}

pub fn num_shards_for(records: usize, max_records: usize) -> u32 {
    records.div_ceil(max_records.max(1)).max(1) as u32
}

pub fn shard_file_name(shard: u32) -> String {
    format!("shard-{shard:05}.jsonl")
}

/// A set of shard files making up one manifest.
#[derive(Debug, Clone, Default)]
pub struct CorpusManifest {
    pub shards: Vec<PathBuf>,
}

impl CorpusManifest {
    pub fn new(shards: Vec<PathBuf>) -> Self {
        Self { shards }
    }

    /// All `shard-*.jsonl` files in a directory, sorted by name.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut shards = Vec::new();
        for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let path = entry.map_err(|e| Error::io(dir, e))?.path();
            let is_shard = path
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("shard-") && n.ends_with(".jsonl"));
            if is_shard {
                shards.push(path);
            }
        }
        shards.sort();
        Ok(Self { shards })
    }

    pub fn load(&self) -> Result<Vec<Shard>> {
        self.shards
            .iter()
            .map(|p| read_shard(p).map(Shard::from_records))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub record_id: String,
    pub field: String,
    pub rule: String,
}

impl Violation {
    fn new(record_id: impl Into<String>, field: &str, rule: impl Into<String>) -> Self {
        Self {
            record_id: record_id.into(),
            field: field.to_string(),
            rule: rule.into(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Checks every record of every shard against the type invariants. The
/// result is sorted, so it does not depend on shard order.
pub fn validate_manifest(manifest: &CorpusManifest) -> Result<ValidationReport> {
    let mut v = Vec::new();
    let mut doc_counts: BTreeMap<String, usize> = BTreeMap::new();
    let mut durations: BTreeMap<String, f64> = BTreeMap::new();
    let mut loaded = Vec::new();

    for path in &manifest.shards {
        let records = read_shard(path)?;
        let shard_name = path.display().to_string();
        match records.first() {
            Some(ManifestRecord::Header(h)) if h.manifest_version == MANIFEST_VERSION => {}
            Some(ManifestRecord::Header(h)) => v.push(Violation::new(
                shard_name.clone(),
                "manifest_version",
                format!("expected {MANIFEST_VERSION}, found {}", h.manifest_version),
            )),
            _ => v.push(Violation::new(
                shard_name.clone(),
                "header",
                "shard must begin with a header record",
            )),
        }
        let shard = Shard::from_records(records);
        for d in &shard.documents {
            *doc_counts.entry(d.doc_id.clone()).or_default() += 1;
            durations.insert(d.doc_id.clone(), d.duration_s);
        }
        loaded.push(shard);
    }

    for (id, n) in &doc_counts {
        if *n > 1 {
            v.push(Violation::new(
                id.clone(),
                "doc_id",
                format!("doc_id must be unique, found {n} records"),
            ));
        }
    }

    for shard in &loaded {
        let gap = shard
            .header
            .as_ref()
            .and_then(|h| h.segmentation)
            .map(|c| c.gap_threshold_s);
        for d in &shard.documents {
            check_document(d, &mut v);
        }
        for t in &shard.turns {
            let id = format!("{}:turns", t.doc_id);
            check_turns(&id, &t.turns, durations.get(&t.doc_id).copied(), &mut v);
        }
        for d in &shard.dialogues {
            check_dialogue(d, gap, durations.get(&d.doc_id).copied(), &mut v);
        }
    }

    v.sort();
    Ok(ValidationReport { violations: v })
}

fn check_document(d: &AudioDocument, v: &mut Vec<Violation>) {
    if !(d.duration_s >= 0.0 && d.duration_s.is_finite()) {
        v.push(Violation::new(&d.doc_id, "duration_s", "duration_s must be >= 0"));
    }
    // Header fields are only known for documents that were probed.
    if d.is_done(Stage::Collect) {
        if d.sample_rate_hz == 0 {
            v.push(Violation::new(&d.doc_id, "sample_rate_hz", "sample_rate_hz must be > 0"));
        }
        if d.channels == 0 {
            v.push(Violation::new(&d.doc_id, "channels", "channels must be > 0"));
        }
    }
    let mut terminal: Option<Stage> = None;
    for stage in Stage::ALL {
        let Some(status) = d.stage_status.get(&stage) else {
            continue;
        };
        if let Some(at) = terminal {
            if matches!(status, StageStatus::Done | StageStatus::Rejected) {
                v.push(Violation::new(
                    &d.doc_id,
                    "stage_status",
                    format!("stage {stage} recorded after terminal status at {at}"),
                ));
            }
        }
        if matches!(status, StageStatus::Rejected | StageStatus::Failed) && terminal.is_none() {
            terminal = Some(stage);
        }
    }
}

fn check_turns(id: &str, turns: &[DiarizationTurn], duration: Option<f64>, v: &mut Vec<Violation>) {
    for t in turns {
        if !(t.start_s >= 0.0 && t.start_s < t.end_s) {
            v.push(Violation::new(
                id,
                "turns",
                format!("turn ordering 0 <= start_s < end_s violated: [{}, {}]", t.start_s, t.end_s),
            ));
        }
        if let Some(dur) = duration {
            if t.end_s > dur + 1e-6 {
                v.push(Violation::new(
                    id,
                    "turns",
                    format!("turn end {} exceeds document duration {dur}", t.end_s),
                ));
            }
        }
    }
    if !crate::model::turns_sorted(turns) {
        v.push(Violation::new(id, "turns", "turns must be sorted by (start_s, end_s, speaker)"));
    }
}

fn check_dialogue(d: &Dialogue, gap: Option<f64>, duration: Option<f64>, v: &mut Vec<Violation>) {
    let id = d.id();
    check_turns(&id, &d.turns, duration, v);
    if d.turns.is_empty() {
        v.push(Violation::new(&id, "turns", "dialogue must have at least one turn"));
        return;
    }
    let start = d.turns.iter().map(|t| t.start_s).fold(f64::INFINITY, f64::min);
    let end = d.turns.iter().map(|t| t.end_s).fold(f64::NEG_INFINITY, f64::max);
    if d.start_s != start {
        v.push(Violation::new(&id, "start_s", "start_s must equal the earliest turn start"));
    }
    if d.end_s != end {
        v.push(Violation::new(&id, "end_s", "end_s must equal the latest turn end"));
    }
    let speakers: BTreeSet<String> = d.turns.iter().map(|t| t.speaker.clone()).collect();
    if speakers != d.speakers {
        v.push(Violation::new(&id, "speakers", "speakers must equal the turn speaker set"));
    }
    let sum: f64 = d.dominance.values().sum();
    if (sum - 1.0).abs() > 1e-9 || d.dominance.values().any(|x| !(0.0..=1.0).contains(x)) {
        v.push(Violation::new(&id, "dominance", "dominance shares must lie in [0,1] and sum to 1"));
    }
    if let Some(gap) = gap {
        let gap_us = to_us(gap);
        let mut rolling = to_us(d.turns[0].end_s);
        for t in &d.turns[1..] {
            if to_us(t.start_s) - rolling >= gap_us {
                v.push(Violation::new(&id, "turns", format!("internal gap must be < {gap} s")));
                break;
            }
            rolling = rolling.max(to_us(t.end_s));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Source;
    use proptest::prelude::*;

    fn doc(id: &str) -> AudioDocument {
        AudioDocument {
            doc_id: id.into(),
            source: Source::Local,
            uri: format!("/data/{id}.wav"),
            local_path: Some(format!("/data/{id}.wav")),
            duration_s: 12.5,
            sample_rate_hz: 16_000,
            channels: 1,
            stage_status: BTreeMap::from([(Stage::Collect, StageStatus::Done)]),
            failure: None,
            p_target: None,
        }
    }

    fn shard_with(dir: &Path, n: u32, docs: Vec<AudioDocument>) -> PathBuf {
        let mut s = Shard {
            header: Some(ShardHeader::new(Stage::Collect, n)),
            ..Default::default()
        };
        s.documents = docs;
        let path = dir.join(shard_file_name(n));
        write_shard(&path, &s.into_records()).unwrap();
        path
    }

    #[test]
    fn well_formed_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let p = shard_with(dir.path(), 0, vec![doc("a"), doc("b")]);
        let report = validate_manifest(&CorpusManifest::new(vec![p])).unwrap();
        assert!(report.is_valid(), "{report:?}");
    }

    #[test]
    fn inverted_turn_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(shard_file_name(0));
        let recs = vec![
            ManifestRecord::Header(ShardHeader::new(Stage::Diarize, 0)),
            ManifestRecord::Document(doc("a")),
            ManifestRecord::Turns(TurnList {
                doc_id: "a".into(),
                turns: vec![DiarizationTurn {
                    speaker: "S0".into(),
                    start_s: 3.0,
                    end_s: 2.0,
                }],
            }),
        ];
        write_shard(&path, &recs).unwrap();
        let report = validate_manifest(&CorpusManifest::new(vec![path])).unwrap();
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0].rule.contains("start_s < end_s"));
        assert_eq!(report.violations[0].record_id, "a:turns");
    }

    #[test]
    fn duplicate_doc_across_shards() {
        let dir = tempfile::tempdir().unwrap();
        let p0 = shard_with(dir.path(), 0, vec![doc("a"), doc("b")]);
        let p1 = shard_with(dir.path(), 1, vec![doc("c"), doc("a")]);
        let docs_seen = [vec!["a", "b"], vec!["c", "a"]];
        // set-membership scan
        let mut seen = BTreeSet::new();
        let mut dups = BTreeSet::new();
        for id in docs_seen.iter().flatten() {
            if !seen.insert(*id) {
                dups.insert(*id);
            }
        }
        let report = validate_manifest(&CorpusManifest::new(vec![p0.clone(), p1.clone()])).unwrap();
        assert_eq!(report.violations.len(), dups.len());
        assert_eq!(report.violations[0].record_id, "a");
        assert_eq!(report.violations[0].field, "doc_id");
        let reversed = validate_manifest(&CorpusManifest::new(vec![p1, p0])).unwrap();
        assert_eq!(report, reversed);
    }

    #[test]
    fn rejected_then_done_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut d = doc("a");
        d.mark(Stage::Lid, StageStatus::Rejected);
        d.mark(Stage::Diarize, StageStatus::Done);
        let p = shard_with(dir.path(), 0, vec![d]);
        let report = validate_manifest(&CorpusManifest::new(vec![p])).unwrap();
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].field, "stage_status");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("shard-00000.jsonl");
        let header = serde_json::to_string(&ManifestRecord::Header(ShardHeader::new(Stage::Collect, 0))).unwrap();
        fs::write(&path, format!("{header}\n{{not json\n")).unwrap();
        match validate_manifest(&CorpusManifest::new(vec![path])) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unreadable_shard_names_the_file() {
        let missing = PathBuf::from("/nonexistent/shard-00009.jsonl");
        let err = validate_manifest(&CorpusManifest::new(vec![missing])).unwrap_err();
        assert!(err.to_string().contains("shard-00009.jsonl"));
    }

    #[test]
    fn dialogue_gap_checked_against_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(shard_file_name(0));
        let mut header = ShardHeader::new(Stage::Segment, 0);
        header.segmentation = Some(SegmentationConfig::default());
        let dlg = Dialogue::from_turns(
            "a",
            Source::Local,
            0,
            vec![DiarizationTurn::new("A", 0.0, 1.0), DiarizationTurn::new("B", 6.0, 7.0)],
        )
        .unwrap();
        let recs = vec![
            ManifestRecord::Header(header),
            ManifestRecord::Document(doc("a")),
            ManifestRecord::Dialogue(dlg),
        ];
        write_shard(&path, &recs).unwrap();
        let report = validate_manifest(&CorpusManifest::new(vec![path])).unwrap();
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0].rule.contains("internal gap"));
    }

    #[test]
    fn shard_assignment_is_stable() {
        assert_eq!(shard_of("doc-1", 4), shard_of("doc-1", 4));
        assert!(shard_of("doc-1", 4) < 4);
        assert_eq!(shard_of("anything", 1), 0);
        assert_eq!(num_shards_for(0, 100), 1);
        assert_eq!(num_shards_for(250, 100), 3);
    }

    fn arb_turn() -> impl Strategy<Value = DiarizationTurn> {
        ("[A-D]", 0u32..100_000_000, 1u32..30_000_000).prop_map(|(s, start, len)| {
            DiarizationTurn::new(s, start as f64 / 1e6, (start + len) as f64 / 1e6)
        })
    }

    fn arb_doc() -> impl Strategy<Value = AudioDocument> {
        (
            "[a-z0-9]{1,12}",
            prop::sample::select(Source::ALL.to_vec()),
            0u64..10_000_000_000,
            prop::sample::select(vec![8_000u32, 16_000, 44_100, 48_000]),
            1u16..3,
            proptest::option::of(0.0f64..1.0),
        )
            .prop_map(|(id, source, dur_us, sr, ch, p)| AudioDocument {
                uri: format!("https://host/{id}.mp3"),
                doc_id: id,
                source,
                local_path: None,
                duration_s: dur_us as f64 / 1e6,
                sample_rate_hz: sr,
                channels: ch,
                stage_status: BTreeMap::from([(Stage::Collect, StageStatus::Done)]),
                failure: None,
                p_target: p,
            })
    }

    proptest! {
        #[test]
        fn document_record_round_trip(d in arb_doc()) {
            let rec = ManifestRecord::Document(d);
            let line = serde_json::to_string(&rec).unwrap();
            let back: ManifestRecord = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(back, rec);
        }

        #[test]
        fn dialogue_record_round_trip(mut turns in prop::collection::vec(arb_turn(), 1..20)) {
            crate::model::sort_turns(&mut turns);
            let d = Dialogue::from_turns("doc", Source::Podcast, 3, turns).unwrap();
            let rec = ManifestRecord::Dialogue(d);
            let line = serde_json::to_string(&rec).unwrap();
            let back: ManifestRecord = serde_json::from_str(&line).unwrap();
            prop_assert_eq!(back, rec);
        }
    }
}
