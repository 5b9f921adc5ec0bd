//! Cleansing and release packaging: speech enhancement per dialogue, the
//! two-channel turn-taking layout and the train/valid/test split.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analytics::StatsReport;
use crate::audio::{encode_mono_i16, probe_wav, read_mono, resample_linear};
use crate::error::{Error, Result};
use crate::manifest::{sha256_hex, write_atomic};
use crate::model::{Dialogue, DiarizationTurn, Source};
use crate::worker::protocol::{EnhancePayload, InferenceBackend, WorkerRequest};

/// Allowed difference between an excerpt and its enhanced output.
pub const DURATION_TOLERANCE_S: f64 = 0.02;

/// Enhances the dialogue's `[start_s, end_s)` excerpt of `source_audio`
/// into `output`. The result must keep the excerpt's duration.
pub fn cleanse(
    dialogue: &Dialogue,
    source_audio: &Path,
    backend: &dyn InferenceBackend,
    output: &Path,
) -> Result<PathBuf> {
    if !source_audio.is_file() {
        return Err(Error::invalid(format!(
            "source audio {} for {} is missing",
            source_audio.display(),
            dialogue.id()
        )));
    }
    let req = WorkerRequest::enhance(
        format!("enhance:{}", dialogue.id()),
        source_audio.display().to_string(),
        dialogue.start_s,
        dialogue.end_s,
        &output.display().to_string(),
    );
    let payload: EnhancePayload = backend.call(req).into_payload()?;
    let out = PathBuf::from(payload.output_path);
    let got = probe_wav(&out)?.duration_s;
    let want = dialogue.duration_s();
    if (got - want).abs() > DURATION_TOLERANCE_S {
        return Err(Error::Worker(format!(
            "enhanced {} lasts {got:.3} s, excerpt is {want:.3} s",
            dialogue.id()
        )));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelAssignment {
    pub dialogue_id: String,
    /// Channel (0 or 1) of each turn, in turn order.
    pub channels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_channel_map: Option<BTreeMap<String, u8>>,
    pub channel_consistent: bool,
}

/// Lays turns onto two channels: the first turn takes channel 0 and the
/// channel flips whenever the speaker changes. A speaker → channel map is
/// given only for two-speaker dialogues whose induced mapping is
/// single-valued.
pub fn assign_channels(dialogue: &Dialogue) -> Result<ChannelAssignment> {
    let first = dialogue
        .turns
        .first()
        .ok_or_else(|| Error::invalid(format!("dialogue {} has no turns", dialogue.id())))?;
    let mut channels = Vec::with_capacity(dialogue.turns.len());
    let mut current = 0u8;
    let mut prev = &first.speaker;
    for t in &dialogue.turns {
        if &t.speaker != prev {
            current ^= 1;
            prev = &t.speaker;
        }
        channels.push(current);
    }

    let mut relation: BTreeMap<String, BTreeSet<u8>> = BTreeMap::new();
    for (t, ch) in dialogue.turns.iter().zip(&channels) {
        relation.entry(t.speaker.clone()).or_default().insert(*ch);
    }
    let single_valued = relation.values().all(|c| c.len() == 1);
    let map = (relation.len() == 2 && single_valued).then(|| {
        relation
            .into_iter()
            .map(|(s, c)| (s, *c.iter().next().expect("nonempty")))
            .collect::<BTreeMap<_, _>>()
    });
    Ok(ChannelAssignment {
        dialogue_id: dialogue.id(),
        channels,
        channel_consistent: map.is_some(),
        speaker_channel_map: map,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitSizes {
    /// Exact valid/test sizes; train receives everything else.
    Counts { train: usize, valid: usize, test: usize },
    Fractions { train: f64, valid: f64, test: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub sizes: SplitSizes,
    pub seed: u64,
}

impl SplitSpec {
    pub fn counts(train: usize, valid: usize, test: usize, seed: u64) -> Self {
        Self {
            sizes: SplitSizes::Counts { train, valid, test },
            seed,
        }
    }

    pub fn fractions(train: f64, valid: f64, test: f64, seed: u64) -> Self {
        Self {
            sizes: SplitSizes::Fractions { train, valid, test },
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let SplitSizes::Fractions { train, valid, test } = self.sizes {
            if [train, valid, test].iter().any(|f| !(0.0..=1.0).contains(f)) {
                return Err(Error::invalid("split fractions must lie in [0, 1]"));
            }
            if (train + valid + test - 1.0).abs() > 1e-9 {
                return Err(Error::invalid("split fractions must sum to 1"));
            }
        }
        Ok(())
    }

    /// (train, valid, test) sizes for a corpus of `n` items.
    pub fn sizes_for(&self, n: usize) -> Result<(usize, usize, usize)> {
        self.validate()?;
        match self.sizes {
            SplitSizes::Counts { train, valid, test } => {
                if train + valid + test > n {
                    return Err(Error::invalid(format!(
                        "split counts {train}/{valid}/{test} exceed corpus size {n}"
                    )));
                }
                Ok((n - valid - test, valid, test))
            }
            SplitSizes::Fractions { valid, test, .. } => {
                let test_n = ((test * n as f64).round() as usize).min(n);
                let valid_n = ((valid * n as f64).round() as usize).min(n - test_n);
                Ok((n - valid_n - test_n, valid_n, test_n))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub valid: Vec<T>,
    pub test: Vec<T>,
}

/// Uniformly random partition under the spec's seed. Each split keeps the
/// input order of its members.
pub fn split_dataset<T: Clone>(items: &[T], spec: &SplitSpec) -> Result<Splits<T>> {
    let (_, valid_n, test_n) = spec.sizes_for(items.len())?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut label = vec![0u8; items.len()];
    for &i in &order[..test_n] {
        label[i] = 2;
    }
    for &i in &order[test_n..test_n + valid_n] {
        label[i] = 1;
    }
    let mut out = Splits {
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
    };
    for (item, l) in items.iter().zip(label) {
        match l {
            0 => out.train.push(item.clone()),
            1 => out.valid.push(item.clone()),
            _ => out.test.push(item.clone()),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageConfig {
    pub sample_rate_hz: u32,
    pub split: SplitSpec,
}

/// One line of a split's `manifest.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackagedDialogue {
    pub dialogue_id: String,
    pub doc_id: String,
    pub source: Source,
    pub split: String,
    pub start_s: f64,
    pub end_s: f64,
    pub duration_s: f64,
    pub speakers: BTreeSet<String>,
    pub turns: Vec<DiarizationTurn>,
    pub channels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker_channel_map: Option<BTreeMap<String, u8>>,
    pub channel_consistent: bool,
    pub audio: [String; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PackageSummary {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub stats: StatsReport,
}

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

fn write_if_changed(path: &Path, bytes: &[u8]) -> Result<()> {
    if fs::read(path).is_ok_and(|old| old == bytes) {
        return Ok(());
    }
    write_atomic(path, bytes)
}

/// Renders the two channel files for a dialogue from its enhanced excerpt.
fn render_channels(
    dialogue: &Dialogue,
    assignment: &ChannelAssignment,
    sample_rate: u32,
) -> Result<[Vec<u8>; 2]> {
    let path = dialogue
        .enhanced_path
        .as_deref()
        .ok_or_else(|| Error::invalid(format!("dialogue {} was not cleansed", dialogue.id())))?;
    let (sr, mono) = read_mono(Path::new(path))?;
    let audio = resample_linear(&mono, sr, sample_rate);
    let mut chans = [vec![0.0f32; audio.len()], vec![0.0f32; audio.len()]];
    let frame = |t: f64| (((t - dialogue.start_s) * sample_rate as f64).round().max(0.0) as usize).min(audio.len());
    for (turn, ch) in dialogue.turns.iter().zip(&assignment.channels) {
        let (a, b) = (frame(turn.start_s), frame(turn.end_s));
        chans[*ch as usize][a..b].copy_from_slice(&audio[a..b]);
    }
    Ok([
        encode_mono_i16(sample_rate, &chans[0])?,
        encode_mono_i16(sample_rate, &chans[1])?,
    ])
}

/// Writes the release tree:
///
/// ```text
/// <out>/stats.json
/// <out>/{train,valid,test}/manifest.jsonl
/// <out>/{train,valid,test}/<dialogue_id>/{ch0.wav,ch1.wav,channels.json}
/// ```
///
/// Files are written atomically and only when their content changes;
/// dialogue directories that do not belong to the current layout are
/// removed. Re-running over a partial tree therefore converges to the same
/// bytes as a clean run.
pub fn package(dialogues: &[Dialogue], output_dir: &Path, config: &PackageConfig) -> Result<PackageSummary> {
    let mut sorted: Vec<&Dialogue> = dialogues.iter().collect();
    sorted.sort_by_key(|d| d.id());
    let splits = split_dataset(&sorted, &config.split)?;

    for (name, members) in SPLITS.iter().zip([&splits.train, &splits.valid, &splits.test]) {
        let split_dir = output_dir.join(name);
        fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;
        let mut lines = Vec::new();
        let mut expected = BTreeSet::new();
        for d in members.iter() {
            let id = d.id();
            let assignment = assign_channels(d)?;
            let dir = split_dir.join(&id);
            let [ch0, ch1] = render_channels(d, &assignment, config.sample_rate_hz)?;
            write_if_changed(&dir.join("ch0.wav"), &ch0)?;
            write_if_changed(&dir.join("ch1.wav"), &ch1)?;
            let mut sidecar = serde_json::to_vec_pretty(&assignment)?;
            sidecar.push(b'\n');
            write_if_changed(&dir.join("channels.json"), &sidecar)?;

            let entry = PackagedDialogue {
                dialogue_id: id.clone(),
                doc_id: d.doc_id.clone(),
                source: d.source,
                split: name.to_string(),
                start_s: d.start_s,
                end_s: d.end_s,
                duration_s: d.duration_s(),
                speakers: d.speakers.clone(),
                turns: d.turns.clone(),
                channels: assignment.channels,
                speaker_channel_map: assignment.speaker_channel_map,
                channel_consistent: assignment.channel_consistent,
                audio: [format!("{id}/ch0.wav"), format!("{id}/ch1.wav")],
            };
            serde_json::to_writer(&mut lines, &entry)?;
            lines.push(b'\n');
            expected.insert(id);
        }
        remove_stale(&split_dir, &expected)?;
        write_if_changed(&split_dir.join("manifest.jsonl"), &lines)?;
    }

    let stats = StatsReport::from_dialogues(sorted.iter().copied());
    let mut stats_json = serde_json::to_vec_pretty(&stats)?;
    stats_json.push(b'\n');
    write_if_changed(&output_dir.join("stats.json"), &stats_json)?;

    Ok(PackageSummary {
        train: splits.train.len(),
        valid: splits.valid.len(),
        test: splits.test.len(),
        stats,
    })
}

fn remove_stale(split_dir: &Path, expected: &BTreeSet<String>) -> Result<()> {
    for entry in fs::read_dir(split_dir).map_err(|e| Error::io(split_dir, e))? {
        let path = entry.map_err(|e| Error::io(split_dir, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        if path.is_dir() && !expected.contains(&name) {
            fs::remove_dir_all(&path).map_err(|e| Error::io(&path, e))?;
        } else if path.is_file() && name.ends_with(".tmp") {
            fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}

/// Digest over every file path and content under `dir`, in sorted path
/// order.
pub fn tree_hash(dir: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    files.sort();
    let mut acc = Vec::new();
    for rel in files {
        let path = dir.join(&rel);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        acc.extend_from_slice(rel.as_bytes());
        acc.push(0);
        acc.extend_from_slice(sha256_hex(&bytes).as_bytes());
        acc.push(b'\n');
    }
    Ok(sha256_hex(&acc))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::write_tone;
    use crate::worker::mock::MockBackend;
    use proptest::prelude::*;

    fn dlg(speakers: &[&str]) -> Dialogue {
        let turns = speakers
            .iter()
            .enumerate()
            .map(|(i, s)| DiarizationTurn::new(*s, i as f64, i as f64 + 1.0))
            .collect();
        Dialogue::from_turns("doc", Source::Local, 0, turns).unwrap()
    }

    #[test]
    fn two_speaker_alternation() {
        let a = assign_channels(&dlg(&["A", "B", "A"])).unwrap();
        assert_eq!(a.channels, vec![0, 1, 0]);
        assert_eq!(a.speaker_channel_map, Some(BTreeMap::from([("A".into(), 0), ("B".into(), 1)])));
        assert!(a.channel_consistent);
    }

    #[test]
    fn single_speaker_stays() {
        let a = assign_channels(&dlg(&["A", "A"])).unwrap();
        assert_eq!(a.channels, vec![0, 0]);
        assert_eq!(a.speaker_channel_map, None);
    }

    #[test]
    fn three_speakers_collide() {
        let a = assign_channels(&dlg(&["A", "B", "C", "A"])).unwrap();
        assert_eq!(a.channels, vec![0, 1, 0, 1]);
        assert_eq!(a.speaker_channel_map, None);
        assert!(!a.channel_consistent);
    }

    #[test]
    fn empty_dialogue_errors() {
        let mut d = dlg(&["A"]);
        d.turns.clear();
        assert!(assign_channels(&d).is_err());
    }

    #[test]
    fn count_split() {
        let items: Vec<u32> = (0..10).collect();
        let s = split_dataset(&items, &SplitSpec::counts(8, 1, 1, 42)).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (8, 1, 1));
        let mut all: Vec<u32> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(s, split_dataset(&items, &SplitSpec::counts(8, 1, 1, 42)).unwrap());
    }

    #[test]
    fn fraction_split_rounding() {
        let items: Vec<u32> = (0..100).collect();
        let s = split_dataset(&items, &SplitSpec::fractions(0.8, 0.1, 0.1, 3)).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (80, 10, 10));
    }

    #[test]
    fn invalid_specs() {
        let items: Vec<u32> = (0..5).collect();
        assert!(split_dataset(&items, &SplitSpec::counts(4, 1, 1, 0)).is_err());
        assert!(split_dataset(&items, &SplitSpec::fractions(0.5, 0.1, 0.1, 0)).is_err());
    }

    proptest! {
        #[test]
        fn split_is_a_partition(
            n in 0usize..300,
            valid in 0usize..50,
            test in 0usize..50,
            seed in any::<u64>(),
            use_fractions in any::<bool>(),
            fv in 0.0f64..0.5,
            ft in 0.0f64..0.5,
        ) {
            let spec = if use_fractions {
                SplitSpec::fractions(1.0 - fv - ft, fv, ft, seed)
            } else {
                SplitSpec::counts(0, valid.min(n), test.min(n - valid.min(n)), seed)
            };
            let items: Vec<usize> = (0..n).collect();
            let s = split_dataset(&items, &spec).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.valid).chain(&s.test).copied().collect();
            prop_assert_eq!(all.len(), n);
            all.sort();
            all.dedup();
            prop_assert_eq!(all.len(), n);
        }

        #[test]
        fn consecutive_channels_follow_speakers(speakers in prop::collection::vec("[A-D]", 1..40)) {
            let refs: Vec<&str> = speakers.iter().map(String::as_str).collect();
            let d = dlg(&refs);
            let a = assign_channels(&d).unwrap();
            for i in 1..refs.len() {
                prop_assert_eq!(refs[i] == refs[i - 1], a.channels[i] == a.channels[i - 1]);
            }
        }
    }

    fn cleansed_fixture(dir: &Path) -> Vec<Dialogue> {
        let src = dir.join("src.wav");
        write_tone(&src, 8_000, 30.0, 200.0).unwrap();
        let backend = MockBackend::all();
        (0..3)
            .map(|i| {
                let start = i as f64 * 10.0;
                let turns = vec![
                    DiarizationTurn::new("A", start, start + 4.0),
                    DiarizationTurn::new("B", start + 4.0, start + 8.0),
                ];
                let mut d = Dialogue::from_turns("doc", Source::Podcast, i, turns).unwrap();
                let out = dir.join(format!("enh-{i}.wav"));
                d.enhanced_path = Some(cleanse(&d, &src, &backend, &out).unwrap().display().to_string());
                d
            })
            .collect()
    }

    #[test]
    fn cleanse_preserves_duration() {
        let dir = tempfile::tempdir().unwrap();
        let ds = cleansed_fixture(dir.path());
        for d in &ds {
            let got = probe_wav(Path::new(d.enhanced_path.as_ref().unwrap())).unwrap().duration_s;
            assert!((got - 8.0).abs() <= DURATION_TOLERANCE_S);
        }
    }

    #[test]
    fn package_tree_and_resume() {
        let dir = tempfile::tempdir().unwrap();
        let ds = cleansed_fixture(dir.path());
        let config = PackageConfig {
            sample_rate_hz: 16_000,
            split: SplitSpec::counts(1, 1, 1, 7),
        };
        let out = dir.path().join("release");
        let summary = package(&ds, &out, &config).unwrap();
        assert_eq!((summary.train, summary.valid, summary.test), (1, 1, 1));
        let mut wavs = 0;
        let mut lines = 0;
        for split in SPLITS {
            let m = fs::read_to_string(out.join(split).join("manifest.jsonl")).unwrap();
            lines += m.lines().count();
            for line in m.lines() {
                let p: PackagedDialogue = serde_json::from_str(line).unwrap();
                assert!(out.join(split).join(&p.audio[0]).is_file());
                assert!(out.join(split).join(&p.audio[1]).is_file());
                wavs += 1;
            }
        }
        assert_eq!((wavs, lines), (3, 3));
        let info = probe_wav(&out.join("train").join(&ds[0].id()).join("ch0.wav")).ok();
        if let Some(info) = info {
            assert_eq!(info.sample_rate_hz, 16_000);
        }
        let full = tree_hash(&out).unwrap();

        // Damage the tree and add a stray directory, then resume.
        let victim = fs::read_dir(out.join("valid")).unwrap().flatten().find(|e| e.path().is_dir()).unwrap().path();
        fs::remove_file(victim.join("ch1.wav")).unwrap();
        fs::write(out.join("test").join("manifest.jsonl"), b"partial").unwrap();
        fs::create_dir_all(out.join("train").join("stale_0001")).unwrap();
        package(&ds, &out, &config).unwrap();
        assert_eq!(tree_hash(&out).unwrap(), full);
    }

    #[test]
    fn empty_release_tree() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("release");
        let summary = package(&[], &out, &PackageConfig {
            sample_rate_hz: 16_000,
            split: SplitSpec::counts(0, 0, 0, 1),
        })
        .unwrap();
        assert_eq!(summary.stats.all.num_dialogues, 0);
        assert_eq!(summary.stats.all.total_hours, 0.0);
        for split in SPLITS {
            assert_eq!(fs::read(out.join(split).join("manifest.jsonl")).unwrap(), b"");
        }
        assert!(out.join("stats.json").is_file());
    }
}
