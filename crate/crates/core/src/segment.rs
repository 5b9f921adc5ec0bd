//! Dialogue extraction from diarization turns.
//!
//! A document's turns are cut into dialogues wherever the silence after the
//! furthest turn end seen so far reaches the gap threshold. Each dialogue is
//! then kept only if no single speaker holds more than the dominance
//! threshold of the summed turn time and it has enough distinct speakers.
//!
//! All comparisons run on integer microseconds so that boundary cases
//! (a gap of exactly 5 s, a share of exactly 80 %) resolve exactly.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    speaking_time_us, to_us, turns_sorted, AudioDocument, Dialogue, DiarizationTurn,
    RejectionReason, SegmentationConfig, Source, Stage, StageStatus,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceReport {
    pub speaking_time_s: BTreeMap<String, f64>,
    pub total_speech_s: f64,
    pub max_speaker: String,
    pub max_ratio: f64,
}

fn check_turns(turns: &[DiarizationTurn]) -> Result<()> {
    for t in turns {
        if !(t.start_s.is_finite() && t.end_s.is_finite()) || t.start_s < 0.0 {
            return Err(Error::invalid(format!(
                "turn {}[{}, {}] has invalid bounds",
                t.speaker, t.start_s, t.end_s
            )));
        }
        if t.start_s >= t.end_s {
            return Err(Error::invalid(format!(
                "turn {}[{}, {}] must have start < end",
                t.speaker, t.start_s, t.end_s
            )));
        }
    }
    if !turns_sorted(turns) {
        return Err(Error::invalid("turns must be sorted by (start, end, speaker)"));
    }
    Ok(())
}

/// Splits sorted turns into dialogues at silences of at least
/// `gap_threshold_s`, measured from the rolling maximum end time.
pub fn split_into_dialogues(
    doc_id: &str,
    source: Source,
    turns: &[DiarizationTurn],
    config: &SegmentationConfig,
) -> Result<Vec<Dialogue>> {
    config.validate()?;
    check_turns(turns)?;

    let gap_us = to_us(config.gap_threshold_s);
    let mut groups: Vec<Vec<DiarizationTurn>> = Vec::new();
    let mut current: Vec<DiarizationTurn> = Vec::new();
    let mut rolling_end = i64::MIN;

    for turn in turns {
        let start = to_us(turn.start_s);
        if !current.is_empty() && start - rolling_end >= gap_us {
            groups.push(std::mem::take(&mut current));
            rolling_end = i64::MIN;
        }
        rolling_end = rolling_end.max(to_us(turn.end_s));
        current.push(turn.clone());
    }
    if !current.is_empty() {
        groups.push(current);
    }

    groups
        .into_iter()
        .enumerate()
        .map(|(i, g)| Dialogue::from_turns(doc_id, source, i as u32, g))
        .collect()
}

pub fn speaker_dominance(dialogue: &Dialogue) -> Result<DominanceReport> {
    if dialogue.turns.is_empty() {
        return Err(Error::invalid(format!(
            "dialogue {} has no turns",
            dialogue.id()
        )));
    }
    let times = speaking_time_us(&dialogue.turns);
    let total: i64 = times.values().sum();

    // BTreeMap iterates in label order, so the first maximum wins ties.
    let (max_speaker, max_us) = times
        .iter()
        .fold(None::<(&String, i64)>, |best, (spk, &us)| match best {
            Some((_, b)) if b >= us => best,
            _ => Some((spk, us)),
        })
        .expect("nonempty");

    Ok(DominanceReport {
        speaking_time_s: times
            .iter()
            .map(|(s, us)| (s.clone(), *us as f64 / 1e6))
            .collect(),
        total_speech_s: total as f64 / 1e6,
        max_speaker: max_speaker.clone(),
        max_ratio: max_us as f64 / total as f64,
    })
}

/// Decides whether a dialogue is kept. Dominance is checked before the
/// speaker count, so single-speaker dialogues report `Dominance`.
pub fn rejection_reason(
    dialogue: &Dialogue,
    config: &SegmentationConfig,
) -> Result<Option<RejectionReason>> {
    let report = speaker_dominance(dialogue)?;
    if report.max_ratio > config.dominance_threshold {
        return Ok(Some(RejectionReason::Dominance));
    }
    if dialogue.speakers.len() < config.min_speakers {
        return Ok(Some(RejectionReason::TooFewSpeakers));
    }
    Ok(None)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DialoguePartition {
    pub retained: Vec<Dialogue>,
    pub rejected: Vec<(Dialogue, RejectionReason)>,
}

pub fn filter_valid_dialogues(
    dialogues: Vec<Dialogue>,
    config: &SegmentationConfig,
) -> Result<DialoguePartition> {
    config.validate()?;
    let mut out = DialoguePartition::default();
    for d in dialogues {
        match rejection_reason(&d, config)? {
            None => out.retained.push(d),
            Some(reason) => out.rejected.push((d, reason)),
        }
    }
    Ok(out)
}

/// Full segmentation of one document. Returns every dialogue found, with
/// `segment` status and rejection reason filled in, in temporal order.
pub fn segment_document(
    doc: &mut AudioDocument,
    turns: &[DiarizationTurn],
    config: &SegmentationConfig,
) -> Result<Vec<Dialogue>> {
    if let Some(t) = turns.iter().find(|t| t.end_s > doc.duration_s + 1e-6) {
        return Err(Error::invalid(format!(
            "turn {}[{}, {}] extends past document end {}",
            t.speaker, t.start_s, t.end_s, doc.duration_s
        )));
    }
    let dialogues = split_into_dialogues(&doc.doc_id, doc.source, turns, config)?;
    let mut out = Vec::with_capacity(dialogues.len());
    for mut d in dialogues {
        match rejection_reason(&d, config)? {
            None => {
                d.stage_status.insert(Stage::Segment, StageStatus::Done);
            }
            Some(reason) => {
                d.stage_status.insert(Stage::Segment, StageStatus::Rejected);
                d.rejection = Some(reason);
            }
        }
        out.push(d);
    }
    doc.mark(Stage::Segment, StageStatus::Done);
    Ok(out)
}

/// Split, score and filter one document's turns; returns the retained
/// dialogues and records the `segment` stage on the document.
pub fn extract_dialogues(
    doc: &mut AudioDocument,
    turns: &[DiarizationTurn],
    config: &SegmentationConfig,
) -> Result<Vec<Dialogue>> {
    Ok(segment_document(doc, turns, config)?
        .into_iter()
        .filter(|d| d.rejection.is_none())
        .collect())
}
