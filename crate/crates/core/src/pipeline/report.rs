//! Per-stage yield funnel, read back from the ledger and manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::manifest::{read_shard, Shard};
use crate::model::{Dialogue, Source, Stage, StageStatus};
use crate::package::{PackagedDialogue, SPLITS};
use crate::pipeline::ledger::{latest_done, latest, Ledger, LedgerEntry};
use crate::pipeline::Layout;
use crate::ratio::Ratio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RowState {
    Pending,
    Partial,
    Done,
}

/// How many of a stage's inputs it passed on.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunnelRow {
    pub stage: String,
    /// `documents` or `dialogues`.
    pub unit: &'static str,
    pub state: RowState,
    pub per_source: BTreeMap<Source, Ratio>,
    pub overall: Ratio,
}

impl FunnelRow {
    fn new(stage: &str, unit: &'static str, state: RowState) -> Self {
        Self {
            stage: stage.to_string(),
            unit,
            state,
            per_source: Source::ALL.iter().map(|s| (*s, Ratio::default())).collect(),
            overall: Ratio::default(),
        }
    }

    fn count(&mut self, source: Source, passed: bool) {
        let r = self.per_source.get_mut(&source).expect("all sources present");
        r.total += 1;
        self.overall.total += 1;
        if passed {
            r.retained += 1;
            self.overall.retained += 1;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FunnelReport {
    pub rows: Vec<FunnelRow>,
}

impl FunnelReport {
    pub fn row(&self, stage: &str) -> Option<&FunnelRow> {
        self.rows.iter().find(|r| r.stage == stage)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:<9} {:<8} {:>14} {:>14} {:>14} {:>14}",
            "stage", "unit", "state", "youtube", "podcast", "local", "all"
        );
        for r in &self.rows {
            let cell = |x: &Ratio| format!("{}/{} {}", x.retained, x.total, x.percent_string());
            let state = match r.state {
                RowState::Pending => "pending",
                RowState::Partial => "partial",
                RowState::Done => "done",
            };
            let _ = writeln!(
                s,
                "{:<10} {:<9} {:<8} {:>14} {:>14} {:>14} {:>14}",
                r.stage,
                r.unit,
                state,
                cell(&r.per_source[&Source::Youtube]),
                cell(&r.per_source[&Source::Podcast]),
                cell(&r.per_source[&Source::Local]),
                cell(&r.overall)
            );
        }
        s
    }
}

fn retained(d: &Dialogue) -> bool {
    d.rejection.is_none() && d.status(Stage::Segment) == StageStatus::Done
}

/// Shards of `stage` recorded as done, loaded; plus the row state.
fn done_shards(layout: &Layout, entries: &[LedgerEntry], stage: Stage, n: u32) -> Result<(RowState, Vec<Shard>)> {
    let mut shards = Vec::new();
    for i in 0..n {
        if latest_done(entries, stage, Some(i)).is_some() {
            shards.push(Shard::from_records(read_shard(&layout.shard_path(stage, i))?));
        }
    }
    let state = match shards.len() {
        0 => RowState::Pending,
        k if k as u32 == n => RowState::Done,
        _ => RowState::Partial,
    };
    Ok((state, shards))
}

/// Builds the funnel from the ledger. A missing ledger is an error; stages
/// without completed work show as pending.
pub fn funnel_report(layout: &Layout) -> Result<FunnelReport> {
    let entries = Ledger::read(&layout.ledger())?;
    let mut rows = Vec::new();

    let collect = latest_done(&entries, Stage::Collect, None).and_then(|e| e.shards);
    let Some(n) = collect else {
        for (stage, unit) in [
            ("collect", "documents"),
            ("lid", "documents"),
            ("diarize", "documents"),
            ("segment", "documents"),
            ("dialogues", "dialogues"),
            ("cleanse", "dialogues"),
            ("package", "dialogues"),
        ] {
            rows.push(FunnelRow::new(stage, unit, RowState::Pending));
        }
        return Ok(FunnelReport { rows });
    };

    let mut row = FunnelRow::new("collect", "documents", RowState::Done);
    for i in 0..n {
        for d in Shard::from_records(read_shard(&layout.shard_path(Stage::Collect, i))?).documents {
            row.count(d.source, d.is_done(Stage::Collect));
        }
    }
    rows.push(row);

    for (stage, gate) in [(Stage::Lid, Stage::Collect), (Stage::Diarize, Stage::Lid)] {
        let (state, shards) = done_shards(layout, &entries, stage, n)?;
        let mut row = FunnelRow::new(stage.as_str(), "documents", state);
        for d in shards.iter().flat_map(|s| &s.documents).filter(|d| d.is_done(gate)) {
            row.count(d.source, d.is_done(stage));
        }
        rows.push(row);
    }

    let (state, segment) = done_shards(layout, &entries, Stage::Segment, n)?;
    let mut docs = FunnelRow::new("segment", "documents", state);
    let mut dialogues = FunnelRow::new("dialogues", "dialogues", state);
    for shard in &segment {
        for doc in shard.documents.iter().filter(|d| d.is_done(Stage::Diarize)) {
            let kept = shard.dialogues.iter().any(|d| d.doc_id == doc.doc_id && retained(d));
            docs.count(doc.source, kept);
        }
        for d in &shard.dialogues {
            dialogues.count(d.source, retained(d));
        }
    }
    rows.push(docs);
    rows.push(dialogues);

    let (state, cleansed) = done_shards(layout, &entries, Stage::Cleanse, n)?;
    let mut row = FunnelRow::new("cleanse", "dialogues", state);
    let mut cleansed_count: BTreeMap<Source, u64> = BTreeMap::new();
    for d in cleansed.iter().flat_map(|s| &s.dialogues).filter(|d| retained(d)) {
        let ok = d.status(Stage::Cleanse) == StageStatus::Done;
        row.count(d.source, ok);
        if ok {
            *cleansed_count.entry(d.source).or_default() += 1;
        }
    }
    rows.push(row);

    let package_done = latest(&entries, Stage::Package, None).is_some_and(|e| e.status == super::EntryStatus::Done);
    let mut row = FunnelRow::new(
        "package",
        "dialogues",
        if package_done { RowState::Done } else { RowState::Pending },
    );
    if package_done {
        let mut packaged: BTreeMap<Source, u64> = BTreeMap::new();
        for split in SPLITS {
            let path = layout.output_dir.join(split).join("manifest.jsonl");
            let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let p: PackagedDialogue = serde_json::from_str(line).map_err(|e| Error::Parse {
                    path: path.clone(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
                *packaged.entry(p.source).or_default() += 1;
            }
        }
        for s in Source::ALL {
            let r = Ratio::new(
                packaged.get(&s).copied().unwrap_or(0),
                cleansed_count.get(&s).copied().unwrap_or(0),
            );
            row.overall.retained += r.retained;
            row.overall.total += r.total;
            row.per_source.insert(s, r);
        }
    }
    rows.push(row);
    Ok(FunnelReport { rows })
}
