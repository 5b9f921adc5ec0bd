//! Language-identification filtering: keep a document only when its
//! target-language probability strictly exceeds the threshold.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AudioDocument, LidConfig, Source, Stage, StageStatus};
use crate::ratio::Ratio;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageIdResult {
    pub doc_id: String,
    pub probabilities: BTreeMap<String, f64>,
    pub p_target: f64,
}

impl LanguageIdResult {
    pub fn new(
        doc_id: impl Into<String>,
        probabilities: BTreeMap<String, f64>,
        target_language: &str,
    ) -> Result<Self> {
        let doc_id = doc_id.into();
        for (lang, p) in &probabilities {
            if !(0.0..=1.0).contains(p) {
                return Err(Error::invalid(format!(
                    "{doc_id}: probability for `{lang}` is {p}, outside [0, 1]"
                )));
            }
        }
        let total: f64 = probabilities.values().sum();
        if total > 1.0 + 1e-6 {
            return Err(Error::invalid(format!(
                "{doc_id}: language probabilities sum to {total}"
            )));
        }
        let p_target = probabilities.get(target_language).copied().unwrap_or(0.0);
        Ok(Self {
            doc_id,
            probabilities,
            p_target,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LidPartition {
    pub retained: Vec<AudioDocument>,
    pub rejected: Vec<AudioDocument>,
}

/// Partitions documents by `p_target > threshold`, preserving input order
/// within each side.
pub fn filter_by_language(
    docs: Vec<AudioDocument>,
    results: &HashMap<String, LanguageIdResult>,
    config: &LidConfig,
) -> Result<LidPartition> {
    config.validate()?;
    let mut out = LidPartition::default();
    for mut doc in docs {
        let result = results
            .get(&doc.doc_id)
            .ok_or_else(|| Error::MissingLanguageResult(doc.doc_id.clone()))?;
        doc.p_target = Some(result.p_target);
        if result.p_target > config.threshold {
            doc.mark(Stage::Lid, StageStatus::Done);
            out.retained.push(doc);
        } else {
            doc.mark(Stage::Lid, StageStatus::Rejected);
            out.rejected.push(doc);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct YieldReport {
    pub per_source: BTreeMap<Source, Ratio>,
    pub overall: Ratio,
}

impl YieldReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<10} {:>10} {:>10} {:>8}", "source", "retained", "total", "yield");
        for (src, r) in self.per_source.iter().map(|(k, v)| (k.as_str(), v)).chain([("all", &self.overall)]) {
            let _ = writeln!(
                s,
                "{:<10} {:>10} {:>10} {:>8}",
                src,
                r.retained,
                r.total,
                r.percent_string()
            );
        }
        s
    }
}

pub fn lid_yield_report(partition: &LidPartition) -> YieldReport {
    let mut per_source: BTreeMap<Source, Ratio> =
        Source::ALL.iter().map(|s| (*s, Ratio::default())).collect();
    for d in &partition.retained {
        let r = per_source.get_mut(&d.source).expect("all sources present");
        r.retained += 1;
        r.total += 1;
    }
    for d in &partition.rejected {
        per_source.get_mut(&d.source).expect("all sources present").total += 1;
    }
    let overall = Ratio::new(
        partition.retained.len() as u64,
        (partition.retained.len() + partition.rejected.len()) as u64,
    );
    YieldReport {
        per_source,
        overall,
    }
}
