//! Condition reports and the merged report document.
//!
//! Serialization is deliberately boring: struct field order is fixed, maps
//! are BTreeMaps, and no wall-clock data enters the document, so identical
//! (config, seed) runs produce byte-identical JSON at any thread count.

use crate::error::{Error, Result};
use crate::stats::Stat;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

pub const REPORT_SCHEMA: &str = "smpv-report-1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "HOLDS")]
    Holds,
    #[serde(rename = "VIOLATED")]
    Violated,
    #[serde(rename = "INCONCLUSIVE")]
    Inconclusive,
}

/// Statistical decision rule: a condition "X <= 0 a.e." holds at tolerance
/// `tol` unless some tested cell has mean - 2 stderr above it.
pub fn verdict_from(max_lower: f64, tol: f64) -> Verdict {
    if max_lower > tol {
        Verdict::Violated
    } else {
        Verdict::Holds
    }
}

/// Per-(t, v) statistics of a condition functional.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellStat {
    pub t: f64,
    pub v: Vec<f64>,
    pub mean: f64,
    pub stderr: f64,
    /// Largest positive part seen across paths at this cell.
    pub max_positive: f64,
}

/// Where the numbers came from.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub subject: String,
    pub seed: u64,
    pub steps: usize,
    pub paths: usize,
    pub backend: String,
    pub version: String,
}

/// One evaluated condition with verdict, tolerance and full provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: String,
    pub verdict: Verdict,
    pub tolerance: f64,
    pub tol_scale: f64,
    pub summary: BTreeMap<String, Stat>,
    pub cells: Vec<CellStat>,
    pub notes: Vec<String>,
    pub provenance: Provenance,
}

impl ConditionReport {
    pub fn push_note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    pub fn stat(&self, key: &str) -> Option<Stat> {
        self.summary.get(key).copied()
    }
}

/// Top-level document: one or more condition reports under one schema tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportDocument {
    pub schema: String,
    pub reports: Vec<ConditionReport>,
}

impl ReportDocument {
    pub fn new(reports: Vec<ConditionReport>) -> Self {
        ReportDocument {
            schema: REPORT_SCHEMA.into(),
            reports,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<ReportDocument> {
        let doc: ReportDocument = serde_json::from_str(s)?;
        if doc.schema != REPORT_SCHEMA {
            return Err(Error::SchemaMismatch(format!(
                "expected {REPORT_SCHEMA}, found {}",
                doc.schema
            )));
        }
        Ok(doc)
    }
}

/// Merge documents into one summary with stable ordering.
///
/// All inputs must carry the same schema version; report order is the input
/// order, so merging is deterministic.
pub fn emit_report(documents: &[ReportDocument]) -> Result<ReportDocument> {
    if documents.is_empty() {
        return Err(Error::SchemaMismatch("no reports to merge".into()));
    }
    let mut reports = Vec::new();
    for doc in documents {
        if doc.schema != REPORT_SCHEMA {
            return Err(Error::SchemaMismatch(format!(
                "cannot merge schema {} with {REPORT_SCHEMA}",
                doc.schema
            )));
        }
        reports.extend(doc.reports.iter().cloned());
    }
    Ok(ReportDocument::new(reports))
}

/// Process exit code contract: 0 all hold, 2 any violated, 3 any
/// inconclusive (and none violated).
pub fn exit_code(reports: &[ConditionReport]) -> i32 {
    if reports.iter().any(|r| r.verdict == Verdict::Violated) {
        2
    } else if reports.iter().any(|r| r.verdict == Verdict::Inconclusive) {
        3
    } else {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_report(verdict: Verdict) -> ConditionReport {
        let mut summary = BTreeMap::new();
        summary.insert("max_lower".into(), Stat::new(-0.5, 0.01));
        ConditionReport {
            condition: "maximum_principle".into(),
            verdict,
            tolerance: 0.05,
            tol_scale: 5.0,
            summary,
            cells: vec![],
            notes: vec![],
            provenance: Provenance {
                subject: "NULL".into(),
                seed: 1,
                steps: 64,
                paths: 256,
                backend: "analytic".into(),
                version: crate::VERSION.into(),
            },
        }
    }

    #[test]
    fn verdict_rule() {
        assert_eq!(verdict_from(-0.1, 0.05), Verdict::Holds);
        assert_eq!(verdict_from(0.051, 0.05), Verdict::Violated);
    }

    #[test]
    fn single_report_round_trips() {
        let doc = ReportDocument::new(vec![sample_report(Verdict::Holds)]);
        let json = doc.to_json().unwrap();
        let back = ReportDocument::from_json(&json).unwrap();
        assert_eq!(back.reports.len(), 1);
        assert_eq!(back.to_json().unwrap(), json);
    }

    #[test]
    fn merge_is_identity_for_single_doc() {
        let doc = ReportDocument::new(vec![sample_report(Verdict::Holds)]);
        let merged = emit_report(std::slice::from_ref(&doc)).unwrap();
        assert_eq!(merged.to_json().unwrap(), doc.to_json().unwrap());
    }

    #[test]
    fn mixed_schema_rejected() {
        let good = ReportDocument::new(vec![sample_report(Verdict::Holds)]);
        let mut bad = good.clone();
        bad.schema = "smpv-report-0".into();
        let err = emit_report(&[good, bad]).unwrap_err();
        assert!(matches!(err, Error::SchemaMismatch(_)));
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&[sample_report(Verdict::Holds)]), 0);
        assert_eq!(
            exit_code(&[sample_report(Verdict::Holds), sample_report(Verdict::Violated)]),
            2
        );
        assert_eq!(
            exit_code(&[
                sample_report(Verdict::Inconclusive),
                sample_report(Verdict::Holds)
            ]),
            3
        );
        assert_eq!(
            exit_code(&[
                sample_report(Verdict::Inconclusive),
                sample_report(Verdict::Violated)
            ]),
            2
        );
    }
}
