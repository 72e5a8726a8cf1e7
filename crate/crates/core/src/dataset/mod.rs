//! Cohort manifests, site-stratified splits and the synthetic cohort.

mod split;
mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphbuild::TimeSeriesMatrix;

pub use split::{controlled_round, largest_remainder, stratified_split, Split, SplitAssignment, DEFAULT_FRACTIONS};
pub use synthetic::{generate_synthetic, BASE_CORRELATION, DEFAULT_HETEROGENEITY, planted_star, synthesize, SyntheticCohort, SyntheticSpec, SyntheticSubject};

/// Diagnostic class. ASD is the positive class (index 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    #[serde(rename = "TD")]
    Td,
    #[serde(rename = "ASD")]
    Asd,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Td => 0,
            Label::Asd => 1,
        }
    }

    pub fn from_class_index(idx: usize) -> Option<Label> {
        match idx {
            0 => Some(Label::Td),
            1 => Some(Label::Asd),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Td => "TD",
            Label::Asd => "ASD",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "ASD" => Ok(Label::Asd),
            "TD" => Ok(Label::Td),
            other => Err(format!("unknown label {other:?} (expected \"ASD\" or \"TD\")")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub label: Label,
    pub site_id: String,
    pub timeseries_path: PathBuf,
}

impl SubjectRecord {
    pub fn load_timeseries(&self) -> Result<TimeSeriesMatrix> {
        TimeSeriesMatrix::read_csv(&self.timeseries_path, self.subject_id.clone())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    subject_id: String,
    label: String,
    site_id: String,
    timeseries_path: PathBuf,
}

/// Parses a JSON-lines manifest. Relative `timeseries_path`s are resolved
/// against the manifest's directory; blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<SubjectRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut records = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(raw_line).map_err(|e| parse_err(line, format!("malformed record: {e}")))?;
        let label: Label = raw.label.parse().map_err(|e| parse_err(line, e))?;
        if raw.subject_id.is_empty() {
            return Err(parse_err(line, "empty subject_id".into()));
        }
        if let Some(first) = seen.insert(raw.subject_id.clone(), line) {
            return Err(parse_err(
                line,
                format!("duplicate subject_id {:?} (first seen on line {first})", raw.subject_id),
            ));
        }
        let timeseries_path = if raw.timeseries_path.is_relative() {
            base.join(&raw.timeseries_path)
        } else {
            raw.timeseries_path
        };
        records.push(SubjectRecord {
            subject_id: raw.subject_id,
            label,
            site_id: raw.site_id,
            timeseries_path,
        });
    }
    if records.is_empty() {
        return Err(parse_err(0, "empty manifest".into()));
    }
    Ok(records)
}

/// One manifest line, with the path written as given.
pub fn manifest_line(record: &SubjectRecord) -> String {
    serde_json::json!({
        "subject_id": record.subject_id,
        "label": record.label,
        "site_id": record.site_id,
        "timeseries_path": record.timeseries_path,
    })
    .to_string()
}
