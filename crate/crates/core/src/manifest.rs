//! Tab-separated dataset manifests.
//!
//! One record per line: `id`, `label`, `video_path`, `score_path`,
//! `feature_path`. Path fields may be empty until a later stage fills them.
//! Lines starting with `#` are comments. Relative paths are taken relative to
//! the manifest's own directory.

use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detector::Label;

pub const FIELD_COUNT: usize = 5;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{origin}, line {line}: {reason}")]
    Parse { origin: String, line: u64, reason: String },
    #[error("record {id:?}: field {field} contains a tab or newline")]
    Unwritable { id: String, field: &'static str },
    #[error("record {id:?} has no {field}")]
    MissingField { id: String, field: &'static str },
    #[error("duplicate id {0:?}")]
    DuplicateId(String),
}

type Result<T> = std::result::Result<T, ManifestError>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub label: Label,
    pub video_path: Option<PathBuf>,
    pub score_path: Option<PathBuf>,
    pub feature_path: Option<PathBuf>,
}

impl ManifestRecord {
    pub fn new(id: impl Into<String>, label: Label) -> Self {
        Self {
            id: id.into(),
            label,
            video_path: None,
            score_path: None,
            feature_path: None,
        }
    }

    fn require<'a>(&'a self, field: &'static str, value: &'a Option<PathBuf>) -> Result<&'a Path> {
        value.as_deref().ok_or_else(|| ManifestError::MissingField {
            id: self.id.clone(),
            field,
        })
    }

    pub fn video(&self) -> Result<&Path> {
        self.require("video_path", &self.video_path)
    }

    pub fn scores(&self) -> Result<&Path> {
        self.require("score_path", &self.score_path)
    }

    pub fn features(&self) -> Result<&Path> {
        self.require("feature_path", &self.feature_path)
    }

    /// Joins relative paths onto `base`.
    pub fn resolved(&self, base: &Path) -> Self {
        let fix = |p: &Option<PathBuf>| p.as_ref().map(|p| if p.is_relative() { base.join(p) } else { p.clone() });
        Self {
            id: self.id.clone(),
            label: self.label,
            video_path: fix(&self.video_path),
            score_path: fix(&self.score_path),
            feature_path: fix(&self.feature_path),
        }
    }
}

fn reader(bytes: &[u8]) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .has_headers(false)
        .quoting(false)
        .comment(Some(b'#'))
        .flexible(true)
        .from_reader(bytes)
}

/// Parses manifest text; `origin` names the source in diagnostics.
pub fn parse_manifest(text: &str, origin: &str) -> Result<Vec<ManifestRecord>> {
    let mut out: Vec<ManifestRecord> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for row in reader(text.as_bytes()).records() {
        let err = |line: u64, reason: String| ManifestError::Parse {
            origin: origin.to_owned(),
            line,
            reason,
        };
        let row = row.map_err(|e| {
            let line = e.position().map(|p| p.line()).unwrap_or(0);
            err(line, e.to_string())
        })?;
        let line = row.position().map(|p| p.line()).unwrap_or(0);
        if row.len() == 1 && row[0].trim().is_empty() {
            continue;
        }
        if row.len() != FIELD_COUNT {
            return Err(err(line, format!("expected {FIELD_COUNT} tab-separated fields, found {}", row.len())));
        }
        let rec: ManifestRecord = row.deserialize(None).map_err(|e| err(line, e.to_string()))?;
        if rec.id.is_empty() {
            return Err(err(line, "empty id".into()));
        }
        if !seen.insert(rec.id.clone()) {
            return Err(ManifestError::DuplicateId(rec.id));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Reads a manifest and resolves its relative paths.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let text = std::fs::read_to_string(path).map_err(|source| ManifestError::Io {
        path: path.to_owned(),
        source,
    })?;
    let base = path.parent().unwrap_or(Path::new(""));
    Ok(parse_manifest(&text, &path.display().to_string())?
        .into_iter()
        .map(|r| r.resolved(base))
        .collect())
}

fn field_text(rec: &ManifestRecord, field: &'static str, value: &Option<PathBuf>) -> Result<String> {
    let s = value.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
    if s.contains(['\t', '\n', '\r']) {
        return Err(ManifestError::Unwritable { id: rec.id.clone(), field });
    }
    Ok(s)
}

pub fn format_manifest(records: &[ManifestRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        if r.id.is_empty() || r.id.contains(['\t', '\n', '\r', '#']) {
            return Err(ManifestError::Unwritable { id: r.id.clone(), field: "id" });
        }
        let fields = [
            r.id.clone(),
            r.label.to_string(),
            field_text(r, "video_path", &r.video_path)?,
            field_text(r, "score_path", &r.score_path)?,
            field_text(r, "feature_path", &r.feature_path)?,
        ];
        out.push_str(&fields.join("\t"));
        out.push('\n');
    }
    Ok(out)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let text = format_manifest(records)?;
    std::fs::write(path, text).map_err(|source| ManifestError::Io {
        path: path.to_owned(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_fields_are_none() {
        let recs = parse_manifest("a\treal\tv/a.t\t\t\n", "m").unwrap();
        assert_eq!(recs[0].video_path.as_deref(), Some(Path::new("v/a.t")));
        assert_eq!(recs[0].score_path, None);
        assert_eq!(recs[0].feature_path, None);
        assert!(matches!(recs[0].scores(), Err(ManifestError::MissingField { field: "score_path", .. })));
    }

    #[test]
    fn comments_and_blank_lines_skipped() {
        let recs = parse_manifest("# header\n\nb\tfake\t\t\t\n", "m").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].label, Label::Fake);
    }

    #[test]
    fn bad_rows_report_line() {
        match parse_manifest("a\treal\t\t\t\nb\treal\t\t\n", "m.tsv") {
            Err(ManifestError::Parse { line, origin, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(origin, "m.tsv");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_manifest("a\tmaybe\t\t\t\n", "m"), Err(ManifestError::Parse { .. })));
        assert!(matches!(parse_manifest("a\treal\t\t\t\na\tfake\t\t\t\n", "m"), Err(ManifestError::DuplicateId(_))));
    }

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = ManifestRecord::new("x", Label::Real);
        rec.video_path = Some("videos/x.tensor".into());
        rec.score_path = Some("/abs/x.tensor".into());
        let path = dir.path().join("m.tsv");
        write_manifest(&path, &[rec]).unwrap();
        let back = read_manifest(&path).unwrap();
        assert_eq!(back[0].video_path.as_deref(), Some(dir.path().join("videos/x.tensor").as_path()));
        assert_eq!(back[0].score_path.as_deref(), Some(Path::new("/abs/x.tensor")));
    }

    #[test]
    fn tabs_in_paths_rejected() {
        let mut rec = ManifestRecord::new("x", Label::Real);
        rec.video_path = Some("a\tb".into());
        assert!(matches!(format_manifest(&[rec]), Err(ManifestError::Unwritable { .. })));
    }

    proptest! {
        #[test]
        fn format_parse_round_trip(ids in proptest::collection::hash_set("[a-z0-9_-]{1,8}", 0..6), fake in any::<bool>(), path in proptest::option::of("[a-zA-Z0-9_./ -]{1,20}")) {
            let recs: Vec<ManifestRecord> = ids.into_iter().map(|id| {
                let mut r = ManifestRecord::new(id, if fake { Label::Fake } else { Label::Real });
                r.feature_path = path.clone().map(PathBuf::from);
                r
            }).collect();
            let text = format_manifest(&recs).unwrap();
            prop_assert_eq!(parse_manifest(&text, "m").unwrap(), recs);
        }
    }
}
