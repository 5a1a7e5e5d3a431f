//! The corpus index: a tab-separated listing of scenario files with their
//! template and recorded outcome.
//!
//! ```text
//! # repairlab corpus index v1
//! S3_violation_000.toml	S3_crossing	collision
//! S3_success_000.toml	S3_crossing	success
//! extra.toml	S1_left_turn	-
//! ```

use crate::error::{Error, Result};
use crate::sim::{EpisodeResult, TemplateId};

pub const INDEX_FILE: &str = "index.tsv";
const HEADER: &str = "# repairlab corpus index v1";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub file: String,
    pub template: TemplateId,
    /// `None` when the outcome has not been recorded.
    pub outcome: Option<EpisodeResult>,
}

fn parse_outcome(s: &str) -> Option<Option<EpisodeResult>> {
    match s {
        "-" => Some(None),
        "success" => Some(Some(EpisodeResult::Success)),
        "collision" => Some(Some(EpisodeResult::Collision)),
        "timeout" => Some(Some(EpisodeResult::Timeout)),
        _ => None,
    }
}

fn valid_file_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && !name.contains(['/', '\\', '\0'])
        && name != INDEX_FILE
}

pub fn parse_index(text: &str) -> Result<Vec<IndexEntry>> {
    let mut entries: Vec<IndexEntry> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |detail: String| Error::format("corpus index", format!("line {}: {detail}", n + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        let [file, template, outcome] = fields[..] else {
            return Err(bad(format!("expected 3 tab-separated fields, got {}", fields.len())));
        };
        if !valid_file_name(file) {
            return Err(bad(format!("invalid file name `{file}`")));
        }
        if entries.iter().any(|e| e.file == file) {
            return Err(bad(format!("duplicate file `{file}`")));
        }
        let template: TemplateId = template.parse().map_err(|e: Error| bad(e.to_string()))?;
        let outcome = parse_outcome(outcome).ok_or_else(|| bad(format!("unknown outcome `{outcome}`")))?;
        entries.push(IndexEntry {
            file: file.to_string(),
            template,
            outcome,
        });
    }
    Ok(entries)
}

pub fn write_index(entries: &[IndexEntry]) -> String {
    let mut out = String::from(HEADER);
    out.push('\n');
    for e in entries {
        let outcome = e.outcome.map_or("-", EpisodeResult::name);
        out.push_str(&format!("{}\t{}\t{}\n", e.file, e.template, outcome));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip() {
        let entries = vec![
            IndexEntry { file: "a.toml".into(), template: TemplateId::S3Crossing, outcome: Some(EpisodeResult::Collision) },
            IndexEntry { file: "b.toml".into(), template: TemplateId::S1LeftTurn, outcome: None },
        ];
        assert_eq!(parse_index(&write_index(&entries)).unwrap(), entries);
    }

    #[test]
    fn short_template_tags_accepted() {
        let e = parse_index("x.toml\tS5\tsuccess\n").unwrap();
        assert_eq!(e[0].template, TemplateId::S5OnrampMerge);
    }

    #[test]
    fn rejects_bad_lines() {
        for text in [
            "a.toml\tS3_crossing\n",
            "a.toml\tS9\tsuccess\n",
            "a.toml\tS3\tcrashed\n",
            "../a.toml\tS3\tsuccess\n",
            "a.toml\tS3\tsuccess\na.toml\tS3\tcollision\n",
        ] {
            assert!(parse_index(text).is_err(), "{text:?}");
        }
    }
}
