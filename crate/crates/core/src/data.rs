//! The line-delimited record format shared by the corpus builder, the
//! synthetic task generators, training, and scoring: one JSON object per
//! line with `source`, `target`, and an ISO-8601 `timestamp`.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::temporal::CalendarDate;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {source}")]
    Parse { path: String, line: usize, source: serde_json::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One timestamped source/target pair in text form.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub source: String,
    pub target: String,
    pub timestamp: CalendarDate,
}

pub fn read_records(path: &Path) -> Result<Vec<CorpusRecord>, DataError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut records = Vec::new();
    for (lineno, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(&line).map_err(|source| DataError::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            source,
        })?;
        records.push(record);
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[CorpusRecord]) -> Result<(), DataError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for record in records {
        serde_json::to_writer(&mut out, record).map_err(std::io::Error::other)?;
        writeln!(out)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::temporal::parse_date;

    #[test]
    fn jsonl_round_trip() {
        let records = vec![
            CorpusRecord {
                source: "name[Ada]".into(),
                target: "Ada was a mathematician .".into(),
                timestamp: parse_date("2017-02-09").unwrap(),
            },
            CorpusRecord {
                source: "k[v]".into(),
                target: "t".into(),
                timestamp: parse_date("2016-02-29").unwrap(),
            },
        ];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.jsonl");
        write_records(&path, &records).unwrap();
        assert_eq!(read_records(&path).unwrap(), records);
    }

    #[test]
    fn rejects_bad_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"source\":\"s\",\"target\":\"t\",\"timestamp\":\"2015-02-29\"}\n")
            .unwrap();
        assert!(read_records(&path).is_err());
    }
}
