//! JSONL reading and writing.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::types::{GroundTruthSample, Validate};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}:{line}: {message}", .path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{}:{line}: invalid sample: {}", .path.display(), .violations.join("; "))]
    Invalid {
        path: PathBuf,
        line: usize,
        violations: Vec<String>,
    },
    #[error("{}: dataset is empty", .path.display())]
    Empty { path: PathBuf },
}

/// A model output to be scored: `{"sample_id": ..., "output_text": ...}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutputRecord {
    pub sample_id: String,
    pub output_text: String,
}

/// One non-blank line of a JSONL file, parsed or not.
#[derive(Debug)]
pub struct Line<T> {
    pub number: usize,
    pub record: Result<T, String>,
}

fn io_err(path: &Path, source: io::Error) -> DatasetError {
    DatasetError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Parses every non-blank line, keeping per-line failures.
pub fn read_lines<T: DeserializeOwned>(path: &Path) -> Result<Vec<Line<T>>, DatasetError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(Line {
            number: i + 1,
            record: serde_json::from_str(&line).map_err(|e| e.to_string()),
        });
    }
    Ok(out)
}

/// Loads a dataset, failing on the first unparseable or invalid record.
pub fn load_dataset(path: &Path) -> Result<Vec<GroundTruthSample>, DatasetError> {
    let mut samples = Vec::new();
    for line in read_lines::<GroundTruthSample>(path)? {
        let sample = line.record.map_err(|message| DatasetError::Parse {
            path: path.to_path_buf(),
            line: line.number,
            message,
        })?;
        let violations = sample.validate();
        if !violations.is_empty() {
            return Err(DatasetError::Invalid {
                path: path.to_path_buf(),
                line: line.number,
                violations,
            });
        }
        samples.push(sample);
    }
    if samples.is_empty() {
        return Err(DatasetError::Empty {
            path: path.to_path_buf(),
        });
    }
    Ok(samples)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), DatasetError> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, item)
            .map_err(|e| io_err(path, io::Error::other(e)))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), DatasetError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, io::Error::other(e)))?;
    std::fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{AnnotationScheme, BoundingBox, HoiTriplet, Split};

    fn sample(id: &str) -> GroundTruthSample {
        let b = BoundingBox::new(0.0, 0.0, 0.5, 0.5);
        GroundTruthSample {
            sample_id: id.into(),
            query: "q".into(),
            annotation_scheme: AnnotationScheme::FineGrained,
            split: Split::Seen,
            gt_triplets: vec![HoiTriplet::new("human", "hold", "cup", b, b)],
        }
    }

    #[test]
    fn roundtrip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write_jsonl(&p, &[sample("a"), sample("b")]).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(back, vec![sample("a"), sample("b")]);

        let text = std::fs::read_to_string(&p).unwrap();
        std::fs::write(&p, format!("{text}\n{{not json}}\n")).unwrap();
        match load_dataset(&p) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }

        let mut bad = sample("c");
        bad.gt_triplets[0].human_box = BoundingBox::new(0.5, 0.0, 0.2, 0.5);
        write_jsonl(&p, &[bad]).unwrap();
        assert!(matches!(load_dataset(&p), Err(DatasetError::Invalid { line: 1, .. })));

        std::fs::write(&p, "\n").unwrap();
        assert!(matches!(load_dataset(&p), Err(DatasetError::Empty { .. })));
    }
}
