use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sample::{QType, VQASample};
use super::vocab::Vocab;
use crate::error::{Error, Result};
use crate::numerics::Matrix;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    image: Vec<Vec<f64>>,
    tokens: Vec<usize>,
    qtype: QType,
    answer: usize,
}

/// Path of the vocabulary written next to a dataset file.
pub fn vocab_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".vocab.json");
    path.with_file_name(name)
}

/// Serializes one sample as a single JSON line (without the newline).
pub fn to_line(s: &VQASample) -> String {
    let rec = Record {
        image: (0..s.image.rows()).map(|r| s.image.row(r).to_vec()).collect(),
        tokens: s.tokens.clone(),
        qtype: s.qtype,
        answer: s.answer,
    };
    serde_json::to_string(&rec).expect("records always serialize")
}

/// Writes one JSON object per line plus the vocabulary sidecar.
pub fn save(path: &Path, samples: &[VQASample]) -> Result<()> {
    let mut out = Vec::new();
    for s in samples {
        out.extend_from_slice(to_line(s).as_bytes());
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))?;
    let vocab = serde_json::to_string_pretty(&Vocab::default()).expect("vocab serializes");
    fs::write(vocab_path(path), vocab).map_err(|e| Error::io(vocab_path(path), e))
}

/// Reads a dataset written by [`save`]. Blank lines are skipped, so an
/// empty file is an empty dataset. Errors name the 1-based line and the
/// byte offset of the problem.
pub fn load(path: &Path) -> Result<Vec<VQASample>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse(path, &bytes)
}

pub(crate) fn parse(path: &Path, bytes: &[u8]) -> Result<Vec<VQASample>> {
    let mut samples = Vec::new();
    let mut offset = 0usize;
    for (i, raw) in bytes.split_inclusive(|&b| b == b'\n').enumerate() {
        let line_start = offset;
        offset += raw.len();
        let fail = |at: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            offset: at as u64,
            message,
        };
        let text = std::str::from_utf8(raw).map_err(|e| fail(line_start + e.valid_up_to(), e.to_string()))?;
        let text = text.trim_end_matches(['\n', '\r']);
        if text.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(text).map_err(|e| {
            // serde_json reports 1-based columns in characters; the line is
            // one JSON document, so column maps to bytes for ASCII input.
            let col = e.column().saturating_sub(1).min(text.len());
            fail(line_start + col, e.to_string())
        })?;
        let sample = from_record(rec).map_err(|m| fail(line_start, m))?;
        samples.push(sample);
    }
    Ok(samples)
}

fn from_record(rec: Record) -> std::result::Result<VQASample, String> {
    let cols = rec.image.first().map_or(0, Vec::len);
    if rec.image.is_empty() || cols == 0 {
        return Err("image is empty".into());
    }
    if rec.image.iter().any(|r| r.len() != cols) {
        return Err("image rows have differing lengths".into());
    }
    let image = Matrix::from_rows(&rec.image).map_err(|e| e.to_string())?;
    let s = VQASample {
        image,
        tokens: rec.tokens,
        qtype: rec.qtype,
        answer: rec.answer,
    };
    s.check()?;
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, TaskConfig};

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let mut samples = generate(50, 3, &TaskConfig::default()).unwrap();
        samples[0].image.set(0, 0, 0.1 + 0.2);
        save(&p, &samples).unwrap();
        assert_eq!(load(&p).unwrap(), samples);
        assert!(vocab_path(&p).exists());
    }

    #[test]
    fn empty_is_valid() {
        assert!(parse(Path::new("x"), b"").unwrap().is_empty());
        assert!(parse(Path::new("x"), b"\n\n").unwrap().is_empty());
    }

    #[test]
    fn errors_name_line_and_offset() {
        let s = generate(2, 3, &TaskConfig::default()).unwrap();
        let good = to_line(&s[0]);
        let text = format!("{good}\n{}", &good[..good.len() / 2]);
        match parse(Path::new("x"), text.as_bytes()) {
            Err(Error::Parse { line, offset, .. }) => {
                assert_eq!(line, 2);
                assert!(offset as usize > good.len());
            }
            other => panic!("{other:?}"),
        }
        let bad = good.replace(&format!("\"{}\"", s[0].qtype.name()), "\"colour\"");
        assert!(matches!(
            parse(Path::new("x"), bad.as_bytes()),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
