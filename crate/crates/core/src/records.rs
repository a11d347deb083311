//! Corpus record schema and JSONL helpers.

use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::metrics::{AnswerSample, MetricError};
use crate::probe::{GeneratedSample, SimpleTokenizer};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: String, line: usize, message: String },
}

/// One generated response of the input corpus. Fields this crate does not
/// know about are kept in `extra` and written back unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    #[serde(default = "crate::schema_version")]
    pub schema_version: u32,
    pub sample_id: String,
    #[serde(default)]
    pub prompt: String,
    pub generated_text: String,
    pub answer_text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answers_per_round: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub correct_per_round: Option<Vec<bool>>,
    /// Model tokens of `generated_text`; must concatenate back to it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    /// Natural-log probability of each generated token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    /// Byte range of the final answer in `generated_text`, for responses
    /// without a `\boxed{}` span.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_span: Option<[usize; 2]>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl CorpusRecord {
    pub fn generated_sample(&self) -> GeneratedSample {
        match &self.tokens {
            Some(tokens) if tokens.concat() == self.generated_text => GeneratedSample::new(
                self.sample_id.clone(),
                self.prompt.clone(),
                tokens.clone(),
                self.answer_text.clone(),
            ),
            _ => GeneratedSample::from_text(
                self.sample_id.clone(),
                self.prompt.clone(),
                &self.generated_text,
                self.answer_text.clone(),
                &SimpleTokenizer,
            ),
        }
    }

    /// Repeated answers, canonicalized, with their correctness flags. When
    /// flags are absent each answer is compared with `answer_text`.
    pub fn answer_sample(&self) -> Option<Result<AnswerSample, MetricError>> {
        let answers = self.answers_per_round.as_ref()?;
        let flags = match &self.correct_per_round {
            Some(f) => f.clone(),
            None => {
                let truth = crate::metrics::canonicalize_answer(&self.answer_text);
                answers
                    .iter()
                    .map(|a| crate::metrics::canonicalize_answer(a) == truth)
                    .collect()
            }
        };
        Some(AnswerSample::canonicalized(self.sample_id.clone(), answers, flags))
    }
}

fn io_err(path: &Path, source: io::Error) -> RecordError {
    RecordError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Reads every non-blank line of a JSONL file.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, RecordError> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| RecordError::Parse {
            path: path.display().to_string(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

/// Writes records one per line, replacing the file atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), RecordError> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r).map_err(|e| io_err(path, e.into()))?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), RecordError> {
    let mut buf = serde_json::to_vec_pretty(value).map_err(|e| io_err(path, e.into()))?;
    buf.push(b'\n');
    write_atomic(path, &buf)
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RecordError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| io_err(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Line-buffered JSONL appender that flushes after every record.
pub struct JsonlAppender {
    writer: BufWriter<File>,
}

impl JsonlAppender {
    /// Opens `path` for appending, first terminating a partial last line left
    /// by an interrupted writer.
    pub fn open(path: &Path) -> io::Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut file = OpenOptions::new().create(true).read(true).append(true).open(path)?;
        let len = file.metadata()?.len();
        if len > 0 {
            file.seek(SeekFrom::Start(len - 1))?;
            let mut last = [0u8; 1];
            file.read_exact(&mut last)?;
            if last[0] != b'\n' {
                file.write_all(b"\n")?;
            }
        }
        Ok(Self {
            writer: BufWriter::new(file),
        })
    }

    pub fn append<T: Serialize>(&mut self, record: &T) -> io::Result<()> {
        serde_json::to_writer(&mut self.writer, record)?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_record_keeps_unknown_fields() {
        let line = r#"{"schema_version":1,"sample_id":"q1","prompt":"P","generated_text":"x \\boxed{4}","answer_text":"4","source":"set-a","meta":{"difficulty":3}}"#;
        let rec: CorpusRecord = serde_json::from_str(line).unwrap();
        assert_eq!(rec.extra.len(), 2);
        assert_eq!(serde_json::to_string(&rec).unwrap(), line);
    }

    #[test]
    fn minimal_record_defaults() {
        let rec: CorpusRecord = serde_json::from_str(r#"{"sample_id":"a","generated_text":"g","answer_text":"1"}"#).unwrap();
        assert_eq!(rec.schema_version, crate::SCHEMA_VERSION);
        assert!(rec.answer_sample().is_none());
    }

    #[test]
    fn supplied_tokens_are_used_when_consistent() {
        let mut rec: CorpusRecord =
            serde_json::from_str(r#"{"sample_id":"a","generated_text":"ab \\boxed{7}","answer_text":"7"}"#).unwrap();
        rec.tokens = Some(vec!["ab".into(), " \\boxed{".into(), "7".into(), "}".into()]);
        assert_eq!(rec.generated_sample().tokens().len(), 4);
        rec.tokens = Some(vec!["nope".into()]);
        assert_eq!(rec.generated_sample().text(), rec.generated_text);
    }

    #[test]
    fn answers_default_to_truth_comparison() {
        let rec: CorpusRecord = serde_json::from_str(
            r#"{"sample_id":"a","generated_text":"g","answer_text":"0.5","answers_per_round":["1/2"," 0.50 ","3"]}"#,
        )
        .unwrap();
        let s = rec.answer_sample().unwrap().unwrap();
        assert_eq!(s.correct_flags(), &[true, true, false]);
    }

    #[test]
    fn appender_repairs_partial_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.jsonl");
        fs::write(&path, "{\"a\":1}\n{\"a\":").unwrap();
        let mut app = JsonlAppender::open(&path).unwrap();
        app.append(&serde_json::json!({"a": 2})).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, "{\"a\":1}\n{\"a\":\n{\"a\":2}\n");
    }

    #[test]
    fn jsonl_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/r.jsonl");
        write_jsonl(&path, &[serde_json::json!({"k": 1}), serde_json::json!({"k": 2})]).unwrap();
        let back: Vec<Value> = read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 2);
        fs::write(&path, "{\"k\":1}\nnot json\n").unwrap();
        match read_jsonl::<Value>(&path) {
            Err(RecordError::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
