//! Newline-delimited JSON readers and writers.
//!
//! Every written line is a canonical object: keys sorted alphabetically at all
//! nesting levels, plus a top-level `format_version`. Encoding a decoded
//! canonical line reproduces the same bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::marker::PhantomData;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

use super::{DatasetMeta, MaskedDataset, MaskedRecord};
use crate::error::{Error, Result};

pub const FORMAT_VERSION: u64 = 1;

const FRAGMENT_CHARS: usize = 80;

/// Encodes one record as a canonical JSON line (without the trailing newline).
pub fn to_canonical_line<T: Serialize>(record: &T) -> Result<String> {
    let mut value = serde_json::to_value(record)
        .map_err(|e| Error::InvalidArgument(format!("cannot encode record: {e}")))?;
    let Value::Object(map) = &mut value else {
        return Err(Error::InvalidArgument(
            "top-level record must encode as a JSON object".into(),
        ));
    };
    map.insert("format_version".into(), Value::from(FORMAT_VERSION));
    // serde_json's default Map is ordered by key, so this is canonical.
    Ok(serde_json::to_string(&value).expect("serializing a Value cannot fail"))
}

fn fragment(line: &str) -> String {
    line.chars().take(FRAGMENT_CHARS).collect()
}

fn decode_line<T: DeserializeOwned>(line: &str, line_no: usize) -> Result<T> {
    let parse_err = |message: String| Error::Parse {
        line: line_no,
        fragment: fragment(line),
        message,
    };
    let mut value: Value = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
    let Value::Object(map) = &mut value else {
        return Err(parse_err("expected a JSON object".into()));
    };
    if let Some(v) = map.remove("format_version") {
        if v.as_u64() != Some(FORMAT_VERSION) {
            return Err(parse_err(format!("unsupported format_version {v}")));
        }
    }
    serde_json::from_value(value).map_err(|e| parse_err(e.to_string()))
}

/// Streams typed records from a line-delimited source in input order.
///
/// Blank lines are skipped. A malformed line yields an error carrying its
/// 1-based line number; records before it have already been yielded.
pub struct JsonlReader<R, T> {
    inner: R,
    line_no: usize,
    buf: String,
    _marker: PhantomData<fn() -> T>,
}

impl<R: BufRead, T: DeserializeOwned> JsonlReader<R, T> {
    pub fn new(inner: R) -> Self {
        JsonlReader {
            inner,
            line_no: 0,
            buf: String::new(),
            _marker: PhantomData,
        }
    }

    pub fn line_number(&self) -> usize {
        self.line_no
    }
}

impl<T: DeserializeOwned> JsonlReader<BufReader<File>, T> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
        Ok(Self::new(BufReader::new(file)))
    }
}

impl<R: BufRead, T: DeserializeOwned> Iterator for JsonlReader<R, T> {
    type Item = Result<T>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            self.buf.clear();
            match self.inner.read_line(&mut self.buf) {
                Ok(0) => return None,
                Ok(_) => {}
                Err(e) => return Some(Err(e.into())),
            }
            self.line_no += 1;
            let line = self.buf.trim_end_matches(['\n', '\r']);
            if line.trim().is_empty() {
                continue;
            }
            return Some(decode_line(line, self.line_no));
        }
    }
}

pub struct JsonlWriter<W: Write> {
    inner: W,
}

impl<W: Write> JsonlWriter<W> {
    pub fn new(inner: W) -> Self {
        JsonlWriter { inner }
    }

    pub fn write<T: Serialize>(&mut self, record: &T) -> Result<()> {
        let line = to_canonical_line(record)?;
        self.inner.write_all(line.as_bytes())?;
        self.inner.write_all(b"\n")?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.inner.flush()?;
        Ok(())
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

pub fn read_jsonl<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    JsonlReader::open(path)?.collect()
}

pub fn write_jsonl<'a, T: Serialize + 'a>(
    path: impl AsRef<Path>,
    records: impl IntoIterator<Item = &'a T>,
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = JsonlWriter::new(BufWriter::new(file));
    for r in records {
        w.write(r)?;
    }
    w.flush()
}

#[derive(serde::Serialize, serde::Deserialize)]
struct MetaLine {
    meta: DatasetMeta,
}

/// Masked-dataset files hold one `{"meta": ...}` header line followed by one
/// line per record.
pub fn write_masked_dataset(path: impl AsRef<Path>, dataset: &MaskedDataset) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = JsonlWriter::new(BufWriter::new(file));
    w.write(&MetaLine {
        meta: dataset.meta.clone(),
    })?;
    for r in &dataset.records {
        w.write(r)?;
    }
    w.flush()
}

pub fn read_masked_dataset(path: impl AsRef<Path>) -> Result<MaskedDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut lines = BufReader::new(file);
    let mut header = String::new();
    let mut line_no = 0;
    while header.trim().is_empty() {
        header.clear();
        if lines.read_line(&mut header)? == 0 {
            return Err(Error::Parse {
                line: line_no,
                fragment: String::new(),
                message: "missing dataset header line".into(),
            });
        }
        line_no += 1;
    }
    let meta: MetaLine = decode_line(header.trim_end_matches(['\n', '\r']), line_no)?;
    let mut reader = JsonlReader::<_, MaskedRecord>::new(lines);
    let mut records = Vec::new();
    for r in &mut reader {
        records.push(r.map_err(|e| match e {
            Error::Parse {
                line,
                fragment,
                message,
            } => Error::Parse {
                line: line + line_no,
                fragment,
                message,
            },
            other => other,
        })?);
    }
    Ok(MaskedDataset {
        meta: meta.meta,
        records,
    })
}
