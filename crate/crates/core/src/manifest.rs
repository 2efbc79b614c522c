//! JSONL manifests. Every line is one object carrying `"schema": "acfforge/1"`
//! next to the record's own fields.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA: &str = "acfforge/1";

#[derive(Serialize)]
struct LineOut<'a, T> {
    schema: &'static str,
    #[serde(flatten)]
    inner: &'a T,
}

#[derive(Deserialize)]
struct LineIn<T> {
    schema: String,
    #[serde(flatten)]
    inner: T,
}

/// One manifest line, without the trailing newline.
pub fn encode_line<T: Serialize>(value: &T) -> String {
    let line = LineOut { schema: SCHEMA, inner: value };
    serde_json::to_string(&line).expect("manifest records serialize")
}

pub fn decode_line<T: DeserializeOwned>(line: &str) -> std::result::Result<T, String> {
    let parsed: LineIn<T> = serde_json::from_str(line).map_err(|e| e.to_string())?;
    if parsed.schema != SCHEMA {
        return Err(format!("unsupported schema `{}`", parsed.schema));
    }
    Ok(parsed.inner)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = decode_line(&line).map_err(|message| Error::Manifest {
            path: path.display().to_string(),
            line: n + 1,
            message,
        })?;
        out.push(value);
    }
    Ok(out)
}

/// Plain JSONL without the schema envelope, for foreign inputs such as
/// source-corpus manifests produced by converters.
pub fn read_plain_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            path: path.display().to_string(),
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(value);
    }
    Ok(out)
}

/// Writes the manifest atomically: a sibling temp file is renamed over `path`.
pub fn write_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    let lines: Vec<String> = values.iter().map(encode_line).collect();
    write_lines(path, &lines)
}

pub fn write_plain_jsonl<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    let lines: Vec<String> = values
        .iter()
        .map(|v| serde_json::to_string(v).expect("records serialize"))
        .collect();
    write_lines(path, &lines)
}

pub(crate) fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut buf = Vec::new();
    for l in lines {
        buf.extend_from_slice(l.as_bytes());
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let tmp = path.with_extension(format!(
        "tmp.{}.{:?}",
        std::process::id(),
        std::thread::current().id()
    ));
    {
        let file = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        w.flush().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
