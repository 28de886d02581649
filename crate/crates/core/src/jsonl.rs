//! JSON-lines reading and writing.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Reads every non-blank line; the first malformed line is an error naming
/// its line number.
pub fn read<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (line_no, item) in read_lenient(path)? {
        out.push(item.map_err(|e| Error::Data(format!("line {line_no}: {e}")))?);
    }
    Ok(out)
}

/// Parses each non-blank line independently, pairing results with 1-based
/// line numbers.
pub fn read_lenient<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<(usize, Result<T>)>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push((i + 1, serde_json::from_str(&line).map_err(Error::from)));
    }
    Ok(out)
}

pub fn write<T: Serialize>(path: impl AsRef<Path>, items: impl IntoIterator<Item = T>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Appends records to an open writer, one per line.
pub struct Sink<W: Write> {
    inner: W,
}

impl Sink<BufWriter<std::fs::File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            inner: BufWriter::new(file),
        })
    }
}

impl<W: Write> Sink<W> {
    pub fn push<T: Serialize>(&mut self, item: &T) -> Result<()> {
        serde_json::to_writer(&mut self.inner, item)?;
        self.inner
            .write_all(b"\n")
            .map_err(|e| Error::io("<metrics>", e))
    }

    pub fn finish(mut self) -> Result<()> {
        self.inner.flush().map_err(|e| Error::io("<metrics>", e))
    }
}
