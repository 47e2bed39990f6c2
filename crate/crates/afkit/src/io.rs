//! JSONL and file helpers. Every derived file is written to a temp file in
//! the same directory and renamed into place, so readers never see a torn
//! write.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub fn open(path: &Path, hint: &str) -> Result<File> {
    match File::open(path) {
        Ok(f) => Ok(f),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::Missing { path: path.to_path_buf(), hint: hint.to_string() })
        }
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Reads every line as `T`; blank lines are skipped, a bad line is an error
/// naming its line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path, hint: &str) -> Result<Vec<T>> {
    let reader = BufReader::new(open(path, hint)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let v = serde_json::from_str(&line).map_err(|e| Error::data(format!("{}:{}", path.display(), i + 1), e))?;
        out.push(v);
    }
    Ok(out)
}

/// Like [`read_jsonl`] but returns per-line results so one bad record does
/// not abort the stream. The error carries a line label and message.
pub fn read_jsonl_lenient<T: DeserializeOwned>(
    path: &Path,
    hint: &str,
) -> Result<Vec<std::result::Result<T, (String, String)>>> {
    let reader = BufReader::new(open(path, hint)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| (format!("line:{}", i + 1), e.to_string())));
    }
    Ok(out)
}

pub fn read_json<T: DeserializeOwned>(path: &Path, hint: &str) -> Result<T> {
    let reader = BufReader::new(open(path, hint)?);
    serde_json::from_reader(reader).map_err(|e| Error::data(path.display(), e))
}

/// Atomically replaces `path` with whatever `fill` writes.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    {
        let mut w = BufWriter::new(tmp.as_file());
        fill(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))?;
    }
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

pub fn write_jsonl<'a, T: Serialize + 'a>(path: &Path, rows: impl IntoIterator<Item = &'a T>) -> Result<()> {
    write_atomic(path, |w| {
        for r in rows {
            serde_json::to_writer(&mut *w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        w.write_all(b"\n")
    })
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, |w| w.write_all(text.as_bytes()))
}

/// Appends one JSON line and syncs it to disk before returning.
pub fn append_jsonl<T: Serialize>(file: &mut File, path: &Path, row: &T) -> Result<()> {
    let mut line = serde_json::to_vec(row).map_err(|e| Error::Internal(e.to_string()))?;
    line.push(b'\n');
    file.write_all(&line).map_err(|e| Error::io(path, e))?;
    file.sync_data().map_err(|e| Error::io(path, e))
}

pub fn open_append(path: &Path) -> Result<File> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))
}

/// Hex SHA-256 of a file's bytes.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut reader = BufReader::new(open(path, "needed for manifest hashing")?);
    let mut h = Sha256::new();
    std::io::copy(&mut reader, &mut h).map_err(|e| Error::io(path, e))?;
    Ok(hex(&h.finalize()))
}

pub fn sha256_bytes(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
