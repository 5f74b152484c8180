//! On-disk formats for corpus artifacts: raw signal files and tab-separated
//! manifests. Both formats are deliberately boring so they can be inspected
//! with a hex dump or a pager when something looks off.

use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::num::Tensor;
use crate::{Error, Result};

use super::{Record, RecordKind};

/// Magic prefix for signal files, so a truncated or misrouted file fails
/// loudly instead of decoding into garbage frames.
const SIGNAL_MAGIC: &[u8; 8] = b"PVSIG01\n";

/// Write a `[frames, dim]` tensor as a little-endian f64 signal file.
pub fn write_signal(path: &Path, signal: &Tensor) -> Result<()> {
    let (frames, dim) = signal.dims2();
    let mut buf = Vec::with_capacity(8 + 16 + signal.numel() * 8);
    buf.extend_from_slice(SIGNAL_MAGIC);
    buf.extend_from_slice(&(frames as i64).to_le_bytes());
    buf.extend_from_slice(&(dim as i64).to_le_bytes());
    for v in signal.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a signal file back into a `[frames, dim]` tensor.
pub fn read_signal(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 || &bytes[..8] != SIGNAL_MAGIC {
        return Err(Error::Format(format!(
            "{} is not a signal file (bad magic or truncated header)",
            path.display()
        )));
    }
    let frames = i64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let dim = i64::from_le_bytes(bytes[16..24].try_into().unwrap());
    if frames <= 0 || dim <= 0 {
        return Err(Error::Format(format!(
            "{}: non-positive dimensions {}x{}",
            path.display(),
            frames,
            dim
        )));
    }
    let (frames, dim) = (frames as usize, dim as usize);
    let want = 24 + frames * dim * 8;
    if bytes.len() != want {
        return Err(Error::Format(format!(
            "{}: expected {} bytes for {}x{} frames, found {}",
            path.display(),
            want,
            frames,
            dim,
            bytes.len()
        )));
    }
    let mut data = Vec::with_capacity(frames * dim);
    for chunk in bytes[24..].chunks_exact(8) {
        data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
    }
    Tensor::new(vec![frames, dim], data)
}

fn kind_str(kind: RecordKind) -> &'static str {
    match kind {
        RecordKind::Paired => "paired",
        RecordKind::SpeechOnly => "speech_only",
        RecordKind::TextOnly => "text_only",
    }
}

fn parse_kind(s: &str) -> Result<RecordKind> {
    match s {
        "paired" => Ok(RecordKind::Paired),
        "speech_only" => Ok(RecordKind::SpeechOnly),
        "text_only" => Ok(RecordKind::TextOnly),
        other => Err(Error::Format(format!("unknown record kind {:?}", other))),
    }
}

/// Serialize records as `kind<TAB>lang<TAB>spk<TAB>text<TAB>signal_path`
/// lines. Empty optional fields are written as empty columns. Text containing
/// tabs or newlines is rejected rather than escaped.
pub fn write_manifest(path: &Path, records: &[Record]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        let text = r.text.as_deref().unwrap_or("");
        if text.contains('\t') || text.contains('\n') {
            return Err(Error::Format(format!(
                "record text {:?} contains a tab or newline and cannot be serialized",
                text
            )));
        }
        out.push_str(kind_str(r.kind));
        out.push('\t');
        out.push_str(&r.lang);
        out.push('\t');
        out.push_str(r.speaker.as_deref().unwrap_or(""));
        out.push('\t');
        out.push_str(text);
        out.push('\t');
        out.push_str(r.signal_path.as_deref().unwrap_or(""));
        out.push('\n');
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Parse a manifest written by [`write_manifest`]. Paths stay relative; use
/// [`resolve_signal_path`] with the manifest's directory to open signals.
pub fn read_manifest(path: &Path) -> Result<Vec<Record>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::Format(format!(
                "{} line {}: expected 5 tab-separated columns, found {}",
                path.display(),
                i + 1,
                cols.len()
            )));
        }
        let opt = |s: &str| {
            if s.is_empty() {
                None
            } else {
                Some(s.to_string())
            }
        };
        records.push(Record {
            kind: parse_kind(cols[0])?,
            lang: cols[1].to_string(),
            speaker: opt(cols[2]),
            text: opt(cols[3]),
            signal_path: opt(cols[4]),
        });
    }
    Ok(records)
}

/// Join a record's relative signal path onto the corpus root.
pub fn resolve_signal_path(corpus_dir: &Path, rel: &str) -> PathBuf {
    corpus_dir.join(rel)
}
