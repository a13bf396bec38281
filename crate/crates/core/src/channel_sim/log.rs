//! Read-log files: CSV with a fixed header, or JSON Lines with the same field names.
//! Real values are written with 6 decimal places.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use super::TagRead;
use crate::stats::round6;
use crate::{Error, Result};

pub const CSV_HEADER: &str = "timestamp_s,tag_id,antenna_id,channel_index,rss_dbm,phase_rad";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogFormat {
    Csv,
    JsonLines,
}

impl LogFormat {
    /// `.jsonl` / `.ndjson` select JSON Lines; anything else is CSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => LogFormat::JsonLines,
            _ => LogFormat::Csv,
        }
    }
}

pub fn write_csv<W: Write>(reads: impl IntoIterator<Item = TagRead>, out: W) -> Result<usize> {
    let mut w = BufWriter::new(out);
    let mut n = 0;
    let io = |e| Error::io("<csv>", e);
    writeln!(w, "{CSV_HEADER}").map_err(io)?;
    for r in reads {
        writeln!(
            w,
            "{:.6},{},{},{},{:.6},{:.6}",
            r.timestamp_s, r.tag_id, r.antenna_id, r.channel_index, r.rss_dbm, r.phase_rad
        )
        .map_err(io)?;
        n += 1;
    }
    w.flush().map_err(io)?;
    Ok(n)
}

pub fn read_csv<R: Read>(input: R) -> Result<Vec<TagRead>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(Error::Config(format!("unexpected read-log header: {:?}", headers)));
    }
    rdr.deserialize().map(|r| r.map_err(Error::from)).collect()
}

#[derive(Serialize)]
struct RoundedRead {
    timestamp_s: f64,
    tag_id: usize,
    antenna_id: usize,
    channel_index: usize,
    rss_dbm: f64,
    phase_rad: f64,
}

pub fn write_jsonl<W: Write>(reads: impl IntoIterator<Item = TagRead>, out: W) -> Result<usize> {
    let mut w = BufWriter::new(out);
    let mut n = 0;
    for r in reads {
        let rounded = RoundedRead {
            timestamp_s: round6(r.timestamp_s),
            tag_id: r.tag_id,
            antenna_id: r.antenna_id,
            channel_index: r.channel_index,
            rss_dbm: round6(r.rss_dbm),
            phase_rad: round6(r.phase_rad),
        };
        serde_json::to_writer(&mut w, &rounded)?;
        w.write_all(b"\n").map_err(|e| Error::io("<jsonl>", e))?;
        n += 1;
    }
    w.flush().map_err(|e| Error::io("<jsonl>", e))?;
    Ok(n)
}

pub fn read_jsonl<R: Read>(input: R) -> Result<Vec<TagRead>> {
    let mut out = Vec::new();
    for line in BufReader::new(input).lines() {
        let line = line.map_err(|e| Error::io("<jsonl>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn write_log(path: &Path, reads: impl IntoIterator<Item = TagRead>) -> Result<usize> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    match LogFormat::from_path(path) {
        LogFormat::Csv => write_csv(reads, file),
        LogFormat::JsonLines => write_jsonl(reads, file),
    }
}

pub fn read_log(path: &Path) -> Result<Vec<TagRead>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    match LogFormat::from_path(path) {
        LogFormat::Csv => read_csv(file),
        LogFormat::JsonLines => read_jsonl(file),
    }
}
