//! Segmented CSV log with a fixed byte budget, HTML plot pages and replay.
//!
//! A log directory holds `log-000000.csv`, `log-000001.csv`, ... Each
//! segment starts with the header `timestamp_ms,<channels in schedule
//! order>`. When appending would push the directory over its capacity,
//! whole segments are removed oldest first.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{Record, TimestampMs};

pub const DEFAULT_CAPACITY_BYTES: u64 = 512 << 20;
pub const DEFAULT_SEGMENT_BYTES: u64 = 1 << 20;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("log I/O on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("record does not match log schema (missing: [{}], extra: [{}])", missing.join(", "), extra.join(", "))]
    SchemaMismatch { missing: Vec<String>, extra: Vec<String> },
    #[error("segment size {segment} must be positive and no larger than capacity {capacity}")]
    BadCapacity { segment: u64, capacity: u64 },
    #[error("a {0}-byte line does not fit in one segment")]
    LineTooLong(u64),
    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: u64, msg: String },
    #[error("no log segments found at {0}")]
    NoLog(PathBuf),
    #[error("replay speed must be positive, got {0}")]
    BadSpeed(f64),
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io { path: path.to_path_buf(), source }
}

fn default_dir() -> PathBuf {
    PathBuf::from("log")
}
fn default_capacity() -> u64 {
    DEFAULT_CAPACITY_BYTES
}
fn default_segment() -> u64 {
    DEFAULT_SEGMENT_BYTES
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_capacity")]
    pub capacity_bytes: u64,
    #[serde(default = "default_segment")]
    pub segment_bytes: u64,
    /// HTML plot page, regenerated as the run progresses.
    #[serde(default)]
    pub html: Option<PathBuf>,
    /// Records shown on the HTML page.
    #[serde(default = "default_html_window")]
    pub html_window: usize,
}

fn default_html_window() -> usize {
    600
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            dir: default_dir(),
            capacity_bytes: DEFAULT_CAPACITY_BYTES,
            segment_bytes: DEFAULT_SEGMENT_BYTES,
            html: None,
            html_window: default_html_window(),
        }
    }
}

impl StoreConfig {
    pub fn validate(&self) -> Result<(), StoreError> {
        if self.segment_bytes == 0 || self.segment_bytes > self.capacity_bytes {
            return Err(StoreError::BadCapacity { segment: self.segment_bytes, capacity: self.capacity_bytes });
        }
        Ok(())
    }
}

#[derive(Debug)]
struct Segment {
    index: u64,
    path: PathBuf,
    bytes: u64,
}

pub fn segment_name(index: u64) -> String {
    format!("log-{index:06}.csv")
}

fn parse_segment_name(name: &str) -> Option<u64> {
    name.strip_prefix("log-")?.strip_suffix(".csv")?.parse().ok()
}

/// Existing segments in a directory, oldest first.
pub fn list_segments(dir: &Path) -> Result<Vec<(u64, PathBuf)>, StoreError> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let entry = entry.map_err(io_err(dir))?;
        if let Some(idx) = entry.file_name().to_str().and_then(parse_segment_name) {
            out.push((idx, entry.path()));
        }
    }
    out.sort();
    Ok(out)
}

pub fn header_line(channels: &[String]) -> String {
    let mut h = String::from("timestamp_ms");
    for c in channels {
        h.push(',');
        h.push_str(c);
    }
    h.push('\n');
    h
}

/// Format one record as a CSV line in `channels` order.
pub fn format_line(record: &Record, channels: &[String]) -> Result<String, StoreError> {
    let missing: Vec<String> =
        channels.iter().filter(|c| !record.values.contains_key(c.as_str())).cloned().collect();
    let extra: Vec<String> =
        record.values.keys().filter(|k| !channels.contains(k)).cloned().collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(StoreError::SchemaMismatch { missing, extra });
    }
    let mut line = record.timestamp_ms.to_string();
    for c in channels {
        // Display for f64 is the shortest string that parses back exactly
        write!(line, ",{}", record.values[c.as_str()]).unwrap();
    }
    line.push('\n');
    Ok(line)
}

/// Append-only writer for one log directory.
#[derive(Debug)]
pub struct LogStore {
    dir: PathBuf,
    channels: Vec<String>,
    header: String,
    capacity_bytes: u64,
    segment_bytes: u64,
    segments: VecDeque<Segment>,
    current: Option<File>,
    total_bytes: u64,
    next_index: u64,
    evicted: u64,
}

impl LogStore {
    /// Start a fresh log in `config.dir`, removing segments left there by an
    /// earlier run. Other files in the directory are untouched.
    pub fn create(config: &StoreConfig, channels: Vec<String>) -> Result<Self, StoreError> {
        config.validate()?;
        fs::create_dir_all(&config.dir).map_err(io_err(&config.dir))?;
        for (_, path) in list_segments(&config.dir)? {
            fs::remove_file(&path).map_err(io_err(&path))?;
        }
        let header = header_line(&channels);
        if header.len() as u64 >= config.segment_bytes {
            return Err(StoreError::LineTooLong(header.len() as u64));
        }
        Ok(LogStore {
            dir: config.dir.clone(),
            channels,
            header,
            capacity_bytes: config.capacity_bytes,
            segment_bytes: config.segment_bytes,
            segments: VecDeque::new(),
            current: None,
            total_bytes: 0,
            next_index: 0,
            evicted: 0,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
    pub fn channels(&self) -> &[String] {
        &self.channels
    }
    pub fn total_bytes(&self) -> u64 {
        self.total_bytes
    }
    pub fn capacity_bytes(&self) -> u64 {
        self.capacity_bytes
    }
    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }
    /// Segments removed by rotation so far.
    pub fn evicted_segments(&self) -> u64 {
        self.evicted
    }

    pub fn append(&mut self, record: &Record) -> Result<(), StoreError> {
        let line = format_line(record, &self.channels)?;
        let len = line.len() as u64;
        let header_len = self.header.len() as u64;
        if header_len + len > self.segment_bytes {
            return Err(StoreError::LineTooLong(len));
        }
        let fits = match (self.current.as_ref(), self.segments.back()) {
            (Some(_), Some(seg)) => seg.bytes + len <= self.segment_bytes,
            _ => false,
        };
        let added = if fits { len } else { header_len + len };
        if !fits {
            self.current = None;
        }
        // the open segment is never evicted, so only closed ones count here
        let closed = if fits { self.segments.len().saturating_sub(1) } else { self.segments.len() };
        let mut evictable = closed;
        while self.total_bytes + added > self.capacity_bytes && evictable > 0 {
            let old = self.segments.pop_front().expect("segment present");
            fs::remove_file(&old.path).map_err(io_err(&old.path))?;
            self.total_bytes -= old.bytes;
            self.evicted += 1;
            evictable -= 1;
        }
        if !fits {
            let path = self.dir.join(segment_name(self.next_index));
            let mut f = OpenOptions::new().create_new(true).append(true).open(&path).map_err(io_err(&path))?;
            f.write_all(self.header.as_bytes()).map_err(io_err(&path))?;
            self.segments.push_back(Segment { index: self.next_index, path, bytes: header_len });
            self.total_bytes += header_len;
            self.next_index += 1;
            self.current = Some(f);
        }
        let seg = self.segments.back_mut().expect("open segment");
        let f = self.current.as_mut().expect("open segment");
        f.write_all(line.as_bytes()).map_err(io_err(&seg.path))?;
        seg.bytes += len;
        self.total_bytes += len;
        Ok(())
    }

    /// Every record still held, oldest first.
    pub fn read_all(&self) -> Result<Vec<Record>, StoreError> {
        let mut out = Vec::new();
        for seg in &self.segments {
            let (_, recs) = read_segment(&seg.path)?;
            out.extend(recs);
        }
        Ok(out)
    }

    /// Regenerate the HTML page for the last `window` records.
    pub fn emit_html(&self, window: usize, path: &Path) -> Result<(), StoreError> {
        let mut records = Vec::new();
        for seg in self.segments.iter().rev() {
            let (_, mut recs) = read_segment(&seg.path)?;
            recs.append(&mut records);
            records = recs;
            if records.len() >= window {
                break;
            }
        }
        let start = records.len().saturating_sub(window);
        write_atomic(path, &render_html(&self.channels, &records[start..]))
    }

    pub fn segment_paths(&self) -> Vec<PathBuf> {
        self.segments.iter().map(|s| s.path.clone()).collect()
    }

    pub fn segment_indices(&self) -> Vec<u64> {
        self.segments.iter().map(|s| s.index).collect()
    }
}

fn read_segment(path: &Path) -> Result<(Vec<String>, Vec<Record>), StoreError> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| {
        StoreError::Parse { path: path.to_path_buf(), line: 0, msg: e.to_string() }
    })?;
    let parse_err = |line: u64, msg: String| StoreError::Parse { path: path.to_path_buf(), line, msg };
    let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if headers.get(0) != Some("timestamp_ms") {
        return Err(parse_err(1, "first column must be timestamp_ms".into()));
    }
    let channels: Vec<String> = headers.iter().skip(1).map(str::to_string).collect();
    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let line = i as u64 + 2;
        let row = row.map_err(|e| parse_err(line, e.to_string()))?;
        let ts: TimestampMs = row[0].parse().map_err(|_| parse_err(line, format!("bad timestamp `{}`", &row[0])))?;
        let mut rec = Record::new(ts);
        for (name, field) in channels.iter().zip(row.iter().skip(1)) {
            let v: f64 = field.parse().map_err(|_| parse_err(line, format!("bad value `{field}` for {name}")))?;
            rec.insert(name.clone(), v);
        }
        records.push(rec);
    }
    Ok((channels, records))
}

/// Read a log given either its directory or a single CSV file. Returns the
/// channel order from the header and the records, oldest first.
pub fn read_log(path: &Path) -> Result<(Vec<String>, Vec<Record>), StoreError> {
    if path.is_dir() {
        let segs = list_segments(path)?;
        if segs.is_empty() {
            return Err(StoreError::NoLog(path.to_path_buf()));
        }
        let mut channels = None;
        let mut records = Vec::new();
        for (_, seg) in segs {
            let (ch, recs) = read_segment(&seg)?;
            match &channels {
                None => channels = Some(ch),
                Some(prev) if *prev != ch => {
                    return Err(StoreError::Parse { path: seg, line: 1, msg: "header differs from earlier segments".into() });
                }
                Some(_) => {}
            }
            records.extend(recs);
        }
        Ok((channels.unwrap_or_default(), records))
    } else {
        read_segment(path)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

const PALETTE: [&str; 6] = ["#1b6ca8", "#c0392b", "#27ae60", "#8e44ad", "#d35400", "#2c3e50"];

/// Self-contained XHTML page: one normalized polyline per channel and the
/// full data table.
pub fn render_html(channels: &[String], records: &[Record]) -> String {
    let mut h = String::new();
    h.push_str("<!DOCTYPE html>\n<html xmlns=\"http://www.w3.org/1999/xhtml\">\n<head>\n");
    h.push_str("<meta charset=\"utf-8\"/>\n<title>phytosense log</title>\n");
    h.push_str("<style>table{border-collapse:collapse;font:12px monospace}td,th{border:1px solid #ccc;padding:2px 4px}</style>\n");
    h.push_str("</head>\n<body>\n");
    if records.is_empty() {
        h.push_str("<p class=\"banner\">no data</p>\n</body>\n</html>\n");
        return h;
    }
    let (w, ht) = (800.0, 240.0);
    let t0 = records[0].timestamp_ms as f64;
    let t1 = records[records.len() - 1].timestamp_ms as f64;
    let span = (t1 - t0).max(1.0);
    writeln!(h, "<p>{} records, {} to {} ms</p>", records.len(), records[0].timestamp_ms, records[records.len() - 1].timestamp_ms).unwrap();
    writeln!(h, "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{ht}\" viewBox=\"0 0 {w} {ht}\">").unwrap();
    for (i, ch) in channels.iter().enumerate() {
        let vals: Vec<f64> = records.iter().map(|r| r.get(ch).unwrap_or(f64::NAN)).collect();
        let lo = vals.iter().copied().filter(|v| v.is_finite()).fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().filter(|v| v.is_finite()).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            continue;
        }
        let range = if hi > lo { hi - lo } else { 1.0 };
        let mut pts = String::new();
        for (r, v) in records.iter().zip(&vals) {
            if v.is_finite() {
                let x = (r.timestamp_ms as f64 - t0) / span * w;
                let y = ht - (v - lo) / range * ht;
                write!(pts, "{x:.1},{y:.1} ").unwrap();
            }
        }
        writeln!(
            h,
            "<polyline fill=\"none\" stroke=\"{}\" stroke-width=\"1\" points=\"{}\"><title>{}</title></polyline>",
            PALETTE[i % PALETTE.len()],
            pts.trim_end(),
            escape(ch)
        )
        .unwrap();
    }
    h.push_str("</svg>\n<table>\n<tr><th>timestamp_ms</th>");
    for c in channels {
        write!(h, "<th>{}</th>", escape(c)).unwrap();
    }
    h.push_str("</tr>\n");
    for r in records {
        write!(h, "<tr class=\"row\"><td>{}</td>", r.timestamp_ms).unwrap();
        for c in channels {
            match r.get(c) {
                Some(v) => write!(h, "<td>{v}</td>").unwrap(),
                None => h.push_str("<td></td>"),
            }
        }
        h.push_str("</tr>\n");
    }
    h.push_str("</table>\n</body>\n</html>\n");
    h
}

/// Write via a sibling temp file and rename, so readers never see a partial
/// page.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), StoreError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Re-emits records in order, sleeping between them for the recorded gap
/// divided by `speed`. An infinite speed never sleeps.
#[derive(Debug)]
pub struct Replay {
    records: std::vec::IntoIter<Record>,
    speed: f64,
    origin: Option<(Instant, TimestampMs)>,
}

pub fn replay(records: Vec<Record>, speed: f64) -> Result<Replay, StoreError> {
    if !(speed > 0.0) {
        return Err(StoreError::BadSpeed(speed));
    }
    Ok(Replay { records: records.into_iter(), speed, origin: None })
}

impl Iterator for Replay {
    type Item = Record;

    fn next(&mut self) -> Option<Record> {
        let rec = self.records.next()?;
        if self.speed.is_finite() {
            match self.origin {
                None => self.origin = Some((Instant::now(), rec.timestamp_ms)),
                Some((start, t0)) => {
                    let offset = (rec.timestamp_ms - t0) as f64 / 1000.0 / self.speed;
                    let due = start + Duration::from_secs_f64(offset.max(0.0));
                    let now = Instant::now();
                    if due > now {
                        thread::sleep(due - now);
                    }
                }
            }
        }
        Some(rec)
    }
}
