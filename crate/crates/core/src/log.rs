//! Message logs: one record per received message, as CSV or JSON lines.
//!
//! CSV columns (header required, exact):
//!
//! ```text
//! flight_id,msg_id,claim_lat_deg,claim_lon_deg,claim_alt_m,truth_lat_deg,truth_lon_deg,truth_alt_m,emit_time_s,receptions
//! ```
//!
//! Claim and truth triples are either all present or all empty. `receptions`
//! is `S1=12.5|S2=12.50001`. JSON lines carry the same fields as objects,
//! with `claim`/`truth` as positions and `receptions` as
//! `[{"sensor": "S1", "timestamp_s": 12.5}, ...]`.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::GeoPosition;
use crate::tdoa::{Reception, SensorId};

pub const CSV_HEADER: [&str; 10] = [
    "flight_id",
    "msg_id",
    "claim_lat_deg",
    "claim_lon_deg",
    "claim_alt_m",
    "truth_lat_deg",
    "truth_lon_deg",
    "truth_alt_m",
    "emit_time_s",
    "receptions",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MessageRecord {
    /// ICAO 24-bit address, six hex digits.
    pub flight_id: String,
    pub msg_id: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub claim: Option<GeoPosition>,
    pub receptions: Vec<Reception>,
    /// Ground truth, simulated logs only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<GeoPosition>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub emit_time_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecordError {
    #[error("flight id must be six hex digits, got {0:?}")]
    FlightId(String),
    #[error("message has no receptions")]
    NoReceptions,
    #[error("sensor `{0}` received the message twice")]
    DuplicateReception(SensorId),
    #[error("bad field `{field}`: {reason}")]
    Field { field: &'static str, reason: String },
    #[error("expected {expected} columns, found {found}")]
    ColumnCount { expected: usize, found: usize },
    #[error("{0}")]
    Syntax(String),
}

#[derive(Debug, Error)]
pub enum LogError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("log header does not match the schema: expected `{expected}`, found `{found}`")]
    Schema { expected: String, found: String },
    #[error("cannot tell the log format of {0}; use .csv or .jsonl")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LogFormat {
    Csv,
    Jsonl,
}

impl LogFormat {
    pub fn from_path(path: &Path) -> Result<Self, LogError> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("csv") => Ok(Self::Csv),
            Some("jsonl") | Some("ndjson") => Ok(Self::Jsonl),
            _ => Err(LogError::UnknownFormat(path.display().to_string())),
        }
    }
}

/// A line that failed validation. Line numbers are 1-based and count the
/// header.
#[derive(Debug, Clone, PartialEq)]
pub struct LineError {
    pub line: u64,
    pub error: RecordError,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Ingested {
    pub records: Vec<MessageRecord>,
    pub malformed: Vec<LineError>,
}

impl MessageRecord {
    pub fn validate(&self) -> Result<(), RecordError> {
        if self.flight_id.len() != 6 || !self.flight_id.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(RecordError::FlightId(self.flight_id.clone()));
        }
        if self.receptions.is_empty() {
            return Err(RecordError::NoReceptions);
        }
        let mut seen = BTreeSet::new();
        for r in &self.receptions {
            if !r.timestamp_s.is_finite() {
                return Err(RecordError::Field { field: "receptions", reason: format!("non-finite timestamp at `{}`", r.sensor) });
            }
            if !seen.insert(&r.sensor) {
                return Err(RecordError::DuplicateReception(r.sensor.clone()));
            }
        }
        for (field, p) in [("claim", self.claim), ("truth", self.truth)] {
            if let Some(p) = p {
                p.validate().map_err(|e| RecordError::Field { field, reason: e.to_string() })?;
            }
        }
        if self.emit_time_s.is_some_and(|t| !t.is_finite()) {
            return Err(RecordError::Field { field: "emit_time_s", reason: "not finite".into() });
        }
        Ok(())
    }

    fn csv_fields(&self) -> [String; 10] {
        let triple = |p: Option<GeoPosition>| match p {
            Some(p) => [p.latitude_deg.to_string(), p.longitude_deg.to_string(), p.altitude_m.to_string()],
            None => Default::default(),
        };
        let [clat, clon, calt] = triple(self.claim);
        let [tlat, tlon, talt] = triple(self.truth);
        let rx = self.receptions.iter().map(|r| format!("{}={}", r.sensor, r.timestamp_s)).collect::<Vec<_>>().join("|");
        [
            self.flight_id.clone(),
            self.msg_id.to_string(),
            clat,
            clon,
            calt,
            tlat,
            tlon,
            talt,
            self.emit_time_s.map(|t| t.to_string()).unwrap_or_default(),
            rx,
        ]
    }

    fn from_csv_fields(f: &csv::StringRecord) -> Result<Self, RecordError> {
        if f.len() != CSV_HEADER.len() {
            return Err(RecordError::ColumnCount { expected: CSV_HEADER.len(), found: f.len() });
        }
        let rec = MessageRecord {
            flight_id: f[0].to_string(),
            msg_id: f[1].parse().map_err(|e: std::num::ParseIntError| RecordError::Field { field: "msg_id", reason: e.to_string() })?,
            claim: parse_triple("claim", [&f[2], &f[3], &f[4]])?,
            truth: parse_triple("truth", [&f[5], &f[6], &f[7]])?,
            emit_time_s: if f[8].is_empty() { None } else { Some(parse_f64("emit_time_s", &f[8])?) },
            receptions: parse_receptions(&f[9])?,
        };
        rec.validate()?;
        Ok(rec)
    }
}

fn parse_f64(field: &'static str, s: &str) -> Result<f64, RecordError> {
    s.parse().map_err(|e: std::num::ParseFloatError| RecordError::Field { field, reason: format!("{s:?}: {e}") })
}

fn parse_triple(field: &'static str, f: [&str; 3]) -> Result<Option<GeoPosition>, RecordError> {
    if f.iter().all(|s| s.is_empty()) {
        return Ok(None);
    }
    Ok(Some(GeoPosition { latitude_deg: parse_f64(field, f[0])?, longitude_deg: parse_f64(field, f[1])?, altitude_m: parse_f64(field, f[2])? }))
}

fn parse_receptions(s: &str) -> Result<Vec<Reception>, RecordError> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split('|')
        .map(|item| {
            let (id, t) = item.split_once('=').ok_or_else(|| RecordError::Field { field: "receptions", reason: format!("{item:?} is not sensor=time") })?;
            let sensor = SensorId::new(id).map_err(|e| RecordError::Field { field: "receptions", reason: e.to_string() })?;
            Ok(Reception::new(sensor, parse_f64("receptions", t)?))
        })
        .collect()
}

/// Parses one CSV data line (no header).
pub fn parse_csv_line(line: &str) -> Result<MessageRecord, RecordError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(line.as_bytes());
    let mut rec = csv::StringRecord::new();
    match rdr.read_record(&mut rec) {
        Ok(true) => MessageRecord::from_csv_fields(&rec),
        Ok(false) => Err(RecordError::Syntax("empty line".into())),
        Err(e) => Err(RecordError::Syntax(e.to_string())),
    }
}

/// Parses one JSON-lines record.
pub fn parse_jsonl_line(line: &str) -> Result<MessageRecord, RecordError> {
    let rec: MessageRecord = serde_json::from_str(line).map_err(|e| RecordError::Syntax(e.to_string()))?;
    rec.validate()?;
    Ok(rec)
}

pub fn read_log(reader: impl Read, format: LogFormat) -> Result<Ingested, LogError> {
    match format {
        LogFormat::Csv => read_csv(reader),
        LogFormat::Jsonl => read_jsonl(reader),
    }
}

/// Reads a log, choosing the format from the file extension.
pub fn ingest(path: &Path) -> Result<Ingested, LogError> {
    let format = LogFormat::from_path(path)?;
    read_log(File::open(path)?, format)
}

fn read_csv(reader: impl Read) -> Result<Ingested, LogError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).flexible(true).from_reader(reader);
    let mut out = Ingested::default();
    let mut rec = csv::StringRecord::new();
    let header_ok = match rdr.read_record(&mut rec) {
        Ok(true) => rec.iter().eq(CSV_HEADER.iter().copied()),
        Ok(false) => false,
        Err(e) => return Err(csv_to_io(e)),
    };
    if !header_ok {
        return Err(LogError::Schema { expected: CSV_HEADER.join(","), found: rec.iter().collect::<Vec<_>>().join(",") });
    }
    loop {
        match rdr.read_record(&mut rec) {
            Ok(false) => break,
            Ok(true) => {
                let line = rec.position().map_or(0, |p| p.line());
                match MessageRecord::from_csv_fields(&rec) {
                    Ok(r) => out.records.push(r),
                    Err(error) => out.malformed.push(LineError { line, error }),
                }
            }
            Err(e) => {
                let line = e.position().map_or(0, |p| p.line());
                if e.is_io_error() {
                    return Err(csv_to_io(e));
                }
                out.malformed.push(LineError { line, error: RecordError::Syntax(e.to_string()) });
            }
        }
    }
    Ok(out)
}

fn csv_to_io(e: csv::Error) -> LogError {
    match e.into_kind() {
        csv::ErrorKind::Io(e) => LogError::Io(e),
        other => LogError::Io(io::Error::new(io::ErrorKind::InvalidData, format!("{other:?}"))),
    }
}

fn read_jsonl(reader: impl Read) -> Result<Ingested, LogError> {
    let mut out = Ingested::default();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match parse_jsonl_line(&line) {
            Ok(r) => out.records.push(r),
            Err(error) => out.malformed.push(LineError { line: i as u64 + 1, error }),
        }
    }
    Ok(out)
}

pub fn write_log(writer: impl Write, format: LogFormat, records: &[MessageRecord]) -> io::Result<()> {
    match format {
        LogFormat::Csv => {
            let mut w = csv::Writer::from_writer(writer);
            w.write_record(CSV_HEADER)?;
            for r in records {
                w.write_record(r.csv_fields())?;
            }
            w.flush()
        }
        LogFormat::Jsonl => {
            let mut w = io::BufWriter::new(writer);
            for r in records {
                serde_json::to_writer(&mut w, r)?;
                w.write_all(b"\n")?;
            }
            w.flush()
        }
    }
}
