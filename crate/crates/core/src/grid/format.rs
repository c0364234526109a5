//! Binary grid container.
//!
//! All integers and floats are little-endian. Layout:
//!
//! ```text
//! magic        8 bytes   "GRIDLOC\0"
//! version      u32
//! header_len   u32       length of the header block that follows
//! header       header_len bytes
//!   center lat, lon, alt       3 x f64 (degrees, degrees, meters)
//!   extent_lat_deg, extent_lon_deg, altitude_m, square_side_m   4 x f64
//!   speed_mps                  f64
//!   rows, cols                 2 x u32
//!   sensor_count               u32
//!   per sensor: id_len u16, id (UTF-8), lat, lon, alt, clock_offset_s, clock_drift_sps (5 x f64)
//! table_count  u32
//! per table:   dim u16, dim x u16 sensor indices, rows*cols*dim x f64 fingerprints
//! digest       32 bytes  SHA-256 of every preceding byte
//! ```
//!
//! Cell centres are not stored; they are a pure function of the spec.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{GridError, GridSpec, TrainingGrid};
use crate::geo::{GeoPosition, PropagationModel};
use crate::tdoa::{Sensor, SensorId, SensorSet, SubsetKey};

pub const MAGIC: &[u8; 8] = b"GRIDLOC\0";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

fn invalid(msg: impl Into<String>) -> GridError {
    GridError::Io(io::Error::new(io::ErrorKind::InvalidData, msg.into()))
}

fn truncated() -> GridError {
    GridError::Io(io::Error::new(io::ErrorKind::UnexpectedEof, "grid file is truncated"))
}

/// Serializes a grid into the container format.
pub fn encode_grid(g: &TrainingGrid) -> Vec<u8> {
    let mut header = Vec::new();
    let s = &g.spec;
    for v in [
        s.center.latitude_deg,
        s.center.longitude_deg,
        s.center.altitude_m,
        s.extent_lat_deg,
        s.extent_lon_deg,
        s.altitude_m,
        s.square_side_m,
        g.model.speed_mps,
    ] {
        header.extend_from_slice(&v.to_le_bytes());
    }
    header.extend_from_slice(&(g.rows as u32).to_le_bytes());
    header.extend_from_slice(&(g.cols as u32).to_le_bytes());
    header.extend_from_slice(&(g.sensors.len() as u32).to_le_bytes());
    for sensor in g.sensors.iter() {
        let id = sensor.id.as_str().as_bytes();
        header.extend_from_slice(&(id.len() as u16).to_le_bytes());
        header.extend_from_slice(id);
        let p = &sensor.position;
        for v in [p.latitude_deg, p.longitude_deg, p.altitude_m, sensor.clock_offset_s, sensor.clock_drift_sps] {
            header.extend_from_slice(&v.to_le_bytes());
        }
    }

    let payload: usize = g.tables.iter().map(|t| 2 + 2 * t.dim() + 8 * t.values.len()).sum();
    let mut out = Vec::with_capacity(16 + header.len() + 4 + payload + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(g.tables.len() as u32).to_le_bytes());
    for t in &g.tables {
        out.extend_from_slice(&(t.dim() as u16).to_le_bytes());
        for &i in &t.sensor_indices {
            out.extend_from_slice(&(i as u16).to_le_bytes());
        }
        for v in &t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(digest.as_slice());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], GridError> {
        let end = self.pos.checked_add(n).ok_or_else(truncated)?;
        let s = self.buf.get(self.pos..end).ok_or_else(truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, GridError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, GridError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, GridError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

/// Parses a grid container. Any defect yields an error; no partial grid is
/// ever returned.
pub fn decode_grid(bytes: &[u8]) -> Result<TrainingGrid, GridError> {
    if bytes.len() < MAGIC.len() + 4 {
        return Err(truncated());
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(GridError::FormatVersionMismatch("not a grid file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(GridError::FormatVersionMismatch(format!(
            "file version {version}, this build reads version {FORMAT_VERSION}"
        )));
    }
    if bytes.len() < 16 + 4 + DIGEST_LEN {
        return Err(truncated());
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(invalid("grid file digest mismatch (truncated or corrupted)"));
    }

    let mut r = Reader { buf: body, pos: 12 };
    let header_len = r.u32()? as usize;
    let header_end = r.pos.checked_add(header_len).ok_or_else(truncated)?;
    let center = GeoPosition { latitude_deg: r.f64()?, longitude_deg: r.f64()?, altitude_m: r.f64()? };
    let spec = GridSpec {
        center,
        extent_lat_deg: r.f64()?,
        extent_lon_deg: r.f64()?,
        altitude_m: r.f64()?,
        square_side_m: r.f64()?,
    };
    spec.validate()?;
    let model = PropagationModel::new(r.f64()?)?;
    let rows = r.u32()? as usize;
    let cols = r.u32()? as usize;
    if spec.dims() != (rows, cols) {
        return Err(invalid(format!(
            "stored dimensions {rows}x{cols} disagree with the spec ({:?})",
            spec.dims()
        )));
    }
    let n_sensors = r.u32()? as usize;
    if n_sensors > u16::MAX as usize {
        return Err(invalid("too many sensors"));
    }
    let mut sensors = Vec::with_capacity(n_sensors.min(1024));
    for _ in 0..n_sensors {
        let len = r.u16()? as usize;
        let id = std::str::from_utf8(r.take(len)?).map_err(|_| invalid("sensor id is not UTF-8"))?;
        let id = SensorId::new(id)?;
        let position = GeoPosition { latitude_deg: r.f64()?, longitude_deg: r.f64()?, altitude_m: r.f64()? };
        let mut s = Sensor::new(id, position);
        s.clock_offset_s = r.f64()?;
        s.clock_drift_sps = r.f64()?;
        sensors.push(s);
    }
    if r.pos != header_end {
        return Err(invalid("header length mismatch"));
    }
    // Table indices refer to the stored order, which must already be canonical.
    if sensors.windows(2).any(|w| w[0].id >= w[1].id) {
        return Err(invalid("sensors not in canonical order"));
    }
    let sensors = SensorSet::new(sensors)?;

    let cells = rows * cols;
    let n_tables = r.u32()? as usize;
    if n_tables == 0 {
        return Err(invalid("grid file holds no tables"));
    }
    let mut raw = Vec::with_capacity(n_tables.min(1 << 16));
    let mut seen = std::collections::BTreeSet::new();
    for _ in 0..n_tables {
        let dim = r.u16()? as usize;
        if dim < 2 || dim > sensors.len() {
            return Err(invalid(format!("table dimension {dim}")));
        }
        let mut idx = Vec::with_capacity(dim);
        for _ in 0..dim {
            let i = r.u16()? as usize;
            if i >= sensors.len() || idx.last().is_some_and(|&last| i <= last) {
                return Err(invalid("table sensor indices out of range or unsorted"));
            }
            idx.push(i);
        }
        if !seen.insert(idx.clone()) {
            return Err(invalid("duplicate subset table"));
        }
        let n_values = cells.checked_mul(dim).ok_or_else(truncated)?;
        if n_values.checked_mul(8).is_none_or(|b| b > r.remaining()) {
            return Err(truncated());
        }
        let bytes = r.take(n_values * 8)?;
        let values: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        raw.push((idx, values));
    }
    if r.remaining() != 0 {
        return Err(invalid("trailing bytes after the last table"));
    }
    Ok(TrainingGrid::from_parts(spec, sensors, model, raw))
}

/// Human-readable sidecar written next to a saved grid.
#[derive(Debug, Serialize)]
pub struct GridManifest<'a> {
    pub format_version: u32,
    pub spec: &'a GridSpec,
    pub propagation_speed_mps: f64,
    pub rows: usize,
    pub cols: usize,
    pub sensors: &'a SensorSet,
    pub subset_tables: Vec<SubsetKey>,
    pub sha256: String,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes the grid container and its JSON sidecar (`<path>.json`).
/// Returns the SHA-256 of the container file as a hex string.
pub fn save_grid(g: &TrainingGrid, path: &Path) -> Result<String, GridError> {
    let bytes = encode_grid(g);
    let sha = hex_digest(&bytes);
    write_atomic(path, &bytes)?;
    let manifest = GridManifest {
        format_version: FORMAT_VERSION,
        spec: &g.spec,
        propagation_speed_mps: g.model.speed_mps,
        rows: g.rows,
        cols: g.cols,
        sensors: &g.sensors,
        subset_tables: g.tables.iter().map(|t| t.key.clone()).collect(),
        sha256: sha.clone(),
    };
    let mut json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    json.push(b'\n');
    write_atomic(&sidecar_path(path), &json)?;
    Ok(sha)
}

pub fn load_grid(path: &Path) -> Result<TrainingGrid, GridError> {
    decode_grid(&fs::read(path)?)
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
