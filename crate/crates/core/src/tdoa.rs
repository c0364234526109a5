//! Sensors, sensor subsets and TDoA fingerprints.
//!
//! A fingerprint is the vector of arrival-time differences relative to the
//! earliest-receiving sensor of a subset. Both the measured side (from
//! timestamps) and the expected side (from geometry) are re-based on their own
//! minimum so they are directly comparable.

use std::fmt;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoError, GeoPosition, PropagationModel};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TdoaError {
    #[error("a sensor set needs at least 2 sensors, got {0}")]
    TooFewSensors(usize),
    #[error("sensor `{0}` appears more than once")]
    DuplicateSensor(SensorId),
    #[error("unknown sensor `{0}`")]
    UnknownSensor(SensorId),
    #[error("fingerprints cover different sensor subsets ({left} vs {right})")]
    SubsetMismatch { left: SubsetKey, right: SubsetKey },
    #[error("sensor id must be non-empty and free of `+`, `=`, `|`, `,` and whitespace: {0:?}")]
    InvalidId(String),
    #[error("non-finite timestamp for sensor `{0}`")]
    NonFiniteTimestamp(SensorId),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// Identifier of a ground sensor.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SensorId(String);

impl TryFrom<String> for SensorId {
    type Error = TdoaError;

    fn try_from(s: String) -> Result<Self, TdoaError> {
        Self::new(s)
    }
}

impl From<SensorId> for String {
    fn from(id: SensorId) -> String {
        id.0
    }
}

impl SensorId {
    pub fn new(id: impl Into<String>) -> Result<Self, TdoaError> {
        let id = id.into();
        let bad = |c: char| c.is_whitespace() || matches!(c, '+' | '=' | '|' | ',' | '"');
        if id.is_empty() || id.chars().any(bad) {
            return Err(TdoaError::InvalidId(id));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Canonical (sorted) tuple of sensor ids naming a subset.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<SensorId>", into = "Vec<SensorId>")]
pub struct SubsetKey(Vec<SensorId>);

impl TryFrom<Vec<SensorId>> for SubsetKey {
    type Error = TdoaError;

    fn try_from(ids: Vec<SensorId>) -> Result<Self, TdoaError> {
        Self::new(ids)
    }
}

impl From<SubsetKey> for Vec<SensorId> {
    fn from(k: SubsetKey) -> Self {
        k.0
    }
}

impl SubsetKey {
    /// Builds a key from ids in any order; duplicates are rejected.
    pub fn new(mut ids: Vec<SensorId>) -> Result<Self, TdoaError> {
        ids.sort();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(TdoaError::DuplicateSensor(w[0].clone()));
        }
        Ok(Self(ids))
    }

    pub fn ids(&self) -> &[SensorId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn parse(s: &str) -> Result<Self, TdoaError> {
        Self::new(s.split('+').map(SensorId::new).collect::<Result<_, _>>()?)
    }
}

impl fmt::Display for SubsetKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, id) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            f.write_str(id.as_str())?;
        }
        Ok(())
    }
}

/// A ground receiver and its (optional) clock error parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sensor {
    pub id: SensorId,
    pub position: GeoPosition,
    #[serde(default)]
    pub clock_offset_s: f64,
    #[serde(default)]
    pub clock_drift_sps: f64,
}

impl Sensor {
    pub fn new(id: SensorId, position: GeoPosition) -> Self {
        Self { id, position, clock_offset_s: 0.0, clock_drift_sps: 0.0 }
    }
}

/// Ordered set of at least two sensors, sorted by id.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct SensorSet {
    sensors: Vec<Sensor>,
}

impl<'de> Deserialize<'de> for SensorSet {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let sensors = Vec::<Sensor>::deserialize(d)?;
        SensorSet::new(sensors).map_err(serde::de::Error::custom)
    }
}

impl SensorSet {
    pub fn new(mut sensors: Vec<Sensor>) -> Result<Self, TdoaError> {
        if sensors.len() < 2 {
            return Err(TdoaError::TooFewSensors(sensors.len()));
        }
        for s in &sensors {
            s.position.validate()?;
        }
        sensors.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = sensors.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(TdoaError::DuplicateSensor(w[0].id.clone()));
        }
        Ok(Self { sensors })
    }

    pub fn len(&self) -> usize {
        self.sensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sensors.is_empty()
    }

    pub fn sensors(&self) -> &[Sensor] {
        &self.sensors
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Sensor> {
        self.sensors.iter()
    }

    pub fn index_of(&self, id: &SensorId) -> Option<usize> {
        self.sensors.binary_search_by(|s| s.id.cmp(id)).ok()
    }

    pub fn get(&self, id: &SensorId) -> Option<&Sensor> {
        self.index_of(id).map(|i| &self.sensors[i])
    }

    pub fn key(&self) -> SubsetKey {
        SubsetKey(self.sensors.iter().map(|s| s.id.clone()).collect())
    }

    /// Key of the subset given by sorted indices into this set.
    pub fn key_for(&self, indices: &[usize]) -> SubsetKey {
        SubsetKey(indices.iter().map(|&i| self.sensors[i].id.clone()).collect())
    }

    /// Indices (into this set) of the sensors named by `key`.
    pub fn indices_of(&self, key: &SubsetKey) -> Result<Vec<usize>, TdoaError> {
        key.ids()
            .iter()
            .map(|id| self.index_of(id).ok_or_else(|| TdoaError::UnknownSensor(id.clone())))
            .collect()
    }

    pub fn subset(&self, key: &SubsetKey) -> Result<SensorSet, TdoaError> {
        let idx = self.indices_of(key)?;
        SensorSet::new(idx.into_iter().map(|i| self.sensors[i].clone()).collect())
    }

    /// Every subset with at least `min_size` sensors, as sorted index lists.
    ///
    /// Ordered by subset size, then lexicographically.
    pub fn subsets(&self, min_size: usize) -> Vec<Vec<usize>> {
        let n = self.len();
        let mut out = Vec::new();
        for size in min_size.max(1)..=n {
            let mut combo: Vec<usize> = (0..size).collect();
            loop {
                out.push(combo.clone());
                // Advance to the next combination in lexicographic order.
                let mut i = size;
                while i > 0 && combo[i - 1] == n - size + i - 1 {
                    i -= 1;
                }
                if i == 0 {
                    break;
                }
                combo[i - 1] += 1;
                for j in i..size {
                    combo[j] = combo[j - 1] + 1;
                }
            }
        }
        out
    }

    pub fn ecef_positions(&self) -> Vec<Vector3<f64>> {
        self.sensors.iter().map(|s| s.position.to_ecef()).collect()
    }
}

/// Number of subsets of an `n`-sensor deployment with at least 2 sensors.
pub fn subset_count(n: usize) -> usize {
    assert!(n < usize::BITS as usize, "too many sensors");
    (1usize << n) - n - 1
}

/// A timestamped reception of one message at one sensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reception {
    pub sensor: SensorId,
    pub timestamp_s: f64,
}

impl Reception {
    pub fn new(sensor: SensorId, timestamp_s: f64) -> Self {
        Self { sensor, timestamp_s }
    }
}

/// Time differences of arrival relative to the earliest receiver of a subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TdoaFingerprint {
    pub subset_key: SubsetKey,
    pub reference_sensor: SensorId,
    /// One entry per sensor in `subset_key` order; the reference entry is 0.
    pub tdoas_s: Vec<f64>,
}

impl TdoaFingerprint {
    /// Re-bases raw per-sensor times (in `key` order) on their minimum.
    /// Ties pick the first sensor in canonical order.
    pub fn from_times(key: SubsetKey, times: &[f64]) -> Self {
        debug_assert_eq!(key.len(), times.len());
        let mut reference = 0;
        for (i, &t) in times.iter().enumerate() {
            if t < times[reference] {
                reference = i;
            }
        }
        let t_min = times[reference];
        let tdoas_s = times.iter().map(|&t| t - t_min).collect();
        let reference_sensor = key.ids()[reference].clone();
        Self { subset_key: key, reference_sensor, tdoas_s }
    }

    pub fn len(&self) -> usize {
        self.tdoas_s.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tdoas_s.is_empty()
    }

    pub fn reference_index(&self) -> usize {
        self.subset_key
            .ids()
            .iter()
            .position(|id| *id == self.reference_sensor)
            .expect("reference sensor belongs to its subset")
    }
}

/// Propagation times from an ECEF point to each sensor, written into `out`.
pub(crate) fn propagation_times_ecef(
    emitter: &Vector3<f64>,
    sensors: &[Vector3<f64>],
    model: &PropagationModel,
    out: &mut [f64],
) {
    for (o, s) in out.iter_mut().zip(sensors) {
        *o = model.time_for_distance((emitter - s).norm());
    }
}

/// Re-bases `times` in place on their minimum.
pub(crate) fn rebase_on_min(times: &mut [f64]) {
    let t_min = times.iter().copied().fold(f64::INFINITY, f64::min);
    for t in times.iter_mut() {
        *t -= t_min;
    }
}

/// The fingerprint an emitter at `emitter` would produce at `subset`.
pub fn expected_fingerprint(
    emitter: &GeoPosition,
    subset: &SensorSet,
    model: &PropagationModel,
) -> TdoaFingerprint {
    let mut times = vec![0.0; subset.len()];
    propagation_times_ecef(&emitter.to_ecef(), &subset.ecef_positions(), model, &mut times);
    TdoaFingerprint::from_times(subset.key(), &times)
}

/// Fingerprint of one message from synchronized per-sensor timestamps.
pub fn measured_fingerprint(arrivals: &[Reception]) -> Result<TdoaFingerprint, TdoaError> {
    if arrivals.len() < 2 {
        return Err(TdoaError::TooFewSensors(arrivals.len()));
    }
    let mut sorted: Vec<&Reception> = arrivals.iter().collect();
    sorted.sort_by(|a, b| a.sensor.cmp(&b.sensor));
    if let Some(w) = sorted.windows(2).find(|w| w[0].sensor == w[1].sensor) {
        return Err(TdoaError::DuplicateSensor(w[0].sensor.clone()));
    }
    if let Some(r) = sorted.iter().find(|r| !r.timestamp_s.is_finite()) {
        return Err(TdoaError::NonFiniteTimestamp(r.sensor.clone()));
    }
    let key = SubsetKey(sorted.iter().map(|r| r.sensor.clone()).collect());
    let times: Vec<f64> = sorted.iter().map(|r| r.timestamp_s).collect();
    Ok(TdoaFingerprint::from_times(key, &times))
}

/// Euclidean distance between two fingerprints of the same subset, in seconds.
pub fn fingerprint_distance(r: &TdoaFingerprint, f: &TdoaFingerprint) -> Result<f64, TdoaError> {
    if r.subset_key != f.subset_key {
        return Err(TdoaError::SubsetMismatch {
            left: r.subset_key.clone(),
            right: f.subset_key.clone(),
        });
    }
    Ok(squared_distance(&r.tdoas_s, &f.tdoas_s).sqrt())
}

/// Sum of squared differences, accumulated in index order.
#[inline]
pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}
