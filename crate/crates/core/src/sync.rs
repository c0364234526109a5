//! A-posteriori receiver clock synchronization from position-bearing
//! messages.
//!
//! Every message with a trusted position claim tells us when it should have
//! arrived at a sensor. Regressing the sensor's raw timestamp error against
//! elapsed time yields a first-order clock model:
//!
//! ```text
//! raw - true = offset + drift * (raw - reference_epoch)
//! ```

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{propagation_time, GeoPosition, PropagationModel};
use crate::tdoa::{Reception, Sensor, SensorId};

/// Largest drift magnitude accepted from a fit.
pub const MAX_DRIFT_SPS: f64 = 1e-3;

/// Default calibration window length.
pub const DEFAULT_WINDOW_S: f64 = 600.0;


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClockModel {
    pub sensor_id: SensorId,
    pub offset_s: f64,
    pub drift_sps: f64,
    pub reference_epoch_s: f64,
    pub fit_rms_s: f64,
}

impl ClockModel {
    pub fn identity(sensor_id: SensorId) -> Self {
        Self { sensor_id, offset_s: 0.0, drift_sps: 0.0, reference_epoch_s: 0.0, fit_rms_s: 0.0 }
    }

    /// Clock error at raw timestamp `raw_s`.
    pub fn error_at(&self, raw_s: f64) -> f64 {
        self.offset_s + self.drift_sps * (raw_s - self.reference_epoch_s)
    }

    /// Corrected time for a raw timestamp.
    pub fn apply(&self, raw_s: f64) -> f64 {
        raw_s - self.error_at(raw_s)
    }

    /// Exact inverse of [`apply`](Self::apply): the raw timestamp this clock
    /// reports for true time `true_s`.
    pub fn distort(&self, true_s: f64) -> f64 {
        // Solve raw = t + offset + drift (raw - epoch) for the small error term
        // first so the large timestamp is rounded only once.
        let err = (self.offset_s + self.drift_sps * (true_s - self.reference_epoch_s)) / (1.0 - self.drift_sps);
        true_s + err
    }

    pub fn is_identity(&self) -> bool {
        self.offset_s == 0.0 && self.drift_sps == 0.0
    }
}

/// Corrected time for `raw_s` under `model`.
pub fn apply_clock(model: &ClockModel, raw_s: f64) -> f64 {
    model.apply(raw_s)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SyncError {
    #[error("{got} usable observations, at least 2 required")]
    InsufficientObservations { got: usize },
    /// The fallback keeps drift at 0 and estimates only the offset.
    #[error("observations span no time; offset-only model available")]
    DegenerateSpan { fallback: ClockModel },
    #[error("fitted drift {0} s/s is outside the plausible range")]
    ImplausibleDrift(f64),
    #[error("non-finite observation")]
    NonFinite,
}

/// What pins down the true emission time of a calibration message.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeAnchor {
    /// Emission time known directly.
    EmitTime(f64),
    /// Arrival at a trusted reference sensor.
    Reference { position: GeoPosition, timestamp_s: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockObservation {
    pub claimed_position: GeoPosition,
    pub raw_timestamp_s: f64,
    pub anchor: TimeAnchor,
}

impl ClockObservation {
    fn expected_arrival(&self, sensor: &GeoPosition, model: &PropagationModel) -> f64 {
        let emit = match self.anchor {
            TimeAnchor::EmitTime(t) => t,
            TimeAnchor::Reference { position, timestamp_s } => {
                timestamp_s - propagation_time(&self.claimed_position, &position, model)
            }
        };
        emit + propagation_time(&self.claimed_position, sensor, model)
    }
}

struct Line {
    intercept: f64,
    slope: f64,
}

/// Ordinary least squares of `y` on `x`. `None` when `x` has no spread.
fn fit_line(x: &[f64], y: &[f64]) -> Option<Line> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
    }
    if sxx <= 0.0 {
        return None;
    }
    let slope = sxy / sxx;
    Some(Line { intercept: my - slope * mx, slope })
}

fn rms(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), r| (s + r * r, n + 1));
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

/// Fits a linear clock model for `sensor`. One round of 3σ residual trimming
/// precedes the final fit.
pub fn fit_clock(sensor: &Sensor, observations: &[ClockObservation]) -> Result<ClockModel, SyncError> {
    fit_clock_with(sensor, observations, &PropagationModel::default())
}

pub fn fit_clock_with(
    sensor: &Sensor,
    observations: &[ClockObservation],
    model: &PropagationModel,
) -> Result<ClockModel, SyncError> {
    if observations.len() < 2 {
        return Err(SyncError::InsufficientObservations { got: observations.len() });
    }
    let epoch = observations.iter().map(|o| o.raw_timestamp_s).fold(f64::INFINITY, f64::min);
    let mut x = Vec::with_capacity(observations.len());
    let mut y = Vec::with_capacity(observations.len());
    for o in observations {
        let err = o.raw_timestamp_s - o.expected_arrival(&sensor.position, model);
        if !(err.is_finite() && o.raw_timestamp_s.is_finite()) {
            return Err(SyncError::NonFinite);
        }
        x.push(o.raw_timestamp_s - epoch);
        y.push(err);
    }

    let Some(mut line) = fit_line(&x, &y) else {
        let offset = y.iter().sum::<f64>() / y.len() as f64;
        let fit_rms_s = rms(y.iter().map(|v| v - offset));
        return Err(SyncError::DegenerateSpan {
            fallback: ClockModel { sensor_id: sensor.id.clone(), offset_s: offset, drift_sps: 0.0, reference_epoch_s: epoch, fit_rms_s },
        });
    };
    let resid = |l: &Line, i: usize| y[i] - (l.intercept + l.slope * x[i]);
    let sigma = rms((0..x.len()).map(|i| resid(&line, i)));
    let mut kept: Vec<usize> = (0..x.len()).collect();
    if sigma > 1e-12 {
        let trimmed: Vec<usize> = kept.iter().copied().filter(|&i| resid(&line, i).abs() <= 3.0 * sigma).collect();
        if trimmed.len() >= 2 && trimmed.len() < kept.len() {
            let tx: Vec<f64> = trimmed.iter().map(|&i| x[i]).collect();
            let ty: Vec<f64> = trimmed.iter().map(|&i| y[i]).collect();
            if let Some(l) = fit_line(&tx, &ty) {
                line = l;
                kept = trimmed;
            }
        }
    }
    if line.slope.abs() >= MAX_DRIFT_SPS {
        return Err(SyncError::ImplausibleDrift(line.slope));
    }
    let fit_rms_s = rms(kept.iter().map(|&i| resid(&line, i)));
    Ok(ClockModel {
        sensor_id: sensor.id.clone(),
        offset_s: line.intercept,
        drift_sps: line.slope,
        reference_epoch_s: epoch,
        fit_rms_s,
    })
}

/// Clock models keyed by sensor. Sensors without a model are treated as
/// already synchronized.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClockTable {
    models: BTreeMap<SensorId, Vec<ClockModel>>,
}

impl ClockTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a model; several models per sensor form a windowed schedule.
    pub fn insert(&mut self, model: ClockModel) {
        let list = self.models.entry(model.sensor_id.clone()).or_default();
        list.push(model);
        list.sort_by(|a, b| a.reference_epoch_s.total_cmp(&b.reference_epoch_s));
    }

    pub fn models(&self) -> impl Iterator<Item = &ClockModel> {
        self.models.values().flatten()
    }

    pub fn len(&self) -> usize {
        self.models.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    /// The model in force at `raw_s`: the latest whose epoch is not after it,
    /// or the earliest if `raw_s` precedes all of them.
    pub fn model_for(&self, sensor: &SensorId, raw_s: f64) -> Option<&ClockModel> {
        let list = self.models.get(sensor)?;
        let idx = list.partition_point(|m| m.reference_epoch_s <= raw_s);
        list.get(idx.saturating_sub(1))
    }

    pub fn correct(&self, r: &Reception) -> Reception {
        match self.model_for(&r.sensor, r.timestamp_s) {
            Some(m) => Reception::new(r.sensor.clone(), m.apply(r.timestamp_s)),
            None => r.clone(),
        }
    }

    pub fn correct_all(&self, receptions: &[Reception]) -> Vec<Reception> {
        receptions.iter().map(|r| self.correct(r)).collect()
    }
}

/// Fits one model per sensor over consecutive windows of `window_s` seconds
/// of raw time. Windows with too few observations are skipped; a degenerate
/// window contributes its offset-only fallback.
pub fn fit_windowed(
    sensors: &[Sensor],
    observations: &BTreeMap<SensorId, Vec<ClockObservation>>,
    window_s: f64,
    model: &PropagationModel,
) -> Result<ClockTable, SyncError> {
    let fitted: Vec<Result<Vec<ClockModel>, SyncError>> = sensors
        .par_iter()
        .map(|sensor| {
            let Some(obs) = observations.get(&sensor.id) else {
                return Ok(Vec::new());
            };
            let mut obs = obs.clone();
            obs.sort_by(|a, b| a.raw_timestamp_s.total_cmp(&b.raw_timestamp_s));
            let mut out = Vec::new();
            let mut start = 0;
            while start < obs.len() {
                let t0 = obs[start].raw_timestamp_s;
                let end = start + obs[start..].partition_point(|o| o.raw_timestamp_s < t0 + window_s);
                match fit_clock_with(sensor, &obs[start..end], model) {
                    Ok(m) => out.push(m),
                    Err(SyncError::DegenerateSpan { fallback }) => out.push(fallback),
                    Err(SyncError::InsufficientObservations { .. }) => {}
                    Err(e) => return Err(e),
                }
                start = end;
            }
            Ok(out)
        })
        .collect();
    let mut table = ClockTable::new();
    for models in fitted {
        for m in models? {
            table.insert(m);
        }
    }
    Ok(table)
}
