//! Verification of position claims against independent estimates, and
//! localization of the true origin of flagged tracks.
//!
//! A track is flagged once `window_len` consecutive received messages each
//! deviate from their estimate by more than `threshold_m`. The flag is
//! absorbing for the rest of the run.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{horizontal_distance, GeoPosition};
use crate::grid::TrainingGrid;
use crate::knn::{localize, KnnConfig, KnnError, LocationEstimate, Method};
use crate::tdoa::TdoaFingerprint;

/// Default altitude of the second, ground-level grid used by
/// [`locate_origin`].
pub const GROUND_GRID_ALTITUDE_M: f64 = 250.0;

/// Window caps searched by [`calibrate_policy`].
pub const DEFAULT_MAX_WINDOW: usize = 200;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum VerifyError {
    #[error("no candidate threshold keeps every legitimate track unflagged")]
    NoFeasiblePolicy,
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("no message of the track could be localized")]
    NothingLocalized,
    #[error(transparent)]
    Knn(#[from] KnnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyPolicy {
    pub threshold_m: f64,
    pub window_len: usize,
}

impl Default for VerifyPolicy {
    fn default() -> Self {
        Self::STRICT
    }
}

impl VerifyPolicy {
    pub const STRICT: VerifyPolicy = VerifyPolicy { threshold_m: 500.0, window_len: 15 };
    pub const FAST: VerifyPolicy = VerifyPolicy { threshold_m: 750.0, window_len: 9 };

    pub fn new(threshold_m: f64, window_len: usize) -> Result<Self, VerifyError> {
        let p = Self { threshold_m, window_len };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), VerifyError> {
        if !(self.threshold_m > 0.0 && self.threshold_m.is_finite()) {
            return Err(VerifyError::InvalidPolicy(format!("threshold {} must be positive", self.threshold_m)));
        }
        if self.window_len == 0 {
            return Err(VerifyError::InvalidPolicy("window_len must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackState {
    Clear,
    Flagged,
}

impl TrackState {
    pub fn as_str(self) -> &'static str {
        match self {
            TrackState::Clear => "clear",
            TrackState::Flagged => "flagged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackVerdict {
    pub flight_id: String,
    pub state: TrackState,
    pub consecutive_exceedances: usize,
    /// Number of received messages processed when the flag was raised.
    pub flagged_at_message: Option<usize>,
    pub attacker_origin_estimate: Option<LocationEstimate>,
    pub messages_seen: usize,
}

impl TrackVerdict {
    pub fn new(flight_id: impl Into<String>) -> Self {
        Self {
            flight_id: flight_id.into(),
            state: TrackState::Clear,
            consecutive_exceedances: 0,
            flagged_at_message: None,
            attacker_origin_estimate: None,
            messages_seen: 0,
        }
    }

    pub fn is_flagged(&self) -> bool {
        self.state == TrackState::Flagged
    }

    /// Operator re-arm: clears the flag and the counter.
    pub fn rearm(&mut self) {
        self.state = TrackState::Clear;
        self.consecutive_exceedances = 0;
        self.flagged_at_message = None;
    }
}

/// Advances the state machine by one message with the given deviation.
pub fn step_deviation(mut verdict: TrackVerdict, deviation_m: f64, policy: &VerifyPolicy) -> TrackVerdict {
    verdict.messages_seen += 1;
    if deviation_m > policy.threshold_m {
        verdict.consecutive_exceedances += 1;
    } else {
        verdict.consecutive_exceedances = 0;
    }
    if verdict.state == TrackState::Clear && verdict.consecutive_exceedances >= policy.window_len {
        verdict.state = TrackState::Flagged;
        verdict.flagged_at_message = Some(verdict.messages_seen);
    }
    verdict
}

/// Advances the state machine with the horizontal deviation between `claim`
/// and `estimate`.
pub fn verify_step(verdict: TrackVerdict, claim: &GeoPosition, estimate: &LocationEstimate, policy: &VerifyPolicy) -> TrackVerdict {
    step_deviation(verdict, horizontal_distance(claim, &estimate.position), policy)
}

/// One row of the verdict log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerdictRow {
    pub flight_id: String,
    pub msg_index: usize,
    pub deviation_m: f64,
    pub counter: usize,
    pub state: TrackState,
}

/// Runs one track through the state machine. `deviations` holds one entry
/// per message; `None` marks messages that could not be localized and are
/// skipped without touching the counter.
pub fn verify_track(flight_id: &str, deviations: &[Option<f64>], policy: &VerifyPolicy) -> (TrackVerdict, Vec<VerdictRow>) {
    let mut v = TrackVerdict::new(flight_id);
    let mut rows = Vec::with_capacity(deviations.len());
    for (i, d) in deviations.iter().enumerate() {
        let Some(d) = *d else { continue };
        v = step_deviation(v, d, policy);
        rows.push(VerdictRow { flight_id: flight_id.to_string(), msg_index: i, deviation_m: d, counter: v.consecutive_exceedances, state: v.state });
    }
    (v, rows)
}

/// Horizontal deviation of each claim from its estimate.
pub fn track_deviations(claims: &[GeoPosition], estimates: &[Option<LocationEstimate>]) -> Vec<Option<f64>> {
    claims
        .iter()
        .zip(estimates)
        .map(|(c, e)| e.as_ref().map(|e| horizontal_distance(c, &e.position)))
        .collect()
}

/// Longest run of consecutive deviations above `threshold_m`.
pub fn longest_exceedance_run(deviations: &[Option<f64>], threshold_m: f64) -> usize {
    let (mut best, mut run) = (0, 0);
    for d in deviations.iter().flatten() {
        if *d > threshold_m {
            run += 1;
            best = best.max(run);
        } else {
            run = 0;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub policy: VerifyPolicy,
    /// Minimal window per candidate threshold, `None` when infeasible.
    pub candidates: Vec<(f64, Option<usize>)>,
}

/// Chooses a policy that flags at most `target_fp_rate` of the legitimate
/// tracks. For each candidate threshold the minimal feasible window is found;
/// the returned policy minimizes `window_len × threshold_m`, ties going to
/// the lower threshold.
pub fn calibrate_policy(
    legit_tracks: &[Vec<Option<f64>>],
    candidate_thresholds: &[f64],
    target_fp_rate: f64,
    max_window: usize,
) -> Result<Calibration, VerifyError> {
    if legit_tracks.is_empty() || candidate_thresholds.is_empty() {
        return Err(VerifyError::NoFeasiblePolicy);
    }
    let allowed = (target_fp_rate.clamp(0.0, 1.0) * legit_tracks.len() as f64).floor() as usize;
    let candidates: Vec<(f64, Option<usize>)> = candidate_thresholds
        .iter()
        .map(|&thr| {
            // A track with longest run r is flagged exactly when window <= r.
            let mut needed: Vec<usize> = legit_tracks.iter().map(|t| longest_exceedance_run(t, thr) + 1).collect();
            needed.sort_unstable_by(|a, b| b.cmp(a));
            let window = needed.get(allowed).copied().unwrap_or(1).max(1);
            (thr, (thr > 0.0 && window <= max_window).then_some(window))
        })
        .collect();
    let policy = candidates
        .iter()
        .filter_map(|&(thr, w)| w.map(|w| VerifyPolicy { threshold_m: thr, window_len: w }))
        .min_by(|a, b| {
            (a.window_len as f64 * a.threshold_m)
                .total_cmp(&(b.window_len as f64 * b.threshold_m))
                .then(a.threshold_m.total_cmp(&b.threshold_m))
        })
        .ok_or(VerifyError::NoFeasiblePolicy)?;
    Ok(Calibration { policy, candidates })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Cruise,
    Ground,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OriginEstimate {
    pub plane: Plane,
    /// Per-message estimates on the winning plane, `None` where a message
    /// could not be localized.
    pub estimates: Vec<Option<LocationEstimate>>,
    /// Mean neighbour fingerprint distance on each plane.
    pub cruise_fit_s: f64,
    pub ground_fit_s: f64,
    /// Mean position of the per-message estimates.
    pub summary: LocationEstimate,
}

fn plane_fit(fps: &[TdoaFingerprint], grid: &TrainingGrid, cfg: &KnnConfig) -> (Vec<Option<LocationEstimate>>, f64) {
    let est: Vec<Option<LocationEstimate>> = fps.par_iter().map(|fp| localize(fp, grid, cfg).ok()).collect();
    let fits: Vec<f64> = est.iter().flatten().filter_map(|e| e.fingerprint_distance_s).collect();
    let mean = if fits.is_empty() { f64::INFINITY } else { fits.iter().sum::<f64>() / fits.len() as f64 };
    (est, mean)
}

/// Localizes the transmitter behind a flagged track against a cruise-altitude
/// grid and a ground-level grid, keeping the plane whose neighbours fit the
/// measured fingerprints better.
pub fn locate_origin(
    fingerprints: &[TdoaFingerprint],
    grid: &TrainingGrid,
    ground_grid: &TrainingGrid,
    cfg: &KnnConfig,
) -> Result<OriginEstimate, VerifyError> {
    let (cruise, cruise_fit_s) = plane_fit(fingerprints, grid, cfg);
    let (ground, ground_fit_s) = plane_fit(fingerprints, ground_grid, cfg);
    let (plane, estimates) = if ground_fit_s < cruise_fit_s { (Plane::Ground, ground) } else { (Plane::Cruise, cruise) };
    let located: Vec<&LocationEstimate> = estimates.iter().flatten().collect();
    let Some(first) = located.first() else {
        // Surface the per-message cause when there is a single one.
        if let Some(fp) = fingerprints.first() {
            localize(fp, grid, cfg)?;
        }
        return Err(VerifyError::NothingLocalized);
    };
    let n = located.len() as f64;
    let summary = LocationEstimate {
        position: GeoPosition {
            latitude_deg: located.iter().map(|e| e.position.latitude_deg).sum::<f64>() / n,
            longitude_deg: located.iter().map(|e| e.position.longitude_deg).sum::<f64>() / n,
            altitude_m: first.position.altitude_m,
        },
        method: Method::Knn,
        subset_key: first.subset_key.clone(),
        neighbor_spread_m: located.iter().map(|e| e.neighbor_spread_m).fold(0.0, f64::max),
        gdop: None,
        fingerprint_distance_s: Some(if plane == Plane::Ground { ground_fit_s } else { cruise_fit_s }),
    };
    Ok(OriginEstimate { plane, estimates, cruise_fit_s, ground_fit_s, summary })
}
