//! Synthetic deployments, traffic, timing noise, coverage statistics and
//! attacker tracks.
//!
//! All randomness comes from ChaCha8 generators. A scenario seed drives
//! several independent streams so that, for example, changing the noise level
//! leaves sensor and emitter placement untouched:
//!
//! | stream | use                 |
//! |--------|---------------------|
//! | 0      | sensor placement    |
//! | 1      | emitters and tracks |
//! | 2      | timing noise        |
//! | 3      | attackers           |
//! | 4      | message loss        |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{distance_3d, GeoPosition, LocalFrame, PropagationModel};
use crate::grid::{cell_centers, GridSpec};
use crate::mlat::gdop;
use crate::sync::ClockModel;
use crate::tdoa::{Reception, Sensor, SensorId, SensorSet, TdoaError};

pub const STREAM_SENSORS: u64 = 0;
pub const STREAM_EMITTERS: u64 = 1;
pub const STREAM_NOISE: u64 = 2;
pub const STREAM_ATTACKER: u64 = 3;
pub const STREAM_LOSS: u64 = 4;

/// Position messages per second.
pub const MESSAGE_RATE_HZ: f64 = 2.0;
pub const DEFAULT_LOS_RANGE_M: f64 = 400_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("victim track has {got} positions, {need} required")]
    TrackTooShort { got: usize, need: usize },
    #[error(transparent)]
    Tdoa(#[from] TdoaError),
}

/// A generator on the given stream of `seed`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Seed for repetition `index` of an experiment seeded with `base`
/// (SplitMix64 finalizer).
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn check_range(name: &str, r: (f64, f64)) -> Result<(), SimError> {
    if r.0.is_finite() && r.1.is_finite() && r.0 <= r.1 {
        Ok(())
    } else {
        Err(SimError::InvalidSpec(format!("{name} range {r:?} is not well ordered")))
    }
}

fn uniform(rng: &mut ChaCha8Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..r.1)
    }
}

/// Rectangular area in the tangent plane at `center`.
#[derive(Debug, Clone)]
pub struct Region {
    pub center: GeoPosition,
    pub width_m: f64,
    pub height_m: f64,
    frame: LocalFrame,
}

impl Region {
    pub fn new(center: GeoPosition, width_m: f64, height_m: f64) -> Self {
        let center = center.with_altitude(0.0);
        Self { center, width_m, height_m, frame: LocalFrame::new(center) }
    }

    pub fn frame(&self) -> &LocalFrame {
        &self.frame
    }

    pub fn contains_horizontal(&self, east_m: f64, north_m: f64) -> bool {
        east_m.abs() <= self.width_m / 2.0 && north_m.abs() <= self.height_m / 2.0
    }

    pub fn contains(&self, p: &GeoPosition) -> bool {
        let e = self.frame.to_enu(&p.with_altitude(0.0));
        self.contains_horizontal(e.east_m, e.north_m)
    }

    /// Uniform horizontal sample, returned as frame coordinates.
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> (f64, f64) {
        (uniform(rng, (-self.width_m / 2.0, self.width_m / 2.0)), uniform(rng, (-self.height_m / 2.0, self.height_m / 2.0)))
    }

    pub fn at(&self, east_m: f64, north_m: f64, altitude_m: f64) -> GeoPosition {
        self.frame.horizontal_to_geo(east_m, north_m, altitude_m)
    }

    /// A grid spec covering the region at `altitude_m`.
    pub fn grid_spec(&self, altitude_m: f64, square_side_m: f64) -> GridSpec {
        let lat = self.center.latitude_deg;
        GridSpec {
            center: self.center,
            extent_lat_deg: self.height_m / crate::geo::meters_per_degree_lat(lat, altitude_m),
            extent_lon_deg: self.width_m / crate::geo::meters_per_degree_lon(lat, altitude_m),
            altitude_m,
            square_side_m,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub center: GeoPosition,
    pub region_km: (f64, f64),
    pub sensor_count: usize,
    pub sensor_alt_range_m: (f64, f64),
    pub emitter_alt_range_m: (f64, f64),
    pub signal_count: usize,
    /// Standard deviation of the timing noise.
    pub noise_std_s: f64,
    pub rng_seed: u64,
    pub los_range_m: f64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            center: GeoPosition { latitude_deg: 46.8, longitude_deg: 8.2, altitude_m: 0.0 },
            region_km: (100.0, 100.0),
            sensor_count: 5,
            sensor_alt_range_m: (0.0, 1000.0),
            emitter_alt_range_m: (10_000.0, 11_000.0),
            signal_count: 1000,
            noise_std_s: 0.0,
            rng_seed: 0,
            los_range_m: DEFAULT_LOS_RANGE_M,
        }
    }
}

impl ScenarioSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        self.center.validate().map_err(|e| SimError::InvalidSpec(e.to_string()))?;
        check_range("sensor altitude", self.sensor_alt_range_m)?;
        check_range("emitter altitude", self.emitter_alt_range_m)?;
        let bad = |m: &str| Err(SimError::InvalidSpec(m.to_string()));
        if !(self.region_km.0 > 0.0 && self.region_km.1 > 0.0) {
            return bad("region must have positive size");
        }
        if self.sensor_count < 2 {
            return bad("at least two sensors required");
        }
        if self.signal_count == 0 {
            return bad("signal_count must be positive");
        }
        if !(self.noise_std_s >= 0.0 && self.noise_std_s.is_finite()) {
            return bad("noise_std_s must be a non-negative number");
        }
        if !(self.los_range_m > 0.0) {
            return bad("los_range_m must be positive");
        }
        Ok(())
    }

    pub fn region(&self) -> Region {
        Region::new(self.center, self.region_km.0 * 1000.0, self.region_km.1 * 1000.0)
    }
}

/// One transmitted message and its noiseless arrivals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Emission {
    pub index: usize,
    pub emit_time_s: f64,
    pub position: GeoPosition,
    /// Sensors within line of sight only, in sensor order.
    pub arrivals: Vec<Reception>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub sensors: SensorSet,
    pub emissions: Vec<Emission>,
}

fn sensor_ids(n: usize) -> Vec<SensorId> {
    let width = n.to_string().len();
    (1..=n).map(|i| SensorId::new(format!("S{i:0width$}")).expect("valid id")).collect()
}

/// Sensors placed uniformly in `region` at altitudes drawn from `alt_range`.
pub fn random_deployment(region: &Region, count: usize, alt_range: (f64, f64), rng: &mut ChaCha8Rng) -> Result<SensorSet, SimError> {
    let sensors = sensor_ids(count)
        .into_iter()
        .map(|id| {
            let (e, n) = region.sample(rng);
            Sensor::new(id, region.at(e, n, uniform(rng, alt_range)))
        })
        .collect();
    Ok(SensorSet::new(sensors)?)
}

/// Sensors scattered within `radius_m` of the region centre, the shape of an
/// unplanned deployment around one metropolitan area.
pub fn clustered_deployment(region: &Region, count: usize, radius_m: f64, alt_range: (f64, f64), rng: &mut ChaCha8Rng) -> Result<SensorSet, SimError> {
    let sensors = sensor_ids(count)
        .into_iter()
        .map(|id| {
            let r = radius_m * rng.random::<f64>().sqrt();
            let th = rng.random_range(0.0..std::f64::consts::TAU);
            Sensor::new(id, region.at(r * th.cos(), r * th.sin(), uniform(rng, alt_range)))
        })
        .collect();
    Ok(SensorSet::new(sensors)?)
}

/// Noiseless arrival times of a message at the sensors within `los_range_m`.
pub fn arrivals_for(position: &GeoPosition, emit_time_s: f64, sensors: &SensorSet, model: &PropagationModel, los_range_m: f64) -> Vec<Reception> {
    sensors
        .iter()
        .filter_map(|s| {
            let d = distance_3d(position, &s.position);
            (d <= los_range_m).then(|| Reception::new(s.id.clone(), emit_time_s + model.time_for_distance(d)))
        })
        .collect()
}

/// Random deployment plus `signal_count` emitters uniform over the region,
/// transmitting at the standard message cadence.
pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scenario, SimError> {
    spec.validate()?;
    let region = spec.region();
    let model = PropagationModel::default();
    let sensors = random_deployment(&region, spec.sensor_count, spec.sensor_alt_range_m, &mut stream_rng(spec.rng_seed, STREAM_SENSORS))?;
    let mut rng = stream_rng(spec.rng_seed, STREAM_EMITTERS);
    let emissions = (0..spec.signal_count)
        .map(|index| {
            let (e, n) = region.sample(&mut rng);
            let position = region.at(e, n, uniform(&mut rng, spec.emitter_alt_range_m));
            let emit_time_s = index as f64 / MESSAGE_RATE_HZ;
            let arrivals = arrivals_for(&position, emit_time_s, &sensors, &model, spec.los_range_m);
            Emission { index, emit_time_s, position, arrivals }
        })
        .collect();
    Ok(Scenario { spec: *spec, sensors, emissions })
}

/// Adds independent zero-mean Gaussian noise of standard deviation
/// `noise_std_s` to every arrival.
pub fn add_noise(arrivals: &[Reception], noise_std_s: f64, rng: &mut ChaCha8Rng) -> Vec<Reception> {
    if noise_std_s == 0.0 {
        return arrivals.to_vec();
    }
    let normal = Normal::new(0.0, noise_std_s).expect("validated noise level");
    arrivals.iter().map(|r| Reception::new(r.sensor.clone(), r.timestamp_s + normal.sample(rng))).collect()
}

impl Scenario {
    /// Arrivals of every emission with the scenario's noise applied, drawn
    /// from the noise stream.
    pub fn noisy_arrivals(&self) -> Vec<Vec<Reception>> {
        self.noisy_arrivals_with(self.spec.noise_std_s)
    }

    pub fn noisy_arrivals_with(&self, noise_std_s: f64) -> Vec<Vec<Reception>> {
        let mut rng = stream_rng(self.spec.rng_seed, STREAM_NOISE);
        self.emissions.iter().map(|e| add_noise(&e.arrivals, noise_std_s, &mut rng)).collect()
    }
}

/// The clock error model carried by a simulated sensor, epoch 0.
pub fn sensor_clock(sensor: &Sensor) -> ClockModel {
    ClockModel {
        sensor_id: sensor.id.clone(),
        offset_s: sensor.clock_offset_s,
        drift_sps: sensor.clock_drift_sps,
        reference_epoch_s: 0.0,
        fit_rms_s: 0.0,
    }
}

/// Converts true arrival times into the raw timestamps of each sensor's
/// unsynchronized clock.
pub fn distort_clocks(arrivals: &[Reception], sensors: &SensorSet) -> Vec<Reception> {
    arrivals
        .iter()
        .map(|r| match sensors.get(&r.sensor) {
            Some(s) => Reception::new(r.sensor.clone(), sensor_clock(s).distort(r.timestamp_s)),
            None => r.clone(),
        })
        .collect()
}

/// Gives every sensor a random clock offset in `±max_offset_s` and drift in
/// `±max_drift_sps`.
pub fn randomize_clocks(sensors: &SensorSet, max_offset_s: f64, max_drift_sps: f64, rng: &mut ChaCha8Rng) -> SensorSet {
    let out = sensors
        .iter()
        .map(|s| Sensor {
            clock_offset_s: uniform(rng, (-max_offset_s, max_offset_s)),
            clock_drift_sps: uniform(rng, (-max_drift_sps, max_drift_sps)),
            ..s.clone()
        })
        .collect();
    SensorSet::new(out).expect("same ids as before")
}

/// Keep-mask dropping each message independently with probability `p`.
pub fn message_loss(count: usize, p: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    (0..count).map(|_| p <= 0.0 || rng.random::<f64>() >= p).collect()
}

/// A straight, constant-speed flight sampled at the message cadence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlightTrack {
    pub flight_id: String,
    pub positions: Vec<GeoPosition>,
    pub times_s: Vec<f64>,
}

/// Cruise speed range for generated flights, m/s.
pub const CRUISE_SPEED_MPS: (f64, f64) = (220.0, 250.0);

/// Straight flight of `count` messages that stays inside `region`, at a
/// cruise altitude from `alt_range`.
pub fn generate_flight(flight_id: &str, region: &Region, count: usize, alt_range: (f64, f64), start_time_s: f64, rng: &mut ChaCha8Rng) -> FlightTrack {
    let speed = uniform(rng, CRUISE_SPEED_MPS);
    let alt = uniform(rng, alt_range);
    let length = speed * (count.saturating_sub(1)) as f64 / MESSAGE_RATE_HZ;
    let (mut e0, mut n0) = region.sample(rng);
    let mut heading = rng.random_range(0.0..std::f64::consts::TAU);
    let mut ok = false;
    for _ in 0..100 {
        if region.contains_horizontal(e0 + length * heading.sin(), n0 + length * heading.cos()) {
            ok = true;
            break;
        }
        (e0, n0) = region.sample(rng);
        heading = rng.random_range(0.0..std::f64::consts::TAU);
    }
    if !ok {
        // Region too small for the requested length: fly through the centre.
        heading = (-e0).atan2(-n0);
        let scale = (region.width_m.min(region.height_m) / length).min(1.0) * 0.9;
        e0 *= scale;
        n0 *= scale;
    }
    let step = speed / MESSAGE_RATE_HZ;
    let positions = (0..count)
        .map(|i| {
            let s = step * i as f64;
            region.at(e0 + s * heading.sin(), n0 + s * heading.cos(), alt)
        })
        .collect();
    let times_s = (0..count).map(|i| start_time_s + i as f64 / MESSAGE_RATE_HZ).collect();
    FlightTrack { flight_id: flight_id.to_string(), positions, times_s }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackerKind {
    /// Transmitter on the ground replaying a victim's claims while driving.
    GroundMobile,
    /// Airborne attacker broadcasting a track that diverges from its own.
    DivergingAircraft,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackerSpec {
    pub kind: AttackerKind,
    pub message_count: usize,
    pub speed_kmh: f64,
    pub ground_alt_range_m: (f64, f64),
    pub divergence_deg_range: (f64, f64),
    pub rng_seed: u64,
}

impl AttackerSpec {
    pub fn new(kind: AttackerKind, rng_seed: u64) -> Self {
        Self { kind, message_count: 200, speed_kmh: 50.0, ground_alt_range_m: (0.0, 500.0), divergence_deg_range: (10.0, 45.0), rng_seed }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        check_range("ground altitude", self.ground_alt_range_m)?;
        check_range("divergence", self.divergence_deg_range)?;
        let bad = |m: &str| Err(SimError::InvalidSpec(m.to_string()));
        if self.message_count == 0 {
            return bad("message_count must be positive");
        }
        if !(self.speed_kmh >= 0.0 && self.speed_kmh.is_finite()) {
            return bad("speed must be a non-negative number");
        }
        let (lo, hi) = self.divergence_deg_range;
        if !(lo > 0.0 && hi <= 90.0) {
            return bad("divergence angles must lie in (0, 90] degrees");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackerTrack {
    pub claims: Vec<GeoPosition>,
    pub truths: Vec<GeoPosition>,
    /// Signed divergence angle, diverging attackers only.
    pub divergence_deg: Option<f64>,
}

/// Rotates the horizontal displacement of `victim` from its first position by
/// `angle_deg` (counter-clockwise seen from above), keeping altitudes.
pub fn diverge_track(victim: &[GeoPosition], angle_deg: f64) -> Vec<GeoPosition> {
    let Some(first) = victim.first() else {
        return Vec::new();
    };
    let frame = LocalFrame::new(first.with_altitude(0.0));
    let (s, c) = angle_deg.to_radians().sin_cos();
    victim
        .iter()
        .map(|p| {
            let e = frame.to_enu(&p.with_altitude(0.0));
            let rotated = crate::geo::EnuPoint::new(e.east_m * c - e.north_m * s, e.east_m * s + e.north_m * c, e.up_m);
            frame.to_geo(&rotated).with_altitude(p.altitude_m)
        })
        .collect()
}

/// Track of an attacker replaying `victim_track` as its claims.
pub fn generate_attacker_track(spec: &AttackerSpec, victim_track: &[GeoPosition], region: &Region) -> Result<AttackerTrack, SimError> {
    spec.validate()?;
    let n = spec.message_count;
    if victim_track.len() < n {
        return Err(SimError::TrackTooShort { got: victim_track.len(), need: n });
    }
    let claims = victim_track[..n].to_vec();
    let mut rng = stream_rng(spec.rng_seed, STREAM_ATTACKER);
    match spec.kind {
        AttackerKind::GroundMobile => {
            let (e0, n0) = region.sample(&mut rng);
            let heading = rng.random_range(0.0..std::f64::consts::TAU);
            let alt = uniform(&mut rng, spec.ground_alt_range_m);
            let step = spec.speed_kmh / 3.6 / MESSAGE_RATE_HZ;
            let truths = (0..n)
                .map(|i| {
                    let s = step * i as f64;
                    region.at(e0 + s * heading.sin(), n0 + s * heading.cos(), alt)
                })
                .collect();
            Ok(AttackerTrack { claims, truths, divergence_deg: None })
        }
        AttackerKind::DivergingAircraft => {
            let magnitude = uniform(&mut rng, spec.divergence_deg_range);
            let angle = if rng.random::<bool>() { magnitude } else { -magnitude };
            Ok(AttackerTrack { truths: diverge_track(&claims, angle), claims, divergence_deg: Some(angle) })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoverageRow {
    pub min_receivers: usize,
    pub area_fraction: f64,
    pub message_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageTable {
    /// One row per receiver count `1..=n`.
    pub rows: Vec<CoverageRow>,
    pub gdop_threshold: f64,
    /// Seen by at least three sensors with GDOP below the threshold.
    pub mlat_area_fraction: f64,
    pub mlat_message_fraction: f64,
    pub samples: usize,
}

impl CoverageTable {
    pub fn area_at_least(&self, k: usize) -> f64 {
        self.rows.iter().find(|r| r.min_receivers == k).map_or(0.0, |r| r.area_fraction)
    }

    /// `(area seen by >= 2) / (MLAT-usable area)`.
    pub fn knn_to_mlat_area_ratio(&self) -> f64 {
        self.area_at_least(2) / self.mlat_area_fraction
    }
}

/// Receiver count at `p` and whether MLAT is usable there.
fn coverage_at(p: &GeoPosition, sensors: &SensorSet, los_range_m: f64, gdop_threshold: f64) -> (usize, bool) {
    let visible: Vec<Sensor> = sensors.iter().filter(|s| distance_3d(p, &s.position) <= los_range_m).cloned().collect();
    let k = visible.len();
    let usable = k >= 3 && SensorSet::new(visible).ok().and_then(|set| gdop(p, &set).ok()).is_some_and(|g| g < gdop_threshold);
    (k, usable)
}

fn tabulate(counts: &[(usize, bool)], weights: &[f64], n: usize, gdop_threshold: f64) -> CoverageTable {
    let total = counts.len() as f64;
    let wsum: f64 = weights.iter().sum();
    let rows = (1..=n)
        .map(|k| {
            let area = counts.iter().filter(|c| c.0 >= k).count() as f64 / total;
            let msg = counts.iter().zip(weights).filter(|(c, _)| c.0 >= k).map(|(_, w)| w).sum::<f64>() / wsum;
            CoverageRow { min_receivers: k, area_fraction: area, message_fraction: msg }
        })
        .collect();
    CoverageTable {
        rows,
        gdop_threshold,
        mlat_area_fraction: counts.iter().filter(|c| c.1).count() as f64 / total,
        mlat_message_fraction: counts.iter().zip(weights).filter(|(c, _)| c.1).map(|(_, w)| w).sum::<f64>() / wsum,
        samples: counts.len(),
    }
}

/// Coverage fractions over the cells of `spec`. Message fractions weight
/// cells by `traffic` (uniform when `None`).
pub fn coverage_stats(sensors: &SensorSet, spec: &GridSpec, gdop_threshold: f64, los_range_m: f64, traffic: Option<&[f64]>) -> CoverageTable {
    let centers = cell_centers(spec);
    let counts: Vec<(usize, bool)> = centers.par_iter().map(|c| coverage_at(c, sensors, los_range_m, gdop_threshold)).collect();
    let uniform_w = vec![1.0; counts.len()];
    let weights = traffic.filter(|t| t.len() == counts.len()).unwrap_or(&uniform_w);
    tabulate(&counts, weights, sensors.len(), gdop_threshold)
}

/// Monte-Carlo estimate of the same fractions, sampling points uniformly by
/// area within the lat/lon box of `spec` at its altitude.
pub fn coverage_monte_carlo(sensors: &SensorSet, spec: &GridSpec, gdop_threshold: f64, los_range_m: f64, samples: usize, seed: u64) -> CoverageTable {
    let (lat0, lat1) = spec.lat_bounds();
    let (lon0, lon1) = spec.lon_bounds();
    let (s0, s1) = (lat0.to_radians().sin(), lat1.to_radians().sin());
    let mut rng = stream_rng(seed, STREAM_EMITTERS);
    let points: Vec<GeoPosition> = (0..samples)
        .map(|_| GeoPosition {
            latitude_deg: uniform(&mut rng, (s0, s1)).asin().to_degrees(),
            longitude_deg: uniform(&mut rng, (lon0, lon1)),
            altitude_m: spec.altitude_m,
        })
        .collect();
    let counts: Vec<(usize, bool)> = points.par_iter().map(|p| coverage_at(p, sensors, los_range_m, gdop_threshold)).collect();
    tabulate(&counts, &vec![1.0; counts.len()], sensors.len(), gdop_threshold)
}
