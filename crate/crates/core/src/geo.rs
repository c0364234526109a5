//! Geodetic positions, local East-North-Up frames and propagation times.
//!
//! Geodetic coordinates are on the WGS-84 ellipsoid. Distance math is done in
//! Earth-centred Earth-fixed (ECEF) coordinates, which is equivalent to doing
//! it in any local tangent frame since the frames differ by a rigid motion.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS-84 semi-major axis in meters.
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS-84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;
/// WGS-84 first eccentricity squared.
pub const WGS84_E2: f64 = WGS84_F * (2.0 - WGS84_F);

/// Vacuum speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Altitude bounds accepted for domain inputs (sensors, aircraft, grid planes).
pub const MIN_ALTITUDE_M: f64 = -500.0;
pub const MAX_ALTITUDE_M: f64 = 30_000.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180)")]
    Longitude(f64),
    #[error("altitude {0} m outside [{MIN_ALTITUDE_M}, {MAX_ALTITUDE_M}]")]
    Altitude(f64),
    #[error("propagation speed must be positive and finite, got {0}")]
    Speed(f64),
}

/// A point on or above the WGS-84 ellipsoid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPosition {
    pub latitude_deg: f64,
    pub longitude_deg: f64,
    pub altitude_m: f64,
}

impl GeoPosition {
    /// Validated constructor. Longitude 180 is folded onto -180.
    pub fn new(latitude_deg: f64, longitude_deg: f64, altitude_m: f64) -> Result<Self, GeoError> {
        let longitude_deg = if longitude_deg == 180.0 { -180.0 } else { longitude_deg };
        let p = Self { latitude_deg, longitude_deg, altitude_m };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !(-90.0..=90.0).contains(&self.latitude_deg) {
            return Err(GeoError::Latitude(self.latitude_deg));
        }
        if !(-180.0..180.0).contains(&self.longitude_deg) {
            return Err(GeoError::Longitude(self.longitude_deg));
        }
        if !(MIN_ALTITUDE_M..=MAX_ALTITUDE_M).contains(&self.altitude_m) {
            return Err(GeoError::Altitude(self.altitude_m));
        }
        Ok(())
    }

    /// Same horizontal position at a different altitude.
    pub fn with_altitude(self, altitude_m: f64) -> Self {
        Self { altitude_m, ..self }
    }

    pub fn to_ecef(&self) -> Vector3<f64> {
        let lat = self.latitude_deg.to_radians();
        let lon = self.longitude_deg.to_radians();
        let (sin_lat, cos_lat) = lat.sin_cos();
        let (sin_lon, cos_lon) = lon.sin_cos();
        let n = prime_vertical_radius(sin_lat);
        let h = self.altitude_m;
        Vector3::new(
            (n + h) * cos_lat * cos_lon,
            (n + h) * cos_lat * sin_lon,
            (n * (1.0 - WGS84_E2) + h) * sin_lat,
        )
    }

    pub fn from_ecef(ecef: &Vector3<f64>) -> Self {
        let (x, y, z) = (ecef.x, ecef.y, ecef.z);
        let lon = y.atan2(x);
        let p = x.hypot(y);
        let mut lat = z.atan2(p * (1.0 - WGS84_E2));
        let mut h = 0.0;
        for _ in 0..16 {
            let (sin_lat, cos_lat) = lat.sin_cos();
            let n = prime_vertical_radius(sin_lat);
            h = if cos_lat.abs() > 1e-3 {
                p / cos_lat - n
            } else {
                z / sin_lat - n * (1.0 - WGS84_E2)
            };
            let next = z.atan2(p * (1.0 - WGS84_E2 * n / (n + h)));
            let done = (next - lat).abs() < 1e-15;
            lat = next;
            if done {
                break;
            }
        }
        let mut longitude_deg = lon.to_degrees();
        if longitude_deg >= 180.0 {
            longitude_deg -= 360.0;
        }
        Self { latitude_deg: lat.to_degrees(), longitude_deg, altitude_m: h }
    }
}

fn prime_vertical_radius(sin_lat: f64) -> f64 {
    WGS84_A / (1.0 - WGS84_E2 * sin_lat * sin_lat).sqrt()
}

fn meridian_radius(sin_lat: f64) -> f64 {
    let w2 = 1.0 - WGS84_E2 * sin_lat * sin_lat;
    WGS84_A * (1.0 - WGS84_E2) / (w2 * w2.sqrt())
}

/// Meters spanned by one degree of latitude at the given latitude and altitude.
pub fn meters_per_degree_lat(latitude_deg: f64, altitude_m: f64) -> f64 {
    let sin_lat = latitude_deg.to_radians().sin();
    (meridian_radius(sin_lat) + altitude_m) * std::f64::consts::PI / 180.0
}

/// Meters spanned by one degree of longitude at the given latitude and altitude.
pub fn meters_per_degree_lon(latitude_deg: f64, altitude_m: f64) -> f64 {
    let (sin_lat, cos_lat) = latitude_deg.to_radians().sin_cos();
    (prime_vertical_radius(sin_lat) + altitude_m) * cos_lat * std::f64::consts::PI / 180.0
}

/// Cartesian offset in a local East-North-Up frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EnuPoint {
    pub east_m: f64,
    pub north_m: f64,
    pub up_m: f64,
}

impl EnuPoint {
    pub fn new(east_m: f64, north_m: f64, up_m: f64) -> Self {
        Self { east_m, north_m, up_m }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.east_m, self.north_m, self.up_m)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    pub fn horizontal_norm(&self) -> f64 {
        self.east_m.hypot(self.north_m)
    }
}

/// A local tangent frame anchored at a geodetic origin.
///
/// Holds the origin's ECEF coordinates and rotation so that repeated
/// conversions in hot loops skip the trigonometry.
#[derive(Debug, Clone)]
pub struct LocalFrame {
    origin: GeoPosition,
    origin_ecef: Vector3<f64>,
    /// Rows are the east, north and up unit vectors in ECEF.
    ecef_to_enu: Matrix3<f64>,
}

impl LocalFrame {
    pub fn new(origin: GeoPosition) -> Self {
        let lat = origin.latitude_deg.to_radians();
        let lon = origin.longitude_deg.to_radians();
        let (sin_lat, cos_lat) = lat.sin_cos();
        let (sin_lon, cos_lon) = lon.sin_cos();
        #[rustfmt::skip]
        let ecef_to_enu = Matrix3::new(
            -sin_lon,            cos_lon,           0.0,
            -sin_lat * cos_lon, -sin_lat * sin_lon, cos_lat,
             cos_lat * cos_lon,  cos_lat * sin_lon, sin_lat,
        );
        Self { origin, origin_ecef: origin.to_ecef(), ecef_to_enu }
    }

    pub fn origin(&self) -> GeoPosition {
        self.origin
    }

    pub fn to_enu(&self, p: &GeoPosition) -> EnuPoint {
        self.ecef_to_enu_point(&p.to_ecef())
    }

    pub fn ecef_to_enu_point(&self, ecef: &Vector3<f64>) -> EnuPoint {
        EnuPoint::from_vector(&(self.ecef_to_enu * (ecef - self.origin_ecef)))
    }

    pub fn enu_to_ecef(&self, p: &EnuPoint) -> Vector3<f64> {
        self.ecef_to_enu.transpose() * p.to_vector() + self.origin_ecef
    }

    pub fn to_geo(&self, p: &EnuPoint) -> GeoPosition {
        GeoPosition::from_ecef(&self.enu_to_ecef(p))
    }

    /// Geodetic position at the given frame-horizontal offset and true altitude.
    pub fn horizontal_to_geo(&self, east_m: f64, north_m: f64, altitude_m: f64) -> GeoPosition {
        self.to_geo(&EnuPoint::new(east_m, north_m, 0.0)).with_altitude(altitude_m)
    }

    /// Planar horizontal distance between two positions, ignoring altitude.
    pub fn horizontal_distance(&self, a: &GeoPosition, b: &GeoPosition) -> f64 {
        let ea = self.to_enu(&a.with_altitude(0.0));
        let eb = self.to_enu(&b.with_altitude(0.0));
        (ea.east_m - eb.east_m).hypot(ea.north_m - eb.north_m)
    }
}

/// `p` expressed in the East-North-Up frame tangent at `origin`.
pub fn to_enu(p: &GeoPosition, origin: &GeoPosition) -> EnuPoint {
    LocalFrame::new(*origin).to_enu(p)
}

/// Inverse of [`to_enu`].
pub fn from_enu(p: &EnuPoint, origin: &GeoPosition) -> GeoPosition {
    LocalFrame::new(*origin).to_geo(p)
}

/// Straight-line distance in meters.
pub fn distance_3d(a: &GeoPosition, b: &GeoPosition) -> f64 {
    (a.to_ecef() - b.to_ecef()).norm()
}

/// Horizontal distance in the tangent plane at `a`, with both points projected
/// to the ellipsoid surface first so altitude differences do not leak in.
pub fn horizontal_distance(a: &GeoPosition, b: &GeoPosition) -> f64 {
    LocalFrame::new(a.with_altitude(0.0)).horizontal_distance(a, b)
}

/// Signal propagation model. Only the propagation speed matters for
/// line-of-sight reception.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PropagationModel {
    pub speed_mps: f64,
}

impl Default for PropagationModel {
    fn default() -> Self {
        Self { speed_mps: SPEED_OF_LIGHT }
    }
}

impl PropagationModel {
    pub fn new(speed_mps: f64) -> Result<Self, GeoError> {
        if !(speed_mps.is_finite() && speed_mps > 0.0) {
            return Err(GeoError::Speed(speed_mps));
        }
        Ok(Self { speed_mps })
    }

    pub fn time_for_distance(&self, meters: f64) -> f64 {
        meters / self.speed_mps
    }
}

/// Travel time of a signal between two positions in seconds.
pub fn propagation_time(a: &GeoPosition, b: &GeoPosition, model: &PropagationModel) -> f64 {
    model.time_for_distance(distance_3d(a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pos(lat: f64, lon: f64, alt: f64) -> GeoPosition {
        GeoPosition::new(lat, lon, alt).unwrap()
    }

    #[test]
    fn validation_rejects_out_of_range() {
        assert!(matches!(GeoPosition::new(91.0, 0.0, 0.0), Err(GeoError::Latitude(_))));
        assert!(matches!(GeoPosition::new(0.0, 190.0, 0.0), Err(GeoError::Longitude(_))));
        assert!(matches!(GeoPosition::new(0.0, 0.0, 40_000.0), Err(GeoError::Altitude(_))));
        assert!(matches!(GeoPosition::new(0.0, 0.0, f64::NAN), Err(GeoError::Altitude(_))));
        assert_eq!(GeoPosition::new(0.0, 180.0, 0.0).unwrap().longitude_deg, -180.0);
        assert!(PropagationModel::new(0.0).is_err());
    }

    #[test]
    fn origin_maps_to_zero() {
        let o = pos(47.0, 8.0, 400.0);
        let e = to_enu(&o, &o);
        assert!(e.to_vector().norm() < 1e-9);
    }

    #[test]
    fn one_degree_north_at_equator() {
        let o = pos(0.0, 0.0, 0.0);
        let e = to_enu(&pos(1.0, 0.0, 0.0), &o);
        // Meridian arc from 0 to 1 degree, integrated numerically from the
        // meridian radius of curvature.
        let steps = 10_000;
        let mut arc = 0.0;
        for i in 0..steps {
            let lat = (i as f64 + 0.5) / steps as f64 * 1f64.to_radians();
            let w2 = 1.0 - WGS84_E2 * lat.sin().powi(2);
            arc += WGS84_A * (1.0 - WGS84_E2) / w2.powf(1.5) * (1f64.to_radians() / steps as f64);
        }
        assert!((arc - 110_574.0).abs() < 50.0, "arc {arc}");
        assert!((e.north_m - 110_574.0).abs() < 50.0, "north {}", e.north_m);
    }

    #[test]
    fn vertical_leg_distance() {
        let a = pos(47.0, 8.0, 1000.0);
        let b = pos(47.0, 8.0, 2000.0);
        assert!((distance_3d(&a, &b) - 1000.0).abs() < 1e-6);
        assert_eq!(distance_3d(&a, &a), 0.0);
    }

    #[test]
    fn one_degree_longitude_at_47() {
        let a = pos(47.0, 8.0, 0.0);
        let b = pos(47.0, 9.0, 0.0);
        // Parallel-circle arc: radius N(lat) cos(lat) times the angle.
        let lat = 47f64.to_radians();
        let n = WGS84_A / (1.0 - WGS84_E2 * lat.sin().powi(2)).sqrt();
        let arc = n * lat.cos() * 1f64.to_radians();
        let d = distance_3d(&a, &b);
        assert!((d - 76_060.0).abs() < 100.0, "d = {d}");
        assert!((d - arc).abs() < 5.0, "chord {d} arc {arc}");
    }

    #[test]
    fn propagation_time_examples() {
        let m = PropagationModel::default();
        let a = pos(47.0, 8.0, 0.0);
        assert_eq!(propagation_time(&a, &a, &m), 0.0);
        assert_eq!(m.time_for_distance(299_792_458.0), 1.0);
        assert!((m.time_for_distance(300_000.0) - 1.000_69e-3).abs() < 1e-8);
        let frame = LocalFrame::new(a);
        let b = frame.to_geo(&EnuPoint::new(300_000.0, 0.0, 0.0));
        assert!((propagation_time(&a, &b, &m) - 300_000.0 / SPEED_OF_LIGHT).abs() < 1e-14);
    }

    #[test]
    fn horizontal_distance_ignores_altitude() {
        let a = pos(47.0, 8.0, 0.0);
        let b = LocalFrame::new(a).to_geo(&EnuPoint::new(3000.0, 4000.0, 0.0));
        let d0 = horizontal_distance(&a, &b);
        let d1 = horizontal_distance(&a, &b.with_altitude(11_000.0));
        assert!((d0 - 5000.0).abs() < 0.01);
        assert!((d0 - d1).abs() < 1e-6);
    }

    fn arb_position() -> impl Strategy<Value = GeoPosition> {
        (-80.0..80.0f64, -180.0..180.0f64, MIN_ALTITUDE_M..MAX_ALTITUDE_M)
            .prop_map(|(lat, lon, alt)| GeoPosition { latitude_deg: lat, longitude_deg: lon, altitude_m: alt })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(10_000))]

        #[test]
        fn enu_round_trip(origin in arb_position(),
                          r in 0.0..400_000.0f64,
                          bearing in 0.0..std::f64::consts::TAU,
                          alt in MIN_ALTITUDE_M..MAX_ALTITUDE_M) {
            let frame = LocalFrame::new(origin);
            let p = frame.horizontal_to_geo(r * bearing.sin(), r * bearing.cos(), alt);
            let back = frame.to_geo(&frame.to_enu(&p));
            prop_assert!((back.latitude_deg - p.latitude_deg).abs() < 1e-6);
            let mut dlon = (back.longitude_deg - p.longitude_deg).abs();
            if dlon > 180.0 { dlon = 360.0 - dlon; }
            prop_assert!(dlon < 1e-6);
            prop_assert!((back.altitude_m - p.altitude_m).abs() < 1e-3);
        }
    }

    proptest! {
        #[test]
        fn triangle_inequality(a in arb_position(), b in arb_position(), c in arb_position()) {
            let ab = distance_3d(&a, &b);
            let bc = distance_3d(&b, &c);
            let ac = distance_3d(&a, &c);
            prop_assert!(ac <= ab + bc + 1e-6);
            prop_assert!((ab - distance_3d(&b, &a)).abs() < 1e-6);
        }

        #[test]
        fn propagation_time_is_linear(d in 1.0..1e6f64) {
            let m = PropagationModel::default();
            prop_assert_eq!(m.time_for_distance(2.0 * d), 2.0 * m.time_for_distance(d));
        }
    }
}
