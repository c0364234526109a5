//! Closed-form multilateration baseline and horizontal dilution of precision.
//!
//! The solver works in an East-North-Up frame anchored at the reference
//! (earliest) sensor. With `d_i` the range difference of sensor `i` and `R`
//! the range to the reference, each non-reference sensor contributes the
//! linear equation
//!
//! ```text
//! 2 s_i·x + 2 d_i R = |s_i|² - d_i²
//! ```
//!
//! Solving in least squares for `x = p + q R` and substituting into
//! `|x|² = R²` leaves a quadratic in `R`. With three sensors the vertical
//! coordinate is pinned to the altitude hint and only the horizontal part is
//! solved.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{EnuPoint, GeoPosition, LocalFrame, PropagationModel};
use crate::grid::{cell_centers, GridSpec};
use crate::knn::{LocationEstimate, Method};
use crate::tdoa::{SensorSet, TdoaError, TdoaFingerprint};

/// Accepted altitude band when choosing between the two algebraic roots.
pub const PLAUSIBLE_ALTITUDE_M: (f64, f64) = (0.0, 20_000.0);

/// Relative singular-value floor below which the geometry counts as degenerate.
const RANK_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MlatError {
    #[error("multilateration needs at least {need} sensors, got {got}")]
    TooFewSensors { got: usize, need: usize },
    #[error("sensor geometry is singular")]
    SingularGeometry,
    #[error("no real solution for the range equation")]
    NoRealRoot,
    #[error(transparent)]
    Tdoa(#[from] TdoaError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlatSolution {
    pub position: GeoPosition,
    /// RMS difference between measured and re-predicted TDoAs.
    pub residual_s: f64,
    /// Horizontal GDOP at the solution, `f64::INFINITY` if singular there.
    pub gdop: f64,
}

impl MlatSolution {
    pub fn to_estimate(&self, fp: &TdoaFingerprint) -> LocationEstimate {
        LocationEstimate {
            position: self.position,
            method: Method::Mlat,
            subset_key: fp.subset_key.clone(),
            neighbor_spread_m: 0.0,
            gdop: Some(self.gdop),
            fingerprint_distance_s: None,
        }
    }
}

/// Solves for the emitter of `fp`. Uses the full 3-D solution with four or
/// more sensors and the altitude-constrained one with exactly three.
pub fn mlat_solve(fp: &TdoaFingerprint, sensors: &SensorSet, altitude_hint_m: f64) -> Result<MlatSolution, MlatError> {
    mlat_solve_with(fp, sensors, altitude_hint_m, &PropagationModel::default())
}

pub fn mlat_solve_with(
    fp: &TdoaFingerprint,
    sensors: &SensorSet,
    altitude_hint_m: f64,
    model: &PropagationModel,
) -> Result<MlatSolution, MlatError> {
    let subset = sensors.subset(&fp.subset_key)?;
    let n = subset.len();
    if n < 3 {
        return Err(MlatError::TooFewSensors { got: n, need: 3 });
    }
    let r = fp.reference_index();
    let frame = LocalFrame::new(subset.sensors()[r].position);
    let pos: Vec<Vector3<f64>> = subset.iter().map(|s| frame.to_enu(&s.position).to_vector()).collect();
    let d: Vec<f64> = fp.tdoas_s.iter().map(|&t| t * model.speed_mps).collect();
    let others: Vec<usize> = (0..n).filter(|&i| i != r).collect();

    let position = if n >= 4 {
        solve_3d(&frame, &pos, &d, &others, altitude_hint_m)?
    } else {
        solve_constrained(&frame, &pos, &d, &others, altitude_hint_m)?
    };

    let e = position.to_ecef();
    let ecef = subset.ecef_positions();
    let ranges: Vec<f64> = ecef.iter().map(|s| (e - s).norm()).collect();
    let sq: f64 = (0..n)
        .map(|i| {
            let pred = (ranges[i] - ranges[r]) / model.speed_mps;
            (pred - fp.tdoas_s[i]).powi(2)
        })
        .sum();
    let residual_s = (sq / n as f64).sqrt();
    let gdop = gdop(&position, &subset).unwrap_or(f64::INFINITY);
    Ok(MlatSolution { position, residual_s, gdop })
}

/// Least-squares `x = p + q R` for the stacked linear system.
fn affine_in_range(a: DMatrix<f64>, rhs: DVector<f64>, dcol: DVector<f64>) -> Result<(DVector<f64>, DVector<f64>), MlatError> {
    let unknowns = a.ncols();
    let svd = a.svd(true, true);
    let s = &svd.singular_values;
    let smax = s.max();
    if s.len() < unknowns || !(smax > 0.0) || s.min() <= smax * RANK_TOLERANCE {
        return Err(MlatError::SingularGeometry);
    }
    let eps = smax * RANK_TOLERANCE;
    let p = svd.solve(&rhs, eps).map_err(|_| MlatError::SingularGeometry)?;
    let q = -svd.solve(&dcol, eps).map_err(|_| MlatError::SingularGeometry)?;
    Ok((p, q))
}

/// Non-negative roots of `a R² + b R + c = 0`.
fn range_roots(a: f64, b: f64, c: f64) -> Result<Vec<f64>, MlatError> {
    // `a = |q|² - 1` is dimensionless; near zero the equation is linear.
    let roots = if a.abs() < 1e-12 {
        if b == 0.0 {
            return Err(MlatError::NoRealRoot);
        }
        vec![-c / b]
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return Err(MlatError::NoRealRoot);
        }
        // Numerically stable pair.
        let sq = disc.sqrt();
        let t = -0.5 * (b + b.signum() * sq);
        if t == 0.0 {
            vec![0.0]
        } else {
            vec![t / a, c / t]
        }
    };
    let out: Vec<f64> = roots.into_iter().filter(|r| r.is_finite() && *r >= 0.0).collect();
    if out.is_empty() {
        Err(MlatError::NoRealRoot)
    } else {
        Ok(out)
    }
}

/// Picks the candidate in the plausible band closest to the hint, falling
/// back to the closest overall.
fn pick(candidates: Vec<GeoPosition>, hint: f64) -> GeoPosition {
    let dist = |p: &GeoPosition| (p.altitude_m - hint).abs();
    let plausible = |p: &GeoPosition| p.altitude_m >= PLAUSIBLE_ALTITUDE_M.0 && p.altitude_m <= PLAUSIBLE_ALTITUDE_M.1;
    let best = |it: &mut dyn Iterator<Item = &GeoPosition>| it.min_by(|a, b| dist(a).total_cmp(&dist(b))).copied();
    best(&mut candidates.iter().filter(|p| plausible(p)))
        .or_else(|| best(&mut candidates.iter()))
        .expect("at least one candidate root")
}

fn solve_3d(
    frame: &LocalFrame,
    pos: &[Vector3<f64>],
    d: &[f64],
    others: &[usize],
    hint: f64,
) -> Result<GeoPosition, MlatError> {
    let m = others.len();
    let mut a = DMatrix::zeros(m, 3);
    let mut rhs = DVector::zeros(m);
    let mut dcol = DVector::zeros(m);
    for (row, &i) in others.iter().enumerate() {
        let s = pos[i];
        for k in 0..3 {
            a[(row, k)] = 2.0 * s[k];
        }
        rhs[row] = s.norm_squared() - d[i] * d[i];
        dcol[row] = 2.0 * d[i];
    }
    let (p, q) = affine_in_range(a, rhs, dcol)?;
    let roots = range_roots(q.norm_squared() - 1.0, 2.0 * p.dot(&q), p.norm_squared())?;
    let candidates = roots
        .into_iter()
        .map(|r| {
            let x = &p + &q * r;
            frame.to_geo(&EnuPoint::new(x[0], x[1], x[2]))
        })
        .collect();
    Ok(pick(candidates, hint))
}

fn solve_constrained(
    frame: &LocalFrame,
    pos: &[Vector3<f64>],
    d: &[f64],
    others: &[usize],
    hint: f64,
) -> Result<GeoPosition, MlatError> {
    let m = others.len();
    let mut a = DMatrix::zeros(m, 2);
    let mut dcol = DVector::zeros(m);
    for (row, &i) in others.iter().enumerate() {
        a[(row, 0)] = 2.0 * pos[i].x;
        a[(row, 1)] = 2.0 * pos[i].y;
        dcol[row] = 2.0 * d[i];
    }
    // Frame-up and geodetic altitude differ by the earth's curvature, so the
    // vertical coordinate is corrected a few times.
    let mut up = hint - frame.origin().altitude_m;
    let mut chosen = None;
    for _ in 0..4 {
        let mut rhs = DVector::zeros(m);
        for (row, &i) in others.iter().enumerate() {
            let s = pos[i];
            rhs[row] = s.norm_squared() - d[i] * d[i] - 2.0 * s.z * up;
        }
        let (p, q) = affine_in_range(a.clone(), rhs, dcol.clone())?;
        let roots = range_roots(q.norm_squared() - 1.0, 2.0 * p.dot(&q), p.norm_squared() + up * up)?;
        let candidates = roots
            .into_iter()
            .map(|r| {
                let x = &p + &q * r;
                frame.to_geo(&EnuPoint::new(x[0], x[1], up))
            })
            .collect();
        let best = pick(candidates, hint);
        up += hint - best.altitude_m;
        chosen = Some(best);
    }
    Ok(chosen.expect("at least one iteration"))
}

/// Rows `u_i - u_ref` of the range-difference Jacobian at `position`, in the
/// local ENU frame. `u_i` is the unit vector from the target towards sensor
/// `i`; the reference is the nearest sensor.
fn jacobian_rows(position: &GeoPosition, sensors: &SensorSet) -> Result<Vec<Vector3<f64>>, MlatError> {
    if sensors.len() < 3 {
        return Err(MlatError::TooFewSensors { got: sensors.len(), need: 3 });
    }
    let frame = LocalFrame::new(*position);
    let mut rel: Vec<Vector3<f64>> = sensors.iter().map(|s| frame.to_enu(&s.position).to_vector()).collect();
    // Accumulate in a geometric order so sensor labels cannot affect rounding.
    rel.sort_by(|a, b| {
        a.norm_squared()
            .total_cmp(&b.norm_squared())
            .then(a.x.total_cmp(&b.x))
            .then(a.y.total_cmp(&b.y))
            .then(a.z.total_cmp(&b.z))
    });
    let mut units = Vec::with_capacity(rel.len());
    for v in &rel {
        let norm = v.norm();
        if norm < 1e-6 {
            return Err(MlatError::SingularGeometry);
        }
        units.push(v / norm);
    }
    Ok(units[1..].iter().map(|u| u - units[0]).collect())
}

/// Horizontal GDOP `sqrt(trace((HᵀH)⁻¹))` at `position`, with `H` the
/// horizontal columns of the range-difference Jacobian (reference: nearest
/// sensor).
pub fn gdop(position: &GeoPosition, sensors: &SensorSet) -> Result<f64, MlatError> {
    let mut hth = Matrix2::zeros();
    for d in jacobian_rows(position, sensors)? {
        let h = Vector2::new(d.x, d.y);
        hth += h * h.transpose();
    }
    let scale = hth.trace();
    if !(scale > 0.0) || hth.determinant() <= 1e-12 * scale * scale {
        return Err(MlatError::SingularGeometry);
    }
    let inv = hth.try_inverse().ok_or(MlatError::SingularGeometry)?;
    Ok(inv.trace().sqrt())
}

/// Three-dimensional position dilution of the same system, including the
/// vertical column. Needs four sensors.
pub fn gdop_3d(position: &GeoPosition, sensors: &SensorSet) -> Result<f64, MlatError> {
    if sensors.len() < 4 {
        return Err(MlatError::TooFewSensors { got: sensors.len(), need: 4 });
    }
    let mut hth = Matrix3::zeros();
    for d in jacobian_rows(position, sensors)? {
        hth += d * d.transpose();
    }
    let scale = hth.trace();
    if !(scale > 0.0) || hth.determinant() <= 1e-15 * scale * scale * scale {
        return Err(MlatError::SingularGeometry);
    }
    let inv = hth.try_inverse().ok_or(MlatError::SingularGeometry)?;
    Ok(inv.trace().sqrt())
}

/// GDOP at every cell centre of `spec`, row-major. Singular cells carry
/// `f64::INFINITY`.
pub fn gdop_map(spec: &GridSpec, sensors: &SensorSet) -> Vec<(GeoPosition, f64)> {
    cell_centers(spec)
        .into_par_iter()
        .map(|c| {
            let g = gdop(&c, sensors).unwrap_or(f64::INFINITY);
            (c, g)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::horizontal_distance;
    use crate::tdoa::{expected_fingerprint, Sensor, SensorId};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn origin() -> GeoPosition {
        GeoPosition::new(47.0, 8.0, 0.0).unwrap()
    }

    fn deploy(pts: &[(f64, f64, f64)]) -> SensorSet {
        let f = LocalFrame::new(origin());
        SensorSet::new(
            pts.iter()
                .enumerate()
                .map(|(i, &(e, n, a))| {
                    Sensor::new(SensorId::new(format!("R{i}")).unwrap(), f.horizontal_to_geo(e, n, a))
                })
                .collect(),
        )
        .unwrap()
    }

    fn random_scenario(rng: &mut ChaCha8Rng, n: usize) -> (SensorSet, GeoPosition) {
        let pts: Vec<_> = (0..n)
            .map(|_| (rng.random_range(-50e3..50e3), rng.random_range(-50e3..50e3), rng.random_range(0.0..1000.0)))
            .collect();
        let f = LocalFrame::new(origin());
        let target = f.horizontal_to_geo(rng.random_range(-50e3..50e3), rng.random_range(-50e3..50e3), rng.random_range(10_000.0..11_000.0));
        (deploy(&pts), target)
    }

    #[test]
    fn noiseless_five_sensor_exactness() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = PropagationModel::default();
        let mut tested = 0;
        while tested < 300 {
            let (set, target) = random_scenario(&mut rng, 5);
            if gdop(&target, &set).map_or(true, |g| g >= 10.0) {
                continue;
            }
            let fp = expected_fingerprint(&target, &set, &m);
            let sol = mlat_solve(&fp, &set, 10_500.0).unwrap();
            let err = horizontal_distance(&sol.position, &target);
            assert!(err <= 1.0, "error {err} m");
            assert!((sol.position.altitude_m - target.altitude_m).abs() < 5.0);
            assert!(sol.residual_s >= 0.0 && sol.residual_s < 1e-12);
            tested += 1;
        }
    }

    #[test]
    fn three_sensor_constrained_solution() {
        let set = deploy(&[(-30e3, -20e3, 100.0), (35e3, -25e3, 300.0), (0.0, 40e3, 600.0)]);
        let f = LocalFrame::new(origin());
        let target = f.horizontal_to_geo(5e3, 3e3, 10_500.0);
        let fp = expected_fingerprint(&target, &set, &PropagationModel::default());
        let sol = mlat_solve(&fp, &set, 10_500.0).unwrap();
        assert!(horizontal_distance(&sol.position, &target) < 1.0);
        assert!((sol.position.altitude_m - 10_500.0).abs() < 1e-3);
    }

    #[test]
    fn symmetric_square_centroid() {
        let a = 30e3;
        let set = deploy(&[(-a, -a, 0.0), (a, -a, 0.0), (a, a, 0.0), (-a, a, 0.0)]);
        let f = LocalFrame::new(origin());
        let target = f.horizontal_to_geo(0.0, 0.0, 0.0);
        let fp = expected_fingerprint(&target, &set, &PropagationModel::default());
        assert!(fp.tdoas_s.iter().all(|t| t.abs() < 1e-12));
        // The co-altitude target lies in the sensor plane; use the constrained
        // solver with three of the sensors.
        let three = set.subset(&crate::tdoa::SubsetKey::parse("R0+R1+R2").unwrap()).unwrap();
        let fp3 = expected_fingerprint(&target, &three, &PropagationModel::default());
        let sol = mlat_solve(&fp3, &three, 0.0).unwrap();
        assert!(horizontal_distance(&sol.position, &target) < 1.0);
    }

    #[test]
    fn collinear_sensors_are_singular() {
        let set = deploy(&[(-30e3, 0.0, 0.0), (0.0, 0.0, 0.0), (30e3, 0.0, 0.0)]);
        let f = LocalFrame::new(origin());
        let target = f.horizontal_to_geo(5e3, 20e3, 10_000.0);
        let fp = expected_fingerprint(&target, &set, &PropagationModel::default());
        assert_eq!(mlat_solve(&fp, &set, 10_000.0).unwrap_err(), MlatError::SingularGeometry);
        // Only positions on the sensor line itself are unobservable.
        assert_eq!(gdop(&f.horizontal_to_geo(5e3, 0.0, 0.0), &set).unwrap_err(), MlatError::SingularGeometry);
        assert!(gdop(&f.horizontal_to_geo(5e3, 20e3, 0.0), &set).is_ok());
        let four = deploy(&[(-30e3, 0.0, 0.0), (-10e3, 0.0, 0.0), (10e3, 0.0, 0.0), (30e3, 0.0, 0.0)]);
        let fp = expected_fingerprint(&target, &four, &PropagationModel::default());
        assert_eq!(mlat_solve(&fp, &four, 10_000.0).unwrap_err(), MlatError::SingularGeometry);
    }

    #[test]
    fn two_sensors_rejected() {
        let set = deploy(&[(-30e3, 0.0, 0.0), (30e3, 0.0, 0.0)]);
        let fp = expected_fingerprint(&origin().with_altitude(10_000.0), &set, &PropagationModel::default());
        assert!(matches!(mlat_solve(&fp, &set, 10_000.0), Err(MlatError::TooFewSensors { .. })));
    }

    #[test]
    fn gdop_grows_outside_hull() {
        let a = 40e3;
        let set = deploy(&[(-a, -a, 0.0), (a, -a, 0.0), (a, a, 0.0), (-a, a, 0.0)]);
        let f = LocalFrame::new(origin());
        let at = |e: f64| gdop(&f.horizontal_to_geo(e, 0.0, 10_000.0), &set).unwrap();
        let centre = at(0.0);
        assert!(centre > 0.0);
        let mut last = at(60e3);
        assert!(last > centre);
        for e in [100e3, 200e3, 400e3] {
            let g = at(e);
            assert!(g > last, "{g} <= {last}");
            last = g;
        }
    }

    #[test]
    fn gdop_rotation_and_translation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let pts: Vec<(f64, f64, f64)> = (0..5).map(|_| (rng.random_range(-40e3..40e3), rng.random_range(-40e3..40e3), 0.0)).collect();
            let (te, tn) = (rng.random_range(-20e3..20e3), rng.random_range(-20e3..20e3));
            let f = LocalFrame::new(origin());
            let base = gdop(&f.horizontal_to_geo(te, tn, 10_000.0), &deploy(&pts)).unwrap();

            let (dx, dy) = (rng.random_range(-10e3..10e3), rng.random_range(-10e3..10e3));
            let shifted: Vec<_> = pts.iter().map(|&(e, n, a)| (e + dx, n + dy, a)).collect();
            let g = gdop(&f.horizontal_to_geo(te + dx, tn + dy, 10_000.0), &deploy(&shifted)).unwrap();
            assert!((g / base - 1.0).abs() < 1e-3, "translation {g} vs {base}");

            let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let (s, c) = th.sin_cos();
            let rot = |e: f64, n: f64| (e * c - n * s, e * s + n * c);
            let rotated: Vec<_> = pts.iter().map(|&(e, n, a)| {
                let (e2, n2) = rot(e, n);
                (e2, n2, a)
            }).collect();
            let (re, rn) = rot(te, tn);
            let g = gdop(&f.horizontal_to_geo(re, rn, 10_000.0), &deploy(&rotated)).unwrap();
            assert!((g / base - 1.0).abs() < 1e-3, "rotation {g} vs {base}");
        }
    }

    fn map_spec() -> GridSpec {
        GridSpec { center: origin(), extent_lat_deg: 1.2, extent_lon_deg: 1.6, altitude_m: 10_000.0, square_side_m: 5000.0 }
    }

    #[test]
    fn gdop_map_properties() {
        let set = deploy(&[(-20e3, -15e3, 0.0), (25e3, -10e3, 0.0), (5e3, 20e3, 0.0), (-10e3, 10e3, 0.0)]);
        let spec = map_spec();
        let map = gdop_map(&spec, &set);
        assert_eq!(map.len(), spec.cell_count());
        let (argmin, _) = map.iter().min_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        let f = LocalFrame::new(origin());
        let p = f.to_enu(argmin);
        assert!((-20e3..=25e3).contains(&p.east_m) && (-15e3..=20e3).contains(&p.north_m), "{p:?}");

        // Relabeling the sensors does not change the map.
        let relabeled = SensorSet::new(
            set.iter().enumerate().map(|(i, s)| Sensor::new(SensorId::new(format!("Z{}", 9 - i)).unwrap(), s.position)).collect(),
        )
        .unwrap();
        assert_eq!(gdop_map(&spec, &relabeled), map);

        let single = GridSpec { square_side_m: 500_000.0, ..spec };
        let one = gdop_map(&single, &set);
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].1, gdop(&single.center.with_altitude(single.altitude_m), &set).unwrap());
    }
}
