//! Offline phase: expected-fingerprint lookup tables over a 2-D grid.
//!
//! The grid is a single altitude plane laid out in latitude/longitude steps
//! that approximate squares of `square_side_m` at the grid centre. One table
//! is materialized per sensor subset of size at least 2; each table re-bases
//! on the subset's own earliest receiver, so smaller tables are not
//! projections of the full-set table.

mod format;

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{self, GeoError, GeoPosition, LocalFrame, PropagationModel};
use crate::tdoa::{self, SensorSet, SubsetKey, TdoaError, TdoaFingerprint};

pub use format::{decode_grid, encode_grid, load_grid, save_grid, FORMAT_VERSION, MAGIC};

/// Default cap on stored fingerprint scalars across all tables.
pub const DEFAULT_MAX_SCALARS: usize = 200_000_000;

/// Cells per side of the pruning blocks used by the coarse-to-fine search.
pub(crate) const BLOCK_SIDE: usize = 16;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid needs {needed} stored scalars, over the budget of {budget}; coarsen the grid")]
    BudgetExceeded { needed: u128, budget: usize },
    #[error("invalid grid spec: {0}")]
    InvalidSpec(String),
    #[error("unsupported grid file: {0}")]
    FormatVersionMismatch(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Tdoa(#[from] TdoaError),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// Geometry of the training grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub center: GeoPosition,
    pub extent_lat_deg: f64,
    pub extent_lon_deg: f64,
    /// Altitude of the single grid plane.
    pub altitude_m: f64,
    pub square_side_m: f64,
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), GridError> {
        self.center.validate()?;
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.square_side_m) {
            return Err(GridError::InvalidSpec(format!("square side {} m", self.square_side_m)));
        }
        if !positive(self.extent_lat_deg) || !positive(self.extent_lon_deg) {
            return Err(GridError::InvalidSpec(format!(
                "extents {} x {} deg",
                self.extent_lat_deg, self.extent_lon_deg
            )));
        }
        let (lat0, lat1) = self.lat_bounds();
        let (lon0, lon1) = self.lon_bounds();
        if lat0 < -89.0 || lat1 > 89.0 || lon0 < -180.0 || lon1 > 180.0 {
            return Err(GridError::InvalidSpec("grid must not reach the poles or the antimeridian".into()));
        }
        GeoPosition::new(self.center.latitude_deg, self.center.longitude_deg, self.altitude_m)?;
        let (rows, cols) = self.dims();
        if (rows as u128) * (cols as u128) > u32::MAX as u128 {
            return Err(GridError::InvalidSpec(format!("{rows} x {cols} cells")));
        }
        Ok(())
    }

    /// Grid dimensions `(rows N, cols M)`; rows run along latitude.
    pub fn dims(&self) -> (usize, usize) {
        let (dlat, dlon) = self.steps_deg();
        let count = |extent: f64, step: f64| ((extent / step).round() as usize).max(1);
        (count(self.extent_lat_deg, dlat), count(self.extent_lon_deg, dlon))
    }

    pub fn cell_count(&self) -> usize {
        let (r, c) = self.dims();
        r * c
    }

    pub fn lat_bounds(&self) -> (f64, f64) {
        let h = self.extent_lat_deg / 2.0;
        (self.center.latitude_deg - h, self.center.latitude_deg + h)
    }

    pub fn lon_bounds(&self) -> (f64, f64) {
        let h = self.extent_lon_deg / 2.0;
        (self.center.longitude_deg - h, self.center.longitude_deg + h)
    }

    /// Step sizes in degrees `(lat, lon)`: one square side at the centre
    /// latitude and grid altitude.
    pub fn steps_deg(&self) -> (f64, f64) {
        let lat = self.center.latitude_deg;
        (
            self.square_side_m / geo::meters_per_degree_lat(lat, self.altitude_m),
            self.square_side_m / geo::meters_per_degree_lon(lat, self.altitude_m),
        )
    }

    /// Centre of cell `(row, col)` at the grid altitude. The rows and columns
    /// are centred on `center`, so the outermost centres stay inside the
    /// extent.
    pub fn cell_center(&self, row: usize, col: usize) -> GeoPosition {
        let (rows, cols) = self.dims();
        let (dlat, dlon) = self.steps_deg();
        GeoPosition {
            latitude_deg: self.center.latitude_deg + (row as f64 - (rows as f64 - 1.0) / 2.0) * dlat,
            longitude_deg: self.center.longitude_deg + (col as f64 - (cols as f64 - 1.0) / 2.0) * dlon,
            altitude_m: self.altitude_m,
        }
    }

    /// Largest half-diagonal of any cell in meters.
    pub fn max_half_diagonal_m(&self) -> f64 {
        let (dlat, dlon) = self.steps_deg();
        let (lat0, lat1) = self.lat_bounds();
        // The east-west extent of a cell grows towards the equator.
        let widest = if lat0.abs() < lat1.abs() { lat0 } else { lat1 };
        let widest = if lat0 <= 0.0 && lat1 >= 0.0 { 0.0 } else { widest };
        let ns = dlat
            * geo::meters_per_degree_lat(lat0, self.altitude_m)
                .max(geo::meters_per_degree_lat(lat1, self.altitude_m));
        let ew = dlon * geo::meters_per_degree_lon(widest, self.altitude_m);
        ns.hypot(ew) / 2.0
    }

    /// Whether a position falls inside the grid's lat/lon bounding box.
    pub fn contains(&self, p: &GeoPosition) -> bool {
        let (lat0, lat1) = self.lat_bounds();
        let (lon0, lon1) = self.lon_bounds();
        (lat0..=lat1).contains(&p.latitude_deg) && (lon0..=lon1).contains(&p.longitude_deg)
    }
}

/// Row-major centres of every grid cell.
pub fn cell_centers(spec: &GridSpec) -> Vec<GeoPosition> {
    let (rows, cols) = spec.dims();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            out.push(spec.cell_center(r, c));
        }
    }
    out
}

/// Expected fingerprints of one sensor subset for every grid cell.
#[derive(Debug, Clone)]
pub struct SubsetTable {
    key: SubsetKey,
    sensor_indices: Vec<usize>,
    /// `cells * dim` values, row-major by cell.
    values: Vec<f64>,
    blocks: BlockBounds,
}

impl SubsetTable {
    pub fn key(&self) -> &SubsetKey {
        &self.key
    }

    pub fn sensor_indices(&self) -> &[usize] {
        &self.sensor_indices
    }

    pub fn dim(&self) -> usize {
        self.sensor_indices.len()
    }

    pub fn cell_count(&self) -> usize {
        self.values.len() / self.dim()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn cell_fingerprint_slice(&self, cell: usize) -> &[f64] {
        let d = self.dim();
        &self.values[cell * d..(cell + 1) * d]
    }

    pub fn cell_fingerprint(&self, cell: usize) -> TdoaFingerprint {
        let tdoas_s = self.cell_fingerprint_slice(cell).to_vec();
        // The reference is the first zero entry; stored minima are exactly 0.
        let r = tdoas_s.iter().position(|&t| t == 0.0).unwrap_or(0);
        TdoaFingerprint {
            subset_key: self.key.clone(),
            reference_sensor: self.key.ids()[r].clone(),
            tdoas_s,
        }
    }

    pub(crate) fn blocks(&self) -> &BlockBounds {
        &self.blocks
    }
}

/// Per-block bounding boxes in fingerprint space. A block is a square of
/// [`BLOCK_SIDE`] x [`BLOCK_SIDE`] cells (clipped at the grid edges).
#[derive(Debug, Clone)]
pub(crate) struct BlockBounds {
    pub block_rows: usize,
    pub block_cols: usize,
    /// `blocks * dim` lower and upper bounds.
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BlockBounds {
    fn compute(values: &[f64], dim: usize, rows: usize, cols: usize) -> Self {
        let block_rows = rows.div_ceil(BLOCK_SIDE);
        let block_cols = cols.div_ceil(BLOCK_SIDE);
        let n_blocks = block_rows * block_cols;
        let mut lo = vec![f64::INFINITY; n_blocks * dim];
        let mut hi = vec![f64::NEG_INFINITY; n_blocks * dim];
        for r in 0..rows {
            let br = r / BLOCK_SIDE;
            for c in 0..cols {
                let b = br * block_cols + c / BLOCK_SIDE;
                let cell = &values[(r * cols + c) * dim..(r * cols + c + 1) * dim];
                for (k, &v) in cell.iter().enumerate() {
                    let l = &mut lo[b * dim + k];
                    if v < *l {
                        *l = v;
                    }
                    let h = &mut hi[b * dim + k];
                    if v > *h {
                        *h = v;
                    }
                }
            }
        }
        Self { block_rows, block_cols, lo, hi }
    }
}

/// The trained lookup tables for one deployment and grid.
#[derive(Debug, Clone)]
pub struct TrainingGrid {
    spec: GridSpec,
    sensors: SensorSet,
    model: PropagationModel,
    rows: usize,
    cols: usize,
    centers: Vec<GeoPosition>,
    tables: Vec<SubsetTable>,
    index: BTreeMap<SubsetKey, usize>,
    frame: LocalFrame,
}

impl TrainingGrid {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn sensors(&self) -> &SensorSet {
        &self.sensors
    }

    pub fn model(&self) -> &PropagationModel {
        &self.model
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn cell_count(&self) -> usize {
        self.centers.len()
    }

    pub fn centers(&self) -> &[GeoPosition] {
        &self.centers
    }

    pub fn tables(&self) -> &[SubsetTable] {
        &self.tables
    }

    /// Tangent frame at the grid centre, on the ellipsoid.
    pub fn frame(&self) -> &LocalFrame {
        &self.frame
    }

    pub fn table(&self, key: &SubsetKey) -> Option<&SubsetTable> {
        self.index.get(key).map(|&i| &self.tables[i])
    }

    /// Total number of stored fingerprint scalars.
    pub fn scalar_count(&self) -> usize {
        self.tables.iter().map(|t| t.values.len()).sum()
    }

    fn from_parts(
        spec: GridSpec,
        sensors: SensorSet,
        model: PropagationModel,
        raw_tables: Vec<(Vec<usize>, Vec<f64>)>,
    ) -> Self {
        let (rows, cols) = spec.dims();
        let centers = cell_centers(&spec);
        let tables: Vec<SubsetTable> = raw_tables
            .into_par_iter()
            .map(|(sensor_indices, values)| {
                let dim = sensor_indices.len();
                let blocks = BlockBounds::compute(&values, dim, rows, cols);
                SubsetTable { key: sensors.key_for(&sensor_indices), sensor_indices, values, blocks }
            })
            .collect();
        let index = tables.iter().enumerate().map(|(i, t)| (t.key.clone(), i)).collect();
        let frame = LocalFrame::new(spec.center.with_altitude(0.0));
        Self { spec, sensors, model, rows, cols, centers, tables, index, frame }
    }
}

/// Options for [`build_grid_with`].
#[derive(Debug, Clone)]
pub struct BuildOptions {
    pub max_scalars: usize,
    /// Restrict training to these subsets. `None` trains every subset of size
    /// at least 2; a restricted grid answers only the listed subsets.
    pub only_subsets: Option<Vec<SubsetKey>>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self { max_scalars: DEFAULT_MAX_SCALARS, only_subsets: None }
    }
}

/// Trains tables for every subset of `sensors` with at least two members.
pub fn build_grid(
    spec: &GridSpec,
    sensors: &SensorSet,
    model: &PropagationModel,
) -> Result<TrainingGrid, GridError> {
    build_grid_with(spec, sensors, model, &BuildOptions::default())
}

pub fn build_grid_with(
    spec: &GridSpec,
    sensors: &SensorSet,
    model: &PropagationModel,
    opts: &BuildOptions,
) -> Result<TrainingGrid, GridError> {
    spec.validate()?;
    let subsets: Vec<Vec<usize>> = match &opts.only_subsets {
        None => sensors.subsets(2),
        Some(keys) => {
            let mut idx = keys
                .iter()
                .map(|k| sensors.indices_of(k))
                .collect::<Result<Vec<_>, _>>()?;
            idx.retain(|s| s.len() >= 2);
            idx.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.cmp(b)));
            idx.dedup();
            idx
        }
    };
    let cells = spec.cell_count();
    let per_cell: u128 = subsets.iter().map(|s| s.len() as u128).sum();
    let needed = per_cell * cells as u128;
    if needed > opts.max_scalars as u128 {
        return Err(GridError::BudgetExceeded { needed, budget: opts.max_scalars });
    }

    let (rows, cols) = spec.dims();
    let sensor_ecef = sensors.ecef_positions();
    let n = sensors.len();

    // Propagation times from every cell to every sensor, row-major by cell.
    let mut times = vec![0.0; cells * n];
    times.par_chunks_mut(cols * n).enumerate().for_each(|(r, row)| {
        for c in 0..cols {
            let e = spec.cell_center(r, c).to_ecef();
            tdoa::propagation_times_ecef(&e, &sensor_ecef, model, &mut row[c * n..(c + 1) * n]);
        }
    });
    debug_assert_eq!(times.len(), rows * cols * n);

    let raw: Vec<(Vec<usize>, Vec<f64>)> = subsets
        .into_par_iter()
        .map(|subset| {
            let d = subset.len();
            let mut values = vec![0.0; cells * d];
            for (cell, out) in values.chunks_mut(d).enumerate() {
                let t = &times[cell * n..(cell + 1) * n];
                for (o, &i) in out.iter_mut().zip(&subset) {
                    *o = t[i];
                }
                tdoa::rebase_on_min(out);
            }
            (subset, values)
        })
        .collect();
    Ok(TrainingGrid::from_parts(*spec, sensors.clone(), *model, raw))
}

/// ECEF positions of the cell centres, used by geometry-heavy callers.
pub fn cell_centers_ecef(grid: &TrainingGrid) -> Vec<Vector3<f64>> {
    grid.centers().iter().map(GeoPosition::to_ecef).collect()
}
