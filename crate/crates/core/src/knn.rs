//! Online phase: k-nearest-neighbour matching of measured fingerprints
//! against a [`TrainingGrid`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoPosition, LocalFrame};
use crate::grid::{SubsetTable, TrainingGrid, BLOCK_SIDE};
use crate::tdoa::{self, measured_fingerprint, Reception, SubsetKey, TdoaError, TdoaFingerprint};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum KnnError {
    #[error("no training table for sensor combination {0}")]
    UnknownSubset(SubsetKey),
    #[error("k = {k} must be between 1 and the cell count {cells}")]
    InvalidK { k: usize, cells: usize },
    #[error("message seen by {got} receivers, at least {min} required")]
    TooFewReceivers { got: usize, min: usize },
    #[error(transparent)]
    Tdoa(#[from] TdoaError),
}

/// How the neighbour search walks the table. Both strategies return the
/// same neighbours; pruning only skips blocks that provably cannot contain
/// one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchStrategy {
    #[default]
    Linear,
    Pruned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnConfig {
    pub k: usize,
    /// Messages with fewer receivers are reported as unlocatable.
    pub min_receivers: usize,
    pub search: SearchStrategy,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self { k: 5, min_receivers: 2, search: SearchStrategy::Linear }
    }
}

impl KnnConfig {
    pub fn with_k(k: usize) -> Self {
        Self { k, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Knn,
    Mlat,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Knn => "knn",
            Method::Mlat => "mlat",
        }
    }
}

/// Horizontal position estimate and its diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocationEstimate {
    pub position: GeoPosition,
    pub method: Method,
    pub subset_key: SubsetKey,
    /// Largest horizontal distance between any two of the k neighbours.
    pub neighbor_spread_m: f64,
    /// Only set for MLAT estimates.
    pub gdop: Option<f64>,
    /// Mean fingerprint distance of the k neighbours in seconds (k-NN only).
    pub fingerprint_distance_s: Option<f64>,
}

/// The k best `(squared distance, cell)` pairs, ordered lexicographically so
/// that ties go to the lowest cell index regardless of visiting order.
struct TopK {
    k: usize,
    best: Vec<(f64, usize)>,
}

impl TopK {
    fn new(k: usize) -> Self {
        Self { k, best: Vec::with_capacity(k + 1) }
    }

    fn full(&self) -> bool {
        self.best.len() == self.k
    }

    fn worst(&self) -> f64 {
        self.best.last().map_or(f64::INFINITY, |b| b.0)
    }

    #[inline]
    fn offer(&mut self, d2: f64, cell: usize) {
        let better = |a: (f64, usize), b: (f64, usize)| a.0 < b.0 || (a.0 == b.0 && a.1 < b.1);
        if self.full() && !better((d2, cell), *self.best.last().unwrap()) {
            return;
        }
        let pos = self.best.partition_point(|&b| better(b, (d2, cell)));
        self.best.insert(pos, (d2, cell));
        self.best.truncate(self.k);
    }
}

fn search_linear(table: &SubsetTable, q: &[f64], k: usize) -> TopK {
    let mut top = TopK::new(k);
    for (cell, f) in table.values().chunks_exact(q.len()).enumerate() {
        let d2 = tdoa::squared_distance(q, f);
        if !top.full() || d2 < top.worst() {
            top.offer(d2, cell);
        }
    }
    top
}

fn search_pruned(table: &SubsetTable, q: &[f64], k: usize, rows: usize, cols: usize) -> TopK {
    let dim = q.len();
    let blocks = table.blocks();
    let n_blocks = blocks.block_rows * blocks.block_cols;
    let mut order: Vec<(f64, usize)> = (0..n_blocks)
        .map(|b| {
            let lo = &blocks.lo[b * dim..(b + 1) * dim];
            let hi = &blocks.hi[b * dim..(b + 1) * dim];
            let mut lb = 0.0;
            for i in 0..dim {
                let gap = if q[i] < lo[i] {
                    lo[i] - q[i]
                } else if q[i] > hi[i] {
                    q[i] - hi[i]
                } else {
                    0.0
                };
                lb += gap * gap;
            }
            (lb, b)
        })
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let values = table.values();
    let mut top = TopK::new(k);
    for (lb, b) in order {
        // A cell in this block has squared distance >= lb; equality must still
        // be scanned because a lower cell index wins ties.
        if top.full() && lb > top.worst() {
            break;
        }
        let r0 = (b / blocks.block_cols) * BLOCK_SIDE;
        let c0 = (b % blocks.block_cols) * BLOCK_SIDE;
        for r in r0..(r0 + BLOCK_SIDE).min(rows) {
            for c in c0..(c0 + BLOCK_SIDE).min(cols) {
                let cell = r * cols + c;
                let d2 = tdoa::squared_distance(q, &values[cell * dim..(cell + 1) * dim]);
                top.offer(d2, cell);
            }
        }
    }
    top
}

/// The k grid cells closest to `fp`, as `(cell index, fingerprint distance)`
/// in ascending order of distance.
pub fn nearest_cells(
    fp: &TdoaFingerprint,
    grid: &TrainingGrid,
    cfg: &KnnConfig,
) -> Result<Vec<(usize, f64)>, KnnError> {
    if fp.len() < cfg.min_receivers.max(2) {
        return Err(KnnError::TooFewReceivers { got: fp.len(), min: cfg.min_receivers.max(2) });
    }
    let table = grid.table(&fp.subset_key).ok_or_else(|| KnnError::UnknownSubset(fp.subset_key.clone()))?;
    let cells = grid.cell_count();
    if cfg.k == 0 || cfg.k > cells {
        return Err(KnnError::InvalidK { k: cfg.k, cells });
    }
    let (rows, cols) = grid.dims();
    let top = match cfg.search {
        SearchStrategy::Linear => search_linear(table, &fp.tdoas_s, cfg.k),
        SearchStrategy::Pruned => search_pruned(table, &fp.tdoas_s, cfg.k, rows, cols),
    };
    Ok(top.best.into_iter().map(|(d2, c)| (c, d2.sqrt())).collect())
}

/// Averages the k nearest cells into a location estimate.
pub fn localize(fp: &TdoaFingerprint, grid: &TrainingGrid, cfg: &KnnConfig) -> Result<LocationEstimate, KnnError> {
    let neighbors = nearest_cells(fp, grid, cfg)?;
    let centers = grid.centers();
    let n = neighbors.len() as f64;
    let lat = neighbors.iter().map(|&(c, _)| centers[c].latitude_deg).sum::<f64>() / n;
    let lon = neighbors.iter().map(|&(c, _)| centers[c].longitude_deg).sum::<f64>() / n;
    let mean_d = neighbors.iter().map(|&(_, d)| d).sum::<f64>() / n;
    Ok(LocationEstimate {
        position: GeoPosition { latitude_deg: lat, longitude_deg: lon, altitude_m: grid.spec().altitude_m },
        method: Method::Knn,
        subset_key: fp.subset_key.clone(),
        neighbor_spread_m: spread(grid.frame(), neighbors.iter().map(|&(c, _)| &centers[c])),
        gdop: None,
        fingerprint_distance_s: Some(mean_d),
    })
}

fn spread<'a>(frame: &LocalFrame, points: impl Iterator<Item = &'a GeoPosition>) -> f64 {
    let enu: Vec<_> = points.map(|p| frame.to_enu(p)).collect();
    let mut max = 0.0f64;
    for (i, a) in enu.iter().enumerate() {
        for b in &enu[i + 1..] {
            max = max.max((a.east_m - b.east_m).hypot(a.north_m - b.north_m));
        }
    }
    max
}

/// Result of localizing one message of a batch.
#[derive(Debug, Clone, PartialEq)]
pub enum BatchOutcome {
    Located(LocationEstimate),
    /// Seen by fewer than the configured minimum of receivers.
    Unlocatable { receivers: usize },
    Failed(KnnError),
}

impl BatchOutcome {
    pub fn estimate(&self) -> Option<&LocationEstimate> {
        match self {
            BatchOutcome::Located(e) => Some(e),
            _ => None,
        }
    }
}

/// Localizes each message from its synchronized receptions. Output order
/// matches input order; per-message failures do not stop the batch.
pub fn localize_batch<M>(messages: &[M], grid: &TrainingGrid, cfg: &KnnConfig) -> Vec<BatchOutcome>
where
    M: AsRef<[Reception]> + Sync,
{
    messages
        .par_iter()
        .map(|m| {
            let receptions = m.as_ref();
            if receptions.len() < cfg.min_receivers.max(2) {
                return BatchOutcome::Unlocatable { receivers: receptions.len() };
            }
            match measured_fingerprint(receptions).map_err(KnnError::from).and_then(|fp| localize(&fp, grid, cfg)) {
                Ok(e) => BatchOutcome::Located(e),
                Err(e) => BatchOutcome::Failed(e),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::{EnuPoint, PropagationModel};
    use crate::grid::{build_grid, GridSpec};
    use crate::tdoa::{expected_fingerprint, Sensor, SensorId, SensorSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn frame() -> LocalFrame {
        LocalFrame::new(GeoPosition::new(47.0, 8.0, 0.0).unwrap())
    }

    fn sensors() -> SensorSet {
        let f = frame();
        let pts = [(-20_000.0, -15_000.0), (22_000.0, -18_000.0), (3_000.0, 25_000.0), (-12_000.0, 8_000.0), (15_000.0, 12_000.0)];
        SensorSet::new(
            pts.iter()
                .enumerate()
                .map(|(i, &(e, n))| Sensor::new(SensorId::new(format!("S{}", i + 1)).unwrap(), f.to_geo(&EnuPoint::new(e, n, 0.0)).with_altitude(200.0)))
                .collect(),
        )
        .unwrap()
    }

    fn spec(side: f64) -> GridSpec {
        GridSpec {
            center: GeoPosition::new(47.0, 8.0, 0.0).unwrap(),
            extent_lat_deg: 0.3,
            extent_lon_deg: 0.4,
            altitude_m: 10_500.0,
            square_side_m: side,
        }
    }

    #[test]
    fn exact_match_returns_cell() {
        let g = build_grid(&spec(500.0), &sensors(), &PropagationModel::default()).unwrap();
        let cfg = KnnConfig::with_k(1);
        let table = g.table(&g.sensors().key()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let cell = rng.random_range(0..g.cell_count());
            let fp = table.cell_fingerprint(cell);
            let est = localize(&fp, &g, &cfg).unwrap();
            assert_eq!(est.position, g.centers()[cell]);
            assert_eq!(est.neighbor_spread_m, 0.0);
        }
    }

    #[test]
    fn k_neighbours_average_lat_lon() {
        let g = build_grid(&spec(1000.0), &sensors(), &PropagationModel::default()).unwrap();
        let cfg = KnnConfig::with_k(3);
        let fp = g.table(&g.sensors().key()).unwrap().cell_fingerprint(g.cell_count() / 2 + 7);
        let nn = nearest_cells(&fp, &g, &cfg).unwrap();
        let est = localize(&fp, &g, &cfg).unwrap();
        let lat = nn.iter().map(|&(c, _)| g.centers()[c].latitude_deg).sum::<f64>() / 3.0;
        assert!((est.position.latitude_deg - lat).abs() < 1e-12);
        assert!(nn.windows(2).all(|w| w[0].1 <= w[1].1));
        let lats: Vec<f64> = nn.iter().map(|&(c, _)| g.centers()[c].latitude_deg).collect();
        let lons: Vec<f64> = nn.iter().map(|&(c, _)| g.centers()[c].longitude_deg).collect();
        // Mean lies in the neighbours' bounding box.
        let within = |v: f64, xs: &[f64]| {
            v >= xs.iter().copied().fold(f64::INFINITY, f64::min) - 1e-12
                && v <= xs.iter().copied().fold(f64::NEG_INFINITY, f64::max) + 1e-12
        };
        assert!(within(est.position.latitude_deg, &lats));
        assert!(within(est.position.longitude_deg, &lons));
    }

    #[test]
    fn arithmetic_mean_of_three() {
        // A grid 3 cells tall and 1 wide, queried to return all three cells.
        let mut s = spec(1000.0);
        s.extent_lat_deg = 3000.0 / crate::geo::meters_per_degree_lat(47.0, s.altitude_m);
        s.extent_lon_deg = 1000.0 / crate::geo::meters_per_degree_lon(47.0, s.altitude_m);
        let g = build_grid(&s, &sensors(), &PropagationModel::default()).unwrap();
        assert_eq!(g.dims(), (3, 1));
        let fp = g.table(&g.sensors().key()).unwrap().cell_fingerprint(1);
        let est = localize(&fp, &g, &KnnConfig::with_k(3)).unwrap();
        let mean = g.centers().iter().map(|c| c.latitude_deg).sum::<f64>() / 3.0;
        assert!((est.position.latitude_deg - mean).abs() < 1e-12);
        assert!((est.position.latitude_deg - g.centers()[1].latitude_deg).abs() < 1e-12);
    }

    #[test]
    fn pruned_search_matches_linear() {
        let g = build_grid(&spec(400.0), &sensors(), &PropagationModel::default()).unwrap();
        let f = frame();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for k in [1, 5, 10] {
            for _ in 0..200 {
                let p = f.to_geo(&EnuPoint::new(rng.random_range(-15_000.0..15_000.0), rng.random_range(-16_000.0..16_000.0), 0.0));
                let p = p.with_altitude(rng.random_range(9_000.0..12_000.0));
                let subsets = g.sensors().subsets(2);
                let key = g.sensors().key_for(&subsets[rng.random_range(0..subsets.len())]);
                let mut fp = expected_fingerprint(&p, &g.sensors().subset(&key).unwrap(), g.model());
                for t in fp.tdoas_s.iter_mut() {
                    *t += rng.random_range(-2e-7..2e-7);
                }
                let lin = nearest_cells(&fp, &g, &KnnConfig { k, min_receivers: 2, search: SearchStrategy::Linear }).unwrap();
                let pru = nearest_cells(&fp, &g, &KnnConfig { k, min_receivers: 2, search: SearchStrategy::Pruned }).unwrap();
                assert_eq!(lin, pru);
            }
        }
    }

    #[test]
    fn ties_resolve_to_lowest_index() {
        let mut top = TopK::new(2);
        top.offer(1.0, 9);
        top.offer(1.0, 3);
        top.offer(1.0, 5);
        assert_eq!(top.best, vec![(1.0, 3), (1.0, 5)]);
        top.offer(0.5, 10);
        assert_eq!(top.best, vec![(0.5, 10), (1.0, 3)]);
    }

    #[test]
    fn errors() {
        let g = build_grid(&spec(2000.0), &sensors(), &PropagationModel::default()).unwrap();
        let key = SubsetKey::parse("S1+X9").unwrap();
        let fp = TdoaFingerprint { reference_sensor: key.ids()[0].clone(), subset_key: key, tdoas_s: vec![0.0, 1e-6] };
        assert!(matches!(localize(&fp, &g, &KnnConfig::default()), Err(KnnError::UnknownSubset(_))));
        let fp = g.tables()[0].cell_fingerprint(0);
        assert!(matches!(localize(&fp, &g, &KnnConfig::with_k(0)), Err(KnnError::InvalidK { .. })));
        let big = KnnConfig::with_k(g.cell_count() + 1);
        assert!(matches!(localize(&fp, &g, &big), Err(KnnError::InvalidK { .. })));
        let strict = KnnConfig { min_receivers: 3, ..KnnConfig::default() };
        assert!(matches!(localize(&fp, &g, &strict), Err(KnnError::TooFewReceivers { .. })));
    }

    #[test]
    fn batch_filters_and_preserves_order() {
        let g = build_grid(&spec(2000.0), &sensors(), &PropagationModel::default()).unwrap();
        let cfg = KnnConfig::default();
        let empty: Vec<Vec<Reception>> = Vec::new();
        assert!(localize_batch(&empty, &g, &cfg).is_empty());

        let id = |s: &str| SensorId::new(s).unwrap();
        let msgs = vec![
            vec![Reception::new(id("S1"), 1.0), Reception::new(id("S2"), 1.00001)],
            vec![Reception::new(id("S3"), 2.0)],
            vec![Reception::new(id("S2"), 3.0), Reception::new(id("S4"), 3.00002), Reception::new(id("S5"), 3.00001)],
        ];
        let out = localize_batch(&msgs, &g, &cfg);
        assert_eq!(out.len(), 3);
        assert_eq!(out[0].estimate().unwrap().subset_key, SubsetKey::parse("S1+S2").unwrap());
        assert_eq!(out[1], BatchOutcome::Unlocatable { receivers: 1 });
        assert_eq!(out[2].estimate().unwrap().subset_key, SubsetKey::parse("S2+S4+S5").unwrap());

        let bad = vec![vec![Reception::new(id("S1"), 1.0), Reception::new(id("S1"), 1.1)]];
        assert!(matches!(localize_batch(&bad, &g, &cfg)[0], BatchOutcome::Failed(KnnError::Tdoa(TdoaError::DuplicateSensor(_)))));
    }
}
